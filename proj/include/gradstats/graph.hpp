#ifndef GRADSTATS_GRAPH_HPP
#define GRADSTATS_GRAPH_HPP

#include "gradstats/tensor.hpp"

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace gradstats {

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct VarId {
  std::uint32_t id = 0;
  auto operator<=>(const VarId&) const = default;
};

std::string to_string(VarId v);

enum class Role { parameter, data, constant };

std::string to_string(Role role);

struct ContractPrim {
  std::vector<AxisPair> contracted;
  std::vector<AxisPair> batched;
};

struct ElementwisePrim {
  ElementwiseOp op;
};

struct ReduceSumPrim {
  std::vector<std::size_t> axes;
};

struct BroadcastPrim {
  Shape shape;
  std::vector<std::size_t> mapping;
  // Declares which new target axis indexes examples when the source carries
  // no batch axis of its own (e.g. a bias replicated over the batch).
  std::optional<std::size_t> batch_axis;
};

struct TransposePrim {
  std::vector<std::size_t> perm;
};

struct LiteralPrim {
  Tensor value;
};

using Primitive = std::variant<ContractPrim, ElementwisePrim, ReduceSumPrim, BroadcastPrim, TransposePrim, LiteralPrim>;

enum class PrimitiveKind { contract, elementwise, reduce_sum, broadcast, transpose, literal };

PrimitiveKind kind_of(const Primitive& p);

/// Short name: "contract", "reduce_sum", ..., or the elementwise op name
/// without parameters ("tanh", "abs_pow").
std::string primitive_name(const Primitive& p);

struct Equation {
  VarId output;
  Primitive primitive;
  std::vector<VarId> inputs;
  Shape out_shape;
  std::optional<std::size_t> batch_axis;
  // Set on the equation that sums a parameter's gradient over the batch.
  std::optional<VarId> batch_reduce_of;
};

struct GraphInput {
  VarId id;
  std::string name;
  Shape shape;
  Role role = Role::data;
  std::optional<std::size_t> batch_axis;
};

struct GraphOutput {
  VarId value;
  // The parameter whose gradient (or gradient statistic) this output holds.
  std::optional<VarId> gradient_of;
};

/// Shape and batch-axis rule shared by construction and evaluation.
struct ShapeInfo {
  Shape shape;
  std::optional<std::size_t> batch_axis;
};
ShapeInfo infer_shape(const Primitive& p, std::span<const ShapeInfo> inputs);

/// Immutable list of equations in topological order.
class Graph {
 public:
  const std::vector<GraphInput>& inputs() const { return inputs_; }
  const std::vector<Equation>& equations() const { return equations_; }
  const std::vector<GraphOutput>& outputs() const { return outputs_; }

  /// Extent shared by all data inputs along their batch axis.
  std::optional<std::size_t> batch_size() const { return batch_size_; }

  bool defines(VarId v) const;
  const Shape& shape_of(VarId v) const;
  std::optional<std::size_t> batch_axis_of(VarId v) const;
  const GraphInput* input(VarId v) const;
  const GraphInput* input(const std::string& name) const;
  const Equation* producer(VarId v) const;
  std::vector<VarId> parameters() const;
  std::uint32_t id_bound() const { return static_cast<std::uint32_t>(shapes_.size()); }

 private:
  friend class GraphBuilder;
  friend Graph with_batch_size(const Graph& g, std::size_t batch);

  void index();

  std::vector<GraphInput> inputs_;
  std::vector<Equation> equations_;
  std::vector<GraphOutput> outputs_;
  std::optional<std::size_t> batch_size_;
  std::vector<Shape> shapes_;
  std::vector<std::optional<std::size_t>> batch_axes_;
  // >= 0: equation index; -1: graph input; -2: undefined.
  std::vector<std::int64_t> producer_;
  std::vector<std::int64_t> input_index_;
};

/// Incremental constructor. Shape rules are checked as equations are added.
class GraphBuilder {
 public:
  GraphBuilder() = default;
  /// Continues from an existing graph: keeps its inputs and equations, drops
  /// its outputs.
  explicit GraphBuilder(const Graph& base);

  VarId input(std::string name, Shape shape, Role role, std::optional<std::size_t> batch_axis = {});

  VarId add(Primitive p, std::vector<VarId> inputs);
  VarId contract(VarId a, VarId b, std::vector<AxisPair> contracted, std::vector<AxisPair> batched = {});
  VarId elementwise(ElementwiseOp op, VarId a);
  VarId elementwise(ElementwiseOp op, VarId a, VarId b);
  VarId reduce_sum(VarId a, std::vector<std::size_t> axes);
  VarId broadcast(VarId a, Shape shape, std::vector<std::size_t> mapping,
                  std::optional<std::size_t> batch_axis = {});
  VarId transpose(VarId a, std::vector<std::size_t> perm);
  VarId literal(Tensor value);
  VarId scalar(double value) { return literal(Tensor::scalar(value)); }

  void tag_batch_reduce(VarId equation_output, VarId param);
  void output(VarId v, std::optional<VarId> gradient_of = {});

  const Shape& shape_of(VarId v) const;
  std::optional<std::size_t> batch_axis_of(VarId v) const;
  const Equation* producer(VarId v) const;
  const GraphInput* input_of(VarId v) const;

  /// Validates outputs and the single-batch-extent invariant.
  Graph build() const;

 private:
  VarId fresh(ShapeInfo info);
  ShapeInfo info_of(VarId v) const;

  Graph g_;
};

using Bindings = std::map<VarId, Tensor>;

/// Evaluates the graph's outputs. Deterministic.
std::vector<Tensor> eval(const Graph& g, const Bindings& bindings);

/// Applies one primitive to concrete operands.
Tensor apply_primitive(const Primitive& p, std::span<const Tensor* const> inputs);

/// Rebuilds the graph with a different batch extent on every batch axis.
Graph with_batch_size(const Graph& g, std::size_t batch);

struct EquationCost {
  VarId output;
  std::uint64_t flops = 0;
  std::uint64_t output_size = 0;
};

struct CostReport {
  std::uint64_t total_flops = 0;
  // Scalar slots live at once under the written schedule; graph inputs and
  // outputs are live for the whole program, everything else is freed after
  // its last use.
  std::uint64_t peak_live_values = 0;
  std::vector<EquationCost> per_equation;
};

CostReport cost_report(const Graph& g);

/// Textual listing, one equation per line:
///   v3:f64[4,2] = contract[(1,0)] v1 v2
std::string to_string(const Graph& g);
std::string to_string(const Equation& e);

}  // namespace gradstats

#endif  // GRADSTATS_GRAPH_HPP

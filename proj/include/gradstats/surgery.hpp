#ifndef GRADSTATS_SURGERY_HPP
#define GRADSTATS_SURGERY_HPP

#include "gradstats/graph.hpp"

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace gradstats {

class SurgeryError : public GraphError {
 public:
  using GraphError::GraphError;
};

/// Elementwise transform phi averaged over per-example gradients.
class GradStatistic {
 public:
  enum class Kind { mean, mean_square, mean_sign, mean_abs_pow, per_example_custom };

  static GradStatistic mean() { return GradStatistic(Kind::mean); }
  static GradStatistic mean_square() { return GradStatistic(Kind::mean_square); }
  static GradStatistic mean_sign() { return GradStatistic(Kind::mean_sign); }
  static GradStatistic mean_abs_pow(double alpha);
  static GradStatistic custom(std::string name, std::function<double(double)> phi);

  /// Parses "mean", "mean_square", "mean_sign" or "mean_abs_pow:<alpha>".
  static GradStatistic parse(const std::string& text);

  Kind kind() const { return kind_; }
  double alpha() const { return alpha_; }
  std::string name() const;

  /// phi(s*r) == phi(s)*phi(r), so the rank-one rewrite applies.
  bool factorable() const;

  /// The elementwise op for phi. Mean has none and throws.
  ElementwiseOp phi() const;
  Tensor apply(const Tensor& g) const;

 private:
  explicit GradStatistic(Kind kind) : kind_(kind) {}

  Kind kind_;
  double alpha_ = 0.0;
  ElementwiseOp custom_;
};

enum class SiteClass { rank_one_dense, sequence_dense, bias_sum };

std::string to_string(SiteClass c);

struct ReduceSite {
  VarId equation;  // output of the batch-reducing equation
  VarId parameter;
  SiteClass shape_class;
};

/// One site per parameter output of a gradient graph. The construction-time
/// tags are cross-checked against a backward walk from the outputs.
std::vector<ReduceSite> collect_reduce_sites(const Graph& grad);

enum class Rewrite { automatic, factored, per_example };

/// Name of the rewrite applied at a site: "identity", "factored",
/// "phi_before_reduce" or "per_example".
std::string rewrite_name(const ReduceSite& site, const GradStatistic& stat, Rewrite mode = Rewrite::automatic);

/// Rewrites the gradient graph so each parameter output is
/// (1/B) sum_i phi(grad_i).
Graph inject_statistic(const Graph& grad, const GradStatistic& stat, Rewrite mode = Rewrite::automatic);

/// Gradient graph whose outputs are the stacked per-example gradients, shape
/// [B, param shape...]. This is the memory-hungry baseline, for costing.
Graph per_example_gradient_graph(const Graph& grad);

enum class OracleVariant { loop, stacked };

/// Reference statistic from B single-example gradient evaluations.
std::vector<Tensor> per_example_oracle(const Graph& loss, const Bindings& bindings, std::span<const VarId> wrt,
                                       const GradStatistic& stat, OracleVariant variant = OracleVariant::loop);

/// Bindings for example `index`: data inputs sliced to batch extent 1.
Bindings slice_example(const Graph& loss, const Bindings& bindings, std::size_t index);

}  // namespace gradstats

#endif  // GRADSTATS_SURGERY_HPP

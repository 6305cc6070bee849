#include "gradstats/graph.hpp"

#include <algorithm>
#include <set>
#include <sstream>

namespace gradstats {

std::string to_string(VarId v) { return "v" + std::to_string(v.id); }

std::string to_string(Role role) {
  switch (role) {
    case Role::parameter: return "parameter";
    case Role::data: return "data";
    case Role::constant: return "constant";
  }
  return "?";
}

PrimitiveKind kind_of(const Primitive& p) { return static_cast<PrimitiveKind>(p.index()); }

std::string primitive_name(const Primitive& p) {
  switch (kind_of(p)) {
    case PrimitiveKind::contract: return "contract";
    case PrimitiveKind::reduce_sum: return "reduce_sum";
    case PrimitiveKind::broadcast: return "broadcast";
    case PrimitiveKind::transpose: return "transpose";
    case PrimitiveKind::literal: return "literal";
    case PrimitiveKind::elementwise: {
      std::string name = std::get<ElementwisePrim>(p).op.name();
      return name.substr(0, name.find('['));
    }
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Shape rules

namespace {

std::optional<std::size_t> contract_batch_axis(const Shape& a, const Shape& b, const ContractPrim& c,
                                               std::optional<std::size_t> a_batch,
                                               std::optional<std::size_t> b_batch) {
  const std::size_t nb = c.batched.size();
  auto free_axes = [](std::size_t rank, const std::vector<AxisPair>& con, const std::vector<AxisPair>& bat,
                      bool left) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < rank; ++i) {
      bool used = false;
      for (const auto& p : con) used = used || (left ? p.first : p.second) == i;
      for (const auto& p : bat) used = used || (left ? p.first : p.second) == i;
      if (!used) out.push_back(i);
    }
    return out;
  };
  const auto a_free = free_axes(a.size(), c.contracted, c.batched, true);
  const auto b_free = free_axes(b.size(), c.contracted, c.batched, false);

  auto locate = [&](std::size_t axis, bool left) -> std::optional<std::size_t> {
    for (std::size_t k = 0; k < nb; ++k) {
      if ((left ? c.batched[k].first : c.batched[k].second) == axis) return k;
    }
    const auto& fr = left ? a_free : b_free;
    auto it = std::find(fr.begin(), fr.end(), axis);
    if (it == fr.end()) return std::nullopt;  // contracted away
    return nb + (left ? 0 : a_free.size()) + static_cast<std::size_t>(it - fr.begin());
  };

  std::optional<std::size_t> from_a = a_batch ? locate(*a_batch, true) : std::nullopt;
  std::optional<std::size_t> from_b = b_batch ? locate(*b_batch, false) : std::nullopt;
  if (from_a && from_b && *from_a != *from_b) {
    throw GraphError("contract would produce two distinct batch axes");
  }
  return from_a ? from_a : from_b;
}

}  // namespace

ShapeInfo infer_shape(const Primitive& p, std::span<const ShapeInfo> in) {
  auto need = [&](std::size_t n) {
    if (in.size() != n) {
      throw GraphError(primitive_name(p) + " expects " + std::to_string(n) + " inputs, got " +
                       std::to_string(in.size()));
    }
  };
  switch (kind_of(p)) {
    case PrimitiveKind::contract: {
      need(2);
      const auto& c = std::get<ContractPrim>(p);
      Shape s = contract_shape(in[0].shape, in[1].shape, c.contracted, c.batched);
      return {std::move(s), contract_batch_axis(in[0].shape, in[1].shape, c, in[0].batch_axis, in[1].batch_axis)};
    }
    case PrimitiveKind::elementwise: {
      const auto& op = std::get<ElementwisePrim>(p).op;
      need(op.arity());
      if (op.arity() == 1) return in[0];
      Shape s = elementwise_shape(in[0].shape, in[1].shape);
      auto ba = in[0].batch_axis, bb = in[1].batch_axis;
      if (ba && bb && *ba != *bb) throw GraphError("elementwise operands disagree on the batch axis");
      return {std::move(s), ba ? ba : bb};
    }
    case PrimitiveKind::reduce_sum: {
      need(1);
      const auto& axes = std::get<ReduceSumPrim>(p).axes;
      Shape s = reduce_sum_shape(in[0].shape, axes);
      std::optional<std::size_t> batch;
      if (auto b = in[0].batch_axis; b && std::find(axes.begin(), axes.end(), *b) == axes.end()) {
        batch = *b - static_cast<std::size_t>(std::count_if(axes.begin(), axes.end(), [&](auto ax) { return ax < *b; }));
      }
      return {std::move(s), batch};
    }
    case PrimitiveKind::broadcast: {
      need(1);
      const auto& bc = std::get<BroadcastPrim>(p);
      check_broadcast(in[0].shape, bc.shape, bc.mapping);
      std::optional<std::size_t> batch;
      if (in[0].batch_axis) batch = bc.mapping[*in[0].batch_axis];
      if (bc.batch_axis) {
        if (*bc.batch_axis >= bc.shape.size()) throw GraphError("broadcast: declared batch axis out of range");
        if (batch && *batch != *bc.batch_axis) throw GraphError("broadcast: declared batch axis conflicts with source");
        if (!batch && std::find(bc.mapping.begin(), bc.mapping.end(), *bc.batch_axis) != bc.mapping.end()) {
          throw GraphError("broadcast: declared batch axis must be a new axis");
        }
        batch = bc.batch_axis;
      }
      return {bc.shape, batch};
    }
    case PrimitiveKind::transpose: {
      need(1);
      const auto& perm = std::get<TransposePrim>(p).perm;
      Shape s = transpose_shape(in[0].shape, perm);
      std::optional<std::size_t> batch;
      if (in[0].batch_axis) {
        batch = static_cast<std::size_t>(std::find(perm.begin(), perm.end(), *in[0].batch_axis) - perm.begin());
      }
      return {std::move(s), batch};
    }
    case PrimitiveKind::literal:
      need(0);
      return {std::get<LiteralPrim>(p).value.shape(), std::nullopt};
  }
  throw GraphError("unknown primitive");
}

// ---------------------------------------------------------------------------
// Graph

void Graph::index() {
  std::uint32_t bound = 0;
  for (const auto& in : inputs_) bound = std::max(bound, in.id.id + 1);
  for (const auto& e : equations_) bound = std::max(bound, e.output.id + 1);
  shapes_.assign(bound, {});
  batch_axes_.assign(bound, std::nullopt);
  producer_.assign(bound, -2);
  input_index_.assign(bound, -1);
  for (std::size_t i = 0; i < inputs_.size(); ++i) {
    const auto& in = inputs_[i];
    shapes_[in.id.id] = in.shape;
    batch_axes_[in.id.id] = in.batch_axis;
    producer_[in.id.id] = -1;
    input_index_[in.id.id] = static_cast<std::int64_t>(i);
  }
  for (std::size_t i = 0; i < equations_.size(); ++i) {
    const auto& e = equations_[i];
    shapes_[e.output.id] = e.out_shape;
    batch_axes_[e.output.id] = e.batch_axis;
    producer_[e.output.id] = static_cast<std::int64_t>(i);
  }
}

bool Graph::defines(VarId v) const { return v.id < producer_.size() && producer_[v.id] != -2; }

const Shape& Graph::shape_of(VarId v) const {
  if (!defines(v)) throw GraphError("undefined variable " + to_string(v));
  return shapes_[v.id];
}

std::optional<std::size_t> Graph::batch_axis_of(VarId v) const {
  if (!defines(v)) throw GraphError("undefined variable " + to_string(v));
  return batch_axes_[v.id];
}

const GraphInput* Graph::input(VarId v) const {
  if (v.id >= input_index_.size() || input_index_[v.id] < 0) return nullptr;
  return &inputs_[static_cast<std::size_t>(input_index_[v.id])];
}

const GraphInput* Graph::input(const std::string& name) const {
  for (const auto& in : inputs_) {
    if (in.name == name) return &in;
  }
  return nullptr;
}

const Equation* Graph::producer(VarId v) const {
  if (v.id >= producer_.size() || producer_[v.id] < 0) return nullptr;
  return &equations_[static_cast<std::size_t>(producer_[v.id])];
}

std::vector<VarId> Graph::parameters() const {
  std::vector<VarId> out;
  for (const auto& in : inputs_) {
    if (in.role == Role::parameter) out.push_back(in.id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Builder

GraphBuilder::GraphBuilder(const Graph& base) : g_(base) {
  g_.outputs_.clear();
}

VarId GraphBuilder::fresh(ShapeInfo info) {
  VarId v{static_cast<std::uint32_t>(g_.shapes_.size())};
  g_.shapes_.push_back(std::move(info.shape));
  g_.batch_axes_.push_back(info.batch_axis);
  g_.producer_.push_back(-2);
  g_.input_index_.push_back(-1);
  return v;
}

ShapeInfo GraphBuilder::info_of(VarId v) const {
  if (!g_.defines(v)) throw GraphError("use of undefined variable " + to_string(v));
  return {g_.shapes_[v.id], g_.batch_axes_[v.id]};
}

VarId GraphBuilder::input(std::string name, Shape shape, Role role, std::optional<std::size_t> batch_axis) {
  if (role == Role::data && !batch_axis) throw GraphError("data input '" + name + "' needs a batch axis");
  if (role != Role::data && batch_axis) throw GraphError("only data inputs carry a batch axis");
  if (batch_axis && *batch_axis >= shape.size()) throw GraphError("batch axis out of range for '" + name + "'");
  VarId v = fresh({shape, batch_axis});
  g_.producer_[v.id] = -1;
  g_.input_index_[v.id] = static_cast<std::int64_t>(g_.inputs_.size());
  g_.inputs_.push_back({v, std::move(name), std::move(shape), role, batch_axis});
  return v;
}

VarId GraphBuilder::add(Primitive p, std::vector<VarId> inputs) {
  std::vector<ShapeInfo> in;
  in.reserve(inputs.size());
  for (auto v : inputs) in.push_back(info_of(v));
  ShapeInfo info = infer_shape(p, in);
  Shape out_shape = info.shape;
  auto batch = info.batch_axis;
  VarId v = fresh(std::move(info));
  g_.producer_[v.id] = static_cast<std::int64_t>(g_.equations_.size());
  g_.equations_.push_back({v, std::move(p), std::move(inputs), std::move(out_shape), batch, std::nullopt});
  return v;
}

VarId GraphBuilder::contract(VarId a, VarId b, std::vector<AxisPair> contracted, std::vector<AxisPair> batched) {
  return add(ContractPrim{std::move(contracted), std::move(batched)}, {a, b});
}

VarId GraphBuilder::elementwise(ElementwiseOp op, VarId a) { return add(ElementwisePrim{std::move(op)}, {a}); }

VarId GraphBuilder::elementwise(ElementwiseOp op, VarId a, VarId b) {
  return add(ElementwisePrim{std::move(op)}, {a, b});
}

VarId GraphBuilder::reduce_sum(VarId a, std::vector<std::size_t> axes) {
  return add(ReduceSumPrim{std::move(axes)}, {a});
}

VarId GraphBuilder::broadcast(VarId a, Shape shape, std::vector<std::size_t> mapping,
                              std::optional<std::size_t> batch_axis) {
  return add(BroadcastPrim{std::move(shape), std::move(mapping), batch_axis}, {a});
}

VarId GraphBuilder::transpose(VarId a, std::vector<std::size_t> perm) {
  return add(TransposePrim{std::move(perm)}, {a});
}

VarId GraphBuilder::literal(Tensor value) { return add(LiteralPrim{std::move(value)}, {}); }

void GraphBuilder::tag_batch_reduce(VarId equation_output, VarId param) {
  if (equation_output.id >= g_.producer_.size() || g_.producer_[equation_output.id] < 0) {
    throw GraphError("tag_batch_reduce: " + to_string(equation_output) + " is not an equation output");
  }
  g_.equations_[static_cast<std::size_t>(g_.producer_[equation_output.id])].batch_reduce_of = param;
}

void GraphBuilder::output(VarId v, std::optional<VarId> gradient_of) {
  if (!g_.defines(v)) throw GraphError("output of undefined variable " + to_string(v));
  g_.outputs_.push_back({v, gradient_of});
}

const Shape& GraphBuilder::shape_of(VarId v) const { return g_.shape_of(v); }

std::optional<std::size_t> GraphBuilder::batch_axis_of(VarId v) const { return g_.batch_axis_of(v); }

const Equation* GraphBuilder::producer(VarId v) const { return g_.producer(v); }

const GraphInput* GraphBuilder::input_of(VarId v) const { return g_.input(v); }

Graph GraphBuilder::build() const {
  Graph g = g_;
  std::optional<std::size_t> batch;
  for (const auto& in : g.inputs_) {
    if (in.role != Role::data) continue;
    const std::size_t extent = in.shape[*in.batch_axis];
    if (batch && *batch != extent) {
      throw GraphError("data inputs disagree on the batch extent: " + std::to_string(*batch) + " vs " +
                       std::to_string(extent));
    }
    batch = extent;
  }
  g.batch_size_ = batch;
  // Broadcasts that introduce a batch axis must agree with the data extent.
  for (const auto& e : g.equations_) {
    if (e.batch_axis && batch && e.out_shape[*e.batch_axis] != *batch) {
      throw GraphError(to_string(e.output) + " has batch extent " + std::to_string(e.out_shape[*e.batch_axis]) +
                       ", expected " + std::to_string(*batch));
    }
  }
  for (const auto& o : g.outputs_) {
    if (!g.defines(o.value)) throw GraphError("output " + to_string(o.value) + " is undefined");
  }
  return g;
}

// ---------------------------------------------------------------------------
// Evaluation

Tensor apply_primitive(const Primitive& p, std::span<const Tensor* const> in) {
  switch (kind_of(p)) {
    case PrimitiveKind::contract: {
      const auto& c = std::get<ContractPrim>(p);
      return contract(*in[0], *in[1], c.contracted, c.batched);
    }
    case PrimitiveKind::elementwise: {
      const auto& op = std::get<ElementwisePrim>(p).op;
      return op.arity() == 1 ? elementwise(op, *in[0]) : elementwise(op, *in[0], *in[1]);
    }
    case PrimitiveKind::reduce_sum: return reduce_sum(*in[0], std::get<ReduceSumPrim>(p).axes);
    case PrimitiveKind::broadcast: {
      const auto& b = std::get<BroadcastPrim>(p);
      return broadcast(*in[0], b.shape, b.mapping);
    }
    case PrimitiveKind::transpose: return transpose(*in[0], std::get<TransposePrim>(p).perm);
    case PrimitiveKind::literal: return std::get<LiteralPrim>(p).value;
  }
  throw GraphError("unknown primitive");
}

std::vector<Tensor> eval(const Graph& g, const Bindings& bindings) {
  std::vector<std::optional<Tensor>> values(g.id_bound());
  for (const auto& in : g.inputs()) {
    auto it = bindings.find(in.id);
    if (it == bindings.end()) throw GraphError("unbound input '" + in.name + "' (" + to_string(in.id) + ")");
    if (it->second.shape() != in.shape) {
      throw ShapeError("input '" + in.name + "' bound with shape " + shape_to_string(it->second.shape()) +
                       ", expected " + shape_to_string(in.shape));
    }
    values[in.id.id] = it->second;
  }
  std::vector<const Tensor*> args;
  for (const auto& e : g.equations()) {
    args.clear();
    for (auto v : e.inputs) args.push_back(&*values[v.id]);
    Tensor out = apply_primitive(e.primitive, args);
    if (out.shape() != e.out_shape) {
      throw GraphError("shape rule violated at " + to_string(e.output) + ": " + shape_to_string(out.shape()) +
                       " vs " + shape_to_string(e.out_shape));
    }
    values[e.output.id] = std::move(out);
  }
  std::vector<Tensor> outs;
  outs.reserve(g.outputs().size());
  for (const auto& o : g.outputs()) outs.push_back(*values[o.value.id]);
  return outs;
}

Graph with_batch_size(const Graph& g, std::size_t batch) {
  Graph out = g;
  for (auto& in : out.inputs_) {
    if (in.batch_axis) in.shape[*in.batch_axis] = batch;
  }
  out.index();
  for (auto& e : out.equations_) {
    if (auto* bc = std::get_if<BroadcastPrim>(&e.primitive); bc && e.batch_axis) bc->shape[*e.batch_axis] = batch;
    std::vector<ShapeInfo> in;
    for (auto v : e.inputs) in.push_back({out.shapes_[v.id], out.batch_axes_[v.id]});
    ShapeInfo info = infer_shape(e.primitive, in);
    e.out_shape = info.shape;
    out.shapes_[e.output.id] = info.shape;
  }
  out.batch_size_ = g.batch_size_ ? std::optional<std::size_t>(batch) : std::nullopt;
  return out;
}

// ---------------------------------------------------------------------------
// Cost model

CostReport cost_report(const Graph& g) {
  CostReport r;
  const std::size_t n = g.equations().size();
  std::vector<std::int64_t> last_use(g.id_bound(), -1);
  std::vector<bool> permanent(g.id_bound(), false);
  for (const auto& in : g.inputs()) permanent[in.id.id] = true;
  for (const auto& o : g.outputs()) permanent[o.value.id] = true;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& e = g.equations()[i];
    last_use[e.output.id] = static_cast<std::int64_t>(i);
    for (auto v : e.inputs) last_use[v.id] = static_cast<std::int64_t>(i);
  }

  std::uint64_t live = 0;
  for (const auto& in : g.inputs()) live += num_elements(in.shape);
  r.peak_live_values = live;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& e = g.equations()[i];
    const std::uint64_t out_size = num_elements(e.out_shape);
    std::uint64_t flops = 0;
    switch (kind_of(e.primitive)) {
      case PrimitiveKind::contract: {
        const auto& c = std::get<ContractPrim>(e.primitive);
        std::uint64_t k = 1;
        for (const auto& [ax, _] : c.contracted) k *= g.shape_of(e.inputs[0])[ax];
        flops = 2 * out_size * k;
        break;
      }
      case PrimitiveKind::elementwise: flops = out_size; break;
      case PrimitiveKind::reduce_sum: flops = num_elements(g.shape_of(e.inputs[0])); break;
      default: break;
    }
    r.per_equation.push_back({e.output, flops, out_size});
    r.total_flops += flops;

    live += out_size;
    r.peak_live_values = std::max(r.peak_live_values, live);
    std::set<std::uint32_t> seen;
    for (auto v : e.inputs) {
      if (!seen.insert(v.id).second) continue;
      if (!permanent[v.id] && last_use[v.id] == static_cast<std::int64_t>(i)) live -= num_elements(g.shape_of(v));
    }
    if (!permanent[e.output.id] && last_use[e.output.id] == static_cast<std::int64_t>(i)) live -= out_size;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Printing

namespace {

std::string var_decl(VarId v, const Shape& s) { return to_string(v) + ":f64" + shape_to_string(s); }

std::string pairs_to_string(const std::vector<AxisPair>& pairs) {
  std::ostringstream os;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (i) os << ',';
    os << '(' << pairs[i].first << ',' << pairs[i].second << ')';
  }
  return os.str();
}

std::string list_to_string(const std::vector<std::size_t>& xs) {
  std::ostringstream os;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) os << ',';
    os << xs[i];
  }
  return os.str();
}

std::string params_of(const Primitive& p) {
  switch (kind_of(p)) {
    case PrimitiveKind::contract: {
      const auto& c = std::get<ContractPrim>(p);
      std::string s = "[" + pairs_to_string(c.contracted);
      if (!c.batched.empty()) s += ";batch" + pairs_to_string(c.batched);
      return s + "]";
    }
    case PrimitiveKind::elementwise: return "";
    case PrimitiveKind::reduce_sum: return "[" + list_to_string(std::get<ReduceSumPrim>(p).axes) + "]";
    case PrimitiveKind::broadcast: {
      const auto& b = std::get<BroadcastPrim>(p);
      std::string s = "[" + shape_to_string(b.shape) + ";(" + list_to_string(b.mapping) + ")";
      if (b.batch_axis) s += ";batch=" + std::to_string(*b.batch_axis);
      return s + "]";
    }
    case PrimitiveKind::transpose: return "[" + list_to_string(std::get<TransposePrim>(p).perm) + "]";
    case PrimitiveKind::literal: {
      const auto& t = std::get<LiteralPrim>(p).value;
      std::ostringstream os;
      if (t.rank() == 0) {
        os << '[' << t.item() << ']';
      } else {
        os << "[f64" << shape_to_string(t.shape()) << ']';
      }
      return os.str();
    }
  }
  return "";
}

}  // namespace

std::string to_string(const Equation& e) {
  std::ostringstream os;
  os << var_decl(e.output, e.out_shape) << " = ";
  if (const auto* ew = std::get_if<ElementwisePrim>(&e.primitive)) {
    os << ew->op.name();
  } else {
    os << primitive_name(e.primitive) << params_of(e.primitive);
  }
  for (auto v : e.inputs) os << ' ' << to_string(v);
  if (e.batch_reduce_of) os << "  ; batch_reduce(" << to_string(*e.batch_reduce_of) << ')';
  return os.str();
}

std::string to_string(const Graph& g) {
  std::ostringstream os;
  for (const auto& in : g.inputs()) {
    os << "in " << var_decl(in.id, in.shape) << ' ' << in.name << ' ' << to_string(in.role);
    if (in.batch_axis) os << " batch=" << *in.batch_axis;
    os << '\n';
  }
  for (const auto& e : g.equations()) os << to_string(e) << '\n';
  for (const auto& o : g.outputs()) {
    os << "out " << to_string(o.value);
    if (o.gradient_of) os << " grad(" << to_string(*o.gradient_of) << ')';
    os << '\n';
  }
  return os.str();
}

}  // namespace gradstats

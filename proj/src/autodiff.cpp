#include "gradstats/autodiff.hpp"

#include <algorithm>
#include <mutex>
#include <numeric>
#include <unordered_map>

namespace gradstats {

namespace testing {
namespace {
std::mutex fault_mutex;
std::optional<std::string> fault_primitive;
}  // namespace

void set_vjp_fault(std::optional<std::string> primitive) {
  std::lock_guard lock(fault_mutex);
  fault_primitive = std::move(primitive);
}

std::optional<std::string> vjp_fault() {
  std::lock_guard lock(fault_mutex);
  return fault_primitive;
}
}  // namespace testing

namespace {

using Cotangents = std::vector<std::optional<VarId>>;

std::vector<std::size_t> inverse_perm(const std::vector<std::size_t>& perm) {
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
  return inv;
}

bool is_identity(const std::vector<std::size_t>& perm) {
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] != i) return false;
  }
  return true;
}

class VjpBuilder {
 public:
  VjpBuilder(GraphBuilder& b, const std::vector<bool>& needs) : b_(b), needs_(needs) {}

  Cotangents rule(const Equation& e, VarId ct) {
    switch (kind_of(e.primitive)) {
      case PrimitiveKind::contract: return contract(e, ct);
      case PrimitiveKind::elementwise: return elementwise(e, ct);
      case PrimitiveKind::reduce_sum: return reduce_sum(e, ct);
      case PrimitiveKind::broadcast: return broadcast(e, ct);
      case PrimitiveKind::transpose: {
        const auto& perm = std::get<TransposePrim>(e.primitive).perm;
        return {b_.transpose(ct, inverse_perm(perm))};
      }
      case PrimitiveKind::literal: return {};
    }
    throw MissingVjpError("no VJP rule for " + primitive_name(e.primitive));
  }

 private:
  bool needs(VarId v) const { return needs_[v.id]; }

  VarId permuted(VarId v, const std::vector<std::size_t>& perm) {
    return is_identity(perm) ? v : b_.transpose(v, perm);
  }

  // t = contract(a, b) with output axes [batched..., a free..., b free...].
  // Each operand's cotangent is a contraction of the output cotangent with the
  // other operand over that operand's free axes.
  Cotangents contract(const Equation& e, VarId ct) {
    const auto& c = std::get<ContractPrim>(e.primitive);
    const VarId a = e.inputs[0], b = e.inputs[1];
    const Shape& sa = b_.shape_of(a);
    const Shape& sb = b_.shape_of(b);
    const std::size_t nb = c.batched.size();

    auto free_of = [&](std::size_t rank, bool left) {
      std::vector<std::size_t> out;
      for (std::size_t i = 0; i < rank; ++i) {
        bool used = false;
        for (const auto& p : c.contracted) used = used || (left ? p.first : p.second) == i;
        for (const auto& p : c.batched) used = used || (left ? p.first : p.second) == i;
        if (!used) out.push_back(i);
      }
      return out;
    };
    const auto a_free = free_of(sa.size(), true);
    const auto b_free = free_of(sb.size(), false);

    Cotangents out(2);
    if (needs(a)) {
      // contract(ct, b): sum over b's free axes, keep the batched pairs.
      std::vector<AxisPair> con, bat;
      for (std::size_t j = 0; j < b_free.size(); ++j) con.push_back({nb + a_free.size() + j, b_free[j]});
      for (std::size_t k = 0; k < nb; ++k) bat.push_back({k, c.batched[k].second});
      // Result axes: batched, a free, then b's contracted axes in ascending order.
      std::vector<std::size_t> src;
      for (std::size_t k = 0; k < nb; ++k) src.push_back(c.batched[k].first);
      for (auto ax : a_free) src.push_back(ax);
      std::vector<AxisPair> by_b = c.contracted;
      std::sort(by_b.begin(), by_b.end(), [](const auto& x, const auto& y) { return x.second < y.second; });
      for (const auto& p : by_b) src.push_back(p.first);
      VarId r = b_.contract(ct, b, con, bat);
      out[0] = permuted(r, inverse_perm(src));
    }
    if (needs(b)) {
      // contract(a, ct): sum over a's free axes.
      std::vector<AxisPair> con, bat;
      for (std::size_t j = 0; j < a_free.size(); ++j) con.push_back({a_free[j], nb + j});
      for (std::size_t k = 0; k < nb; ++k) bat.push_back({c.batched[k].first, k});
      // Result axes: batched, a's contracted axes in ascending order, b free.
      std::vector<std::size_t> src;
      for (std::size_t k = 0; k < nb; ++k) src.push_back(c.batched[k].second);
      std::vector<AxisPair> by_a = c.contracted;
      std::sort(by_a.begin(), by_a.end(), [](const auto& x, const auto& y) { return x.first < y.first; });
      for (const auto& p : by_a) src.push_back(p.second);
      for (auto ax : b_free) src.push_back(ax);
      VarId r = b_.contract(a, ct, con, bat);
      out[1] = permuted(r, inverse_perm(src));
    }
    return out;
  }

  VarId mul(VarId x, VarId y) { return b_.elementwise(ops::mul(), x, y); }
  VarId scaled(VarId x, double s) { return mul(x, b_.scalar(s)); }

  Cotangents elementwise(const Equation& e, VarId ct) {
    const auto& op = std::get<ElementwisePrim>(e.primitive).op;
    const VarId y = e.output;
    if (op.arity() == 1) {
      const VarId x = e.inputs[0];
      switch (op.kind) {
        case ElementwiseKind::neg: return {b_.elementwise(ops::neg(), ct)};
        case ElementwiseKind::square: return {mul(ct, scaled(x, 2.0))};
        case ElementwiseKind::sqrt: return {b_.elementwise(ops::div(), ct, scaled(y, 2.0))};
        case ElementwiseKind::sign: return {scaled(ct, 0.0)};
        case ElementwiseKind::relu: return {mul(ct, b_.elementwise(ops::greater(0.0), x))};
        case ElementwiseKind::abs_pow: return {mul(ct, b_.elementwise(ops::abs_pow_grad(op.param), x))};
        case ElementwiseKind::tanh: {
          VarId d = b_.elementwise(ops::sub(), b_.scalar(1.0), b_.elementwise(ops::square(), y));
          return {mul(ct, d)};
        }
        case ElementwiseKind::gelu: return {mul(ct, b_.elementwise(ops::gelu_grad(), x))};
        case ElementwiseKind::max_with: return {mul(ct, b_.elementwise(ops::greater(op.param), x))};
        case ElementwiseKind::exp: return {mul(ct, y)};
        case ElementwiseKind::log: return {b_.elementwise(ops::div(), ct, x)};
        default: throw MissingVjpError("no VJP rule for elementwise " + op.name());
      }
    }
    const VarId x0 = e.inputs[0], x1 = e.inputs[1];
    Cotangents out(2);
    switch (op.kind) {
      case ElementwiseKind::add:
        out = {ct, ct};
        break;
      case ElementwiseKind::sub:
        out = {ct, needs(x1) ? std::optional(b_.elementwise(ops::neg(), ct)) : std::nullopt};
        break;
      case ElementwiseKind::mul:
        out = {needs(x0) ? std::optional(mul(ct, x1)) : std::nullopt,
               needs(x1) ? std::optional(mul(ct, x0)) : std::nullopt};
        break;
      case ElementwiseKind::div:
        out = {needs(x0) ? std::optional(b_.elementwise(ops::div(), ct, x1)) : std::nullopt,
               needs(x1) ? std::optional(b_.elementwise(
                               ops::neg(), b_.elementwise(ops::div(), mul(ct, y), x1)))
                         : std::nullopt};
        break;
      default: throw MissingVjpError("no VJP rule for elementwise " + op.name());
    }
    // A rank-0 operand was broadcast over the output; sum its cotangent back.
    for (std::size_t i = 0; i < 2; ++i) {
      if (!out[i] || !needs(e.inputs[i])) {
        out[i].reset();
        continue;
      }
      if (b_.shape_of(e.inputs[i]).empty() && !e.out_shape.empty()) {
        std::vector<std::size_t> all(e.out_shape.size());
        std::iota(all.begin(), all.end(), 0);
        out[i] = b_.reduce_sum(*out[i], all);
      }
    }
    return out;
  }

  Cotangents reduce_sum(const Equation& e, VarId ct) {
    const auto& axes = std::get<ReduceSumPrim>(e.primitive).axes;
    const VarId x = e.inputs[0];
    const Shape& sx = b_.shape_of(x);
    std::vector<std::size_t> mapping;
    for (std::size_t i = 0; i < sx.size(); ++i) {
      if (std::find(axes.begin(), axes.end(), i) == axes.end()) mapping.push_back(i);
    }
    std::optional<std::size_t> batch;
    if (auto bx = b_.batch_axis_of(x); bx && std::find(axes.begin(), axes.end(), *bx) != axes.end()) batch = bx;
    return {b_.broadcast(ct, sx, mapping, batch)};
  }

  Cotangents broadcast(const Equation& e, VarId ct) {
    const auto& bc = std::get<BroadcastPrim>(e.primitive);
    std::vector<std::size_t> new_axes;
    for (std::size_t i = 0; i < bc.shape.size(); ++i) {
      if (std::find(bc.mapping.begin(), bc.mapping.end(), i) == bc.mapping.end()) new_axes.push_back(i);
    }
    VarId r = new_axes.empty() ? ct : b_.reduce_sum(ct, new_axes);
    // r keeps the mapped target axes in ascending order.
    std::vector<std::size_t> sorted = bc.mapping;
    std::sort(sorted.begin(), sorted.end());
    std::vector<std::size_t> perm(bc.mapping.size());
    for (std::size_t j = 0; j < bc.mapping.size(); ++j) {
      perm[j] = static_cast<std::size_t>(std::find(sorted.begin(), sorted.end(), bc.mapping[j]) - sorted.begin());
    }
    return {permuted(r, perm)};
  }

  GraphBuilder& b_;
  const std::vector<bool>& needs_;
};

bool reduces_batch(const GraphBuilder& b, const Equation& e) {
  if (const auto* r = std::get_if<ReduceSumPrim>(&e.primitive)) {
    auto ax = b.batch_axis_of(e.inputs[0]);
    return ax && std::find(r->axes.begin(), r->axes.end(), *ax) != r->axes.end();
  }
  if (const auto* c = std::get_if<ContractPrim>(&e.primitive)) {
    auto ba = b.batch_axis_of(e.inputs[0]);
    auto bb = b.batch_axis_of(e.inputs[1]);
    for (const auto& [x, y] : c->contracted) {
      if ((ba && x == *ba) || (bb && y == *bb)) return true;
    }
  }
  return false;
}

}  // namespace

Graph grad_graph(const Graph& loss, std::span<const VarId> wrt, GradOptions options) {
  if (loss.outputs().size() != 1) throw GraphError("loss graph must have exactly one output");
  const VarId loss_var = loss.outputs()[0].value;
  if (!loss.shape_of(loss_var).empty()) {
    throw GraphError("loss output must be a scalar, got " + shape_to_string(loss.shape_of(loss_var)));
  }
  for (auto p : wrt) {
    const auto* in = loss.input(p);
    if (!in || in->role != Role::parameter) throw GraphError(to_string(p) + " is not a parameter input");
  }

  std::vector<std::size_t> uses(loss.id_bound(), 0);
  for (const auto& e : loss.equations()) {
    for (auto v : e.inputs) ++uses[v.id];
  }
  for (auto p : wrt) {
    if (uses[p.id] > 1) {
      throw TiedWeightError("parameter '" + loss.input(p)->name + "' is used by " + std::to_string(uses[p.id]) +
                            " equations; tied weights are not supported");
    }
  }

  GraphBuilder b(loss);
  std::vector<bool> needs(loss.id_bound(), false);
  for (auto p : wrt) needs[p.id] = true;
  for (const auto& e : loss.equations()) {
    needs[e.output.id] = std::any_of(e.inputs.begin(), e.inputs.end(), [&](VarId v) { return needs[v.id]; });
  }

  const auto fault = testing::vjp_fault();
  std::unordered_map<std::uint32_t, VarId> ct;
  ct[loss_var.id] = b.scalar(1.0);
  VjpBuilder vjp(b, needs);
  const auto& eqs = loss.equations();
  for (auto it = eqs.rbegin(); it != eqs.rend(); ++it) {
    const Equation& e = *it;
    auto found = ct.find(e.output.id);
    if (found == ct.end() || !needs[e.output.id]) continue;
    Cotangents contribs = vjp.rule(e, found->second);
    contribs.resize(e.inputs.size());
    for (std::size_t i = 0; i < e.inputs.size(); ++i) {
      const VarId x = e.inputs[i];
      if (!contribs[i] || !needs[x.id]) continue;
      VarId c = *contribs[i];
      if (fault && *fault == primitive_name(e.primitive)) c = b.elementwise(ops::neg(), c);
      auto prev = ct.find(x.id);
      if (prev == ct.end()) {
        ct[x.id] = c;
      } else {
        prev->second = b.elementwise(ops::add(), prev->second, c);
      }
    }
  }

  for (auto p : wrt) {
    auto found = ct.find(p.id);
    VarId g = found != ct.end() ? found->second : b.literal(Tensor(loss.shape_of(p)));
    // Tag the equation that sums this parameter's gradient over the batch.
    const Equation* e = b.producer(g);
    while (e && kind_of(e->primitive) == PrimitiveKind::transpose) e = b.producer(e->inputs[0]);
    if (e && reduces_batch(b, *e)) b.tag_batch_reduce(e->output, p);
    b.output(g, p);
  }
  if (options.include_loss) b.output(loss_var);
  return b.build();
}

std::vector<Tensor> finite_difference(const Graph& loss, const Bindings& bindings, std::span<const VarId> wrt,
                                      double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_difference: step must be positive");
  std::vector<Tensor> grads;
  Bindings probe = bindings;
  auto value = [&]() { return eval(loss, probe).at(0).item(); };
  for (auto p : wrt) {
    const Tensor base = bindings.at(p);
    Tensor g(base.shape());
    for (std::size_t k = 0; k < base.size(); ++k) {
      Tensor plus = base, minus = base;
      plus[k] += h;
      minus[k] -= h;
      probe[p] = plus;
      const double fp = value();
      probe[p] = minus;
      const double fm = value();
      g[k] = (fp - fm) / (2.0 * h);
    }
    probe[p] = base;
    grads.push_back(std::move(g));
  }
  return grads;
}

}  // namespace gradstats

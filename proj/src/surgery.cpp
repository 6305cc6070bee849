#include "gradstats/surgery.hpp"

#include "gradstats/autodiff.hpp"

#include <algorithm>
#include <map>
#include <optional>
#include <set>

namespace gradstats {

GradStatistic GradStatistic::mean_abs_pow(double alpha) {
  if (!(alpha > 0.0)) throw std::invalid_argument("mean_abs_pow: exponent must be positive");
  GradStatistic s(Kind::mean_abs_pow);
  s.alpha_ = alpha;
  return s;
}

GradStatistic GradStatistic::custom(std::string name, std::function<double(double)> phi) {
  GradStatistic s(Kind::per_example_custom);
  s.custom_ = ops::custom(std::move(name), std::move(phi));
  return s;
}

GradStatistic GradStatistic::parse(const std::string& text) {
  if (text == "mean") return mean();
  if (text == "mean_square") return mean_square();
  if (text == "mean_sign") return mean_sign();
  const std::string prefix = "mean_abs_pow:";
  if (text.rfind(prefix, 0) == 0) return mean_abs_pow(std::stod(text.substr(prefix.size())));
  throw std::invalid_argument("unknown statistic '" + text + "'");
}

std::string GradStatistic::name() const {
  switch (kind_) {
    case Kind::mean: return "mean";
    case Kind::mean_square: return "mean_square";
    case Kind::mean_sign: return "mean_sign";
    case Kind::mean_abs_pow: {
      char buf[64];
      std::snprintf(buf, sizeof buf, "mean_abs_pow:%g", alpha_);
      return buf;
    }
    case Kind::per_example_custom: return "custom:" + custom_.custom->name;
  }
  return "?";
}

bool GradStatistic::factorable() const {
  return kind_ == Kind::mean_square || kind_ == Kind::mean_sign || kind_ == Kind::mean_abs_pow;
}

ElementwiseOp GradStatistic::phi() const {
  switch (kind_) {
    case Kind::mean: break;
    case Kind::mean_square: return ops::square();
    case Kind::mean_sign: return ops::sign();
    case Kind::mean_abs_pow: return ops::abs_pow(alpha_);
    case Kind::per_example_custom: return custom_;
  }
  throw std::logic_error("mean has no elementwise transform");
}

Tensor GradStatistic::apply(const Tensor& g) const {
  return kind_ == Kind::mean ? g : elementwise(phi(), g);
}

std::string to_string(SiteClass c) {
  switch (c) {
    case SiteClass::rank_one_dense: return "rank_one_dense";
    case SiteClass::sequence_dense: return "sequence_dense";
    case SiteClass::bias_sum: return "bias_sum";
  }
  return "?";
}

namespace {

using AxisTable = std::vector<std::optional<std::size_t>>;

// Batch-axis bookkeeping kept separate from the graph's own, so the site
// parse does not trust what the builder recorded.
AxisTable trace_batch_axes(const Graph& g) {
  AxisTable axis(g.id_bound());
  for (const auto& in : g.inputs()) axis[in.id.id] = in.batch_axis;
  for (const auto& e : g.equations()) {
    std::optional<std::size_t> out;
    std::visit(
        [&](const auto& p) {
          using P = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<P, ContractPrim>) {
            const auto ra = g.shape_of(e.inputs[0]).size();
            const auto rb = g.shape_of(e.inputs[1]).size();
            std::vector<int> slot_a(ra, -1), slot_b(rb, -1);
            int next = 0;
            for (const auto& [x, y] : p.batched) slot_a[x] = slot_b[y] = next++;
            for (const auto& [x, y] : p.contracted) slot_a[x] = slot_b[y] = -2;
            for (std::size_t i = 0; i < ra; ++i) {
              if (slot_a[i] == -1) slot_a[i] = next++;
            }
            for (std::size_t i = 0; i < rb; ++i) {
              if (slot_b[i] == -1) slot_b[i] = next++;
            }
            if (auto ba = axis[e.inputs[0].id]; ba && slot_a[*ba] >= 0) out = slot_a[*ba];
            if (auto bb = axis[e.inputs[1].id]; !out && bb && slot_b[*bb] >= 0) out = slot_b[*bb];
          } else if constexpr (std::is_same_v<P, ElementwisePrim>) {
            for (auto v : e.inputs) {
              if (!out && axis[v.id] && g.shape_of(v).size() == e.out_shape.size()) out = axis[v.id];
            }
          } else if constexpr (std::is_same_v<P, ReduceSumPrim>) {
            if (auto b = axis[e.inputs[0].id]; b && std::find(p.axes.begin(), p.axes.end(), *b) == p.axes.end()) {
              const auto before = std::count_if(p.axes.begin(), p.axes.end(), [&](std::size_t a) { return a < *b; });
              out = *b - static_cast<std::size_t>(before);
            }
          } else if constexpr (std::is_same_v<P, BroadcastPrim>) {
            if (auto b = axis[e.inputs[0].id]) {
              out = p.mapping[*b];
            } else {
              out = p.batch_axis;
            }
          } else if constexpr (std::is_same_v<P, TransposePrim>) {
            if (auto b = axis[e.inputs[0].id]) {
              out = static_cast<std::size_t>(std::find(p.perm.begin(), p.perm.end(), *b) - p.perm.begin());
            }
          }
        },
        e.primitive);
    axis[e.output.id] = out;
  }
  return axis;
}

// The pair of a contraction that sums over the batch axis of both operands.
std::optional<std::size_t> batch_pair(const ContractPrim& c, const AxisTable& axis, const Equation& e) {
  const auto ba = axis[e.inputs[0].id];
  const auto bb = axis[e.inputs[1].id];
  for (std::size_t k = 0; k < c.contracted.size(); ++k) {
    const auto& [x, y] = c.contracted[k];
    const bool hits_a = ba && x == *ba;
    const bool hits_b = bb && y == *bb;
    if (hits_a && hits_b) return k;
    if (hits_a || hits_b) {
      throw SurgeryError(to_string(e.output) + ": batch axis contracted against a non-batch axis");
    }
  }
  return std::nullopt;
}

std::optional<SiteClass> classify(const Equation& e, const AxisTable& axis) {
  if (const auto* r = std::get_if<ReduceSumPrim>(&e.primitive)) {
    const auto b = axis[e.inputs[0].id];
    if (!b || std::find(r->axes.begin(), r->axes.end(), *b) == r->axes.end()) return std::nullopt;
    return r->axes.size() == 1 ? SiteClass::bias_sum : SiteClass::sequence_dense;
  }
  if (const auto* c = std::get_if<ContractPrim>(&e.primitive)) {
    if (!batch_pair(*c, axis, e)) return std::nullopt;
    if (!c->batched.empty()) {
      throw SurgeryError(to_string(e.output) + ": batch reduction inside a batched contraction is not supported");
    }
    return c->contracted.size() == 1 ? SiteClass::rank_one_dense : SiteClass::sequence_dense;
  }
  return std::nullopt;
}

const Equation* strip_transposes(const Graph& g, VarId v) {
  const Equation* e = g.producer(v);
  while (e && kind_of(e->primitive) == PrimitiveKind::transpose) e = g.producer(e->inputs[0]);
  return e;
}

// Replays a graph into a fresh builder, letting `site_fn` replace the
// equations listed in `sites`. A replacement may carry an extra leading batch
// axis; transposes downstream of it are shifted to match.
struct Replay {
  GraphBuilder b;
  std::map<VarId, VarId> map;
  std::set<VarId> leading;

  template <typename SiteFn>
  Replay(const Graph& g, const std::map<VarId, const ReduceSite*>& sites, SiteFn site_fn) {
    // Walk ids in creation order so inputs keep their ids and caller bindings stay valid.
    for (std::uint32_t id = 0; id < g.id_bound(); ++id) {
      const VarId var{id};
      if (const auto* in = g.input(var)) {
        map[var] = b.input(in->name, in->shape, in->role, in->batch_axis);
        if (map[var] != var) throw SurgeryError("input '" + in->name + "' declared after a rewritten site");
        continue;
      }
      const Equation* ep = g.producer(var);
      if (!ep) continue;
      const Equation& e = *ep;
      std::vector<VarId> ins;
      for (auto v : e.inputs) ins.push_back(map.at(v));
      if (auto it = sites.find(e.output); it != sites.end()) {
        auto [v, lead] = site_fn(b, e, ins, *it->second);
        map[e.output] = v;
        if (lead) leading.insert(e.output);
        continue;
      }
      if (const auto* t = std::get_if<TransposePrim>(&e.primitive); t && leading.count(e.inputs[0])) {
        std::vector<std::size_t> perm{0};
        for (auto p : t->perm) perm.push_back(p + 1);
        map[e.output] = b.transpose(ins[0], perm);
        leading.insert(e.output);
        continue;
      }
      if (std::any_of(e.inputs.begin(), e.inputs.end(), [&](VarId v) { return leading.count(v) > 0; })) {
        throw SurgeryError(to_string(e.output) + " consumes a per-example value");
      }
      map[e.output] = b.add(e.primitive, ins);
      if (e.batch_reduce_of) b.tag_batch_reduce(map[e.output], map.at(*e.batch_reduce_of));
    }
  }
};

// Per-example gradients of one site, stacked along a new leading axis.
VarId per_example_site(GraphBuilder& b, const Equation& e, const std::vector<VarId>& ins, const AxisTable& axis) {
  if (const auto* r = std::get_if<ReduceSumPrim>(&e.primitive)) {
    const std::size_t batch = *axis[e.inputs[0].id];
    std::vector<std::size_t> rest;
    for (auto a : r->axes) {
      if (a != batch) rest.push_back(a);
    }
    VarId x = ins[0];
    std::size_t bpos = batch;
    if (!rest.empty()) {
      x = b.reduce_sum(x, rest);
      bpos -= static_cast<std::size_t>(std::count_if(rest.begin(), rest.end(), [&](std::size_t a) { return a < batch; }));
    }
    if (bpos != 0) {
      std::vector<std::size_t> perm{bpos};
      for (std::size_t i = 0; i < b.shape_of(x).size(); ++i) {
        if (i != bpos) perm.push_back(i);
      }
      x = b.transpose(x, perm);
    }
    return x;
  }
  const auto& c = std::get<ContractPrim>(e.primitive);
  const std::size_t k = *batch_pair(c, axis, e);
  std::vector<AxisPair> con;
  for (std::size_t j = 0; j < c.contracted.size(); ++j) {
    if (j != k) con.push_back(c.contracted[j]);
  }
  return b.contract(ins[0], ins[1], con, {c.contracted[k]});
}

struct SiteContext {
  std::vector<ReduceSite> sites;
  std::map<VarId, const ReduceSite*> by_equation;
  AxisTable axis;
  std::size_t batch = 0;
};

SiteContext context_of(const Graph& grad) {
  SiteContext ctx;
  if (!grad.batch_size()) throw SurgeryError("gradient graph has no batch axis");
  ctx.batch = *grad.batch_size();
  ctx.sites = collect_reduce_sites(grad);
  for (const auto& s : ctx.sites) ctx.by_equation[s.equation] = &s;
  ctx.axis = trace_batch_axes(grad);
  return ctx;
}

Rewrite resolve(const ReduceSite& site, const GradStatistic& stat, Rewrite mode) {
  if (mode == Rewrite::factored) {
    if (site.shape_class == SiteClass::sequence_dense) {
      throw SurgeryError("factored rewrite requested at a sequence_dense site");
    }
    if (!stat.factorable()) throw SurgeryError("factored rewrite requested for non-factorable " + stat.name());
    return mode;
  }
  if (mode == Rewrite::per_example) return mode;
  if (stat.kind() == GradStatistic::Kind::per_example_custom || site.shape_class == SiteClass::sequence_dense) {
    return Rewrite::per_example;
  }
  return Rewrite::factored;
}

}  // namespace

std::vector<ReduceSite> collect_reduce_sites(const Graph& grad) {
  const AxisTable axis = trace_batch_axes(grad);
  std::vector<ReduceSite> sites;
  std::set<VarId> parsed;
  for (const auto& out : grad.outputs()) {
    if (!out.gradient_of) continue;
    const VarId param = *out.gradient_of;
    const Equation* e = strip_transposes(grad, out.value);
    if (!e) throw SurgeryError("parameter " + to_string(param) + " has no reduce site");
    const auto cls = classify(*e, axis);
    if (!cls) {
      throw SurgeryError("parameter " + to_string(param) + ": " + primitive_name(e->primitive) +
                         " at " + to_string(e->output) + " does not reduce the batch axis (unsupported pattern)");
    }
    if (e->batch_reduce_of != param) {
      throw SurgeryError("tag/parse disagreement at " + to_string(e->output) + " for parameter " + to_string(param));
    }
    if (!parsed.insert(e->output).second) {
      throw SurgeryError(to_string(e->output) + " is the reduce site of more than one parameter");
    }
    sites.push_back({e->output, param, *cls});
  }
  for (const auto& e : grad.equations()) {
    if (e.batch_reduce_of && !parsed.count(e.output)) {
      throw SurgeryError("tag/parse disagreement: " + to_string(e.output) + " is tagged but not a parameter site");
    }
  }
  return sites;
}

std::string rewrite_name(const ReduceSite& site, const GradStatistic& stat, Rewrite mode) {
  if (stat.kind() == GradStatistic::Kind::mean) return "identity";
  if (resolve(site, stat, mode) == Rewrite::per_example) return "per_example";
  return site.shape_class == SiteClass::bias_sum ? "phi_before_reduce" : "factored";
}

Graph inject_statistic(const Graph& grad, const GradStatistic& stat, Rewrite mode) {
  const SiteContext ctx = context_of(grad);
  std::map<VarId, const ReduceSite*> active;
  if (stat.kind() != GradStatistic::Kind::mean) active = ctx.by_equation;

  auto site_fn = [&](GraphBuilder& b, const Equation& e, const std::vector<VarId>& ins,
                     const ReduceSite& site) -> std::pair<VarId, bool> {
    const ElementwiseOp phi = stat.phi();
    VarId out;
    if (resolve(site, stat, mode) == Rewrite::per_example) {
      VarId stacked = per_example_site(b, e, ins, ctx.axis);
      out = b.reduce_sum(b.elementwise(phi, stacked), {0});
    } else if (const auto* r = std::get_if<ReduceSumPrim>(&e.primitive)) {
      out = b.reduce_sum(b.elementwise(phi, ins[0]), r->axes);
    } else {
      const auto& c = std::get<ContractPrim>(e.primitive);
      out = b.contract(b.elementwise(phi, ins[0]), b.elementwise(phi, ins[1]), c.contracted);
    }
    return {out, false};
  };
  Replay r(grad, active, site_fn);
  for (const auto& s : ctx.sites) {
    if (active.count(s.equation)) r.b.tag_batch_reduce(r.map.at(s.equation), r.map.at(s.parameter));
  }
  const VarId scale = r.b.scalar(static_cast<double>(ctx.batch));
  for (const auto& o : grad.outputs()) {
    const VarId v = r.map.at(o.value);
    if (o.gradient_of) {
      r.b.output(r.b.elementwise(ops::div(), v, scale), r.map.at(*o.gradient_of));
    } else {
      r.b.output(v);
    }
  }
  return r.b.build();
}

Graph per_example_gradient_graph(const Graph& grad) {
  const SiteContext ctx = context_of(grad);
  auto site_fn = [&](GraphBuilder& b, const Equation& e, const std::vector<VarId>& ins,
                     const ReduceSite&) -> std::pair<VarId, bool> {
    return {per_example_site(b, e, ins, ctx.axis), true};
  };
  Replay r(grad, ctx.by_equation, site_fn);
  for (const auto& o : grad.outputs()) {
    if (o.gradient_of) r.b.output(r.map.at(o.value), r.map.at(*o.gradient_of));
  }
  return r.b.build();
}

Bindings slice_example(const Graph& loss, const Bindings& bindings, std::size_t index) {
  Bindings out = bindings;
  for (const auto& in : loss.inputs()) {
    if (in.role == Role::data) out[in.id] = take(bindings.at(in.id), *in.batch_axis, index);
  }
  return out;
}

std::vector<Tensor> per_example_oracle(const Graph& loss, const Bindings& bindings, std::span<const VarId> wrt,
                                       const GradStatistic& stat, OracleVariant variant) {
  if (!loss.batch_size() || *loss.batch_size() == 0) throw GraphError("oracle needs a batch of at least one");
  const std::size_t batch = *loss.batch_size();
  const Graph single = grad_graph(with_batch_size(loss, 1), wrt);

  std::vector<std::vector<Tensor>> per_example;
  per_example.reserve(batch);
  for (std::size_t i = 0; i < batch; ++i) per_example.push_back(eval(single, slice_example(loss, bindings, i)));

  std::vector<Tensor> out;
  const double b = static_cast<double>(batch);
  for (std::size_t p = 0; p < wrt.size(); ++p) {
    if (variant == OracleVariant::loop) {
      Tensor acc(per_example[0][p].shape());
      for (std::size_t i = 0; i < batch; ++i) acc = acc + stat.apply(per_example[i][p]);
      out.push_back(acc / b);
    } else {
      std::vector<Tensor> parts;
      for (std::size_t i = 0; i < batch; ++i) parts.push_back(per_example[i][p]);
      out.push_back(reduce_sum(stat.apply(stack(parts)), {0}) / b);
    }
  }
  return out;
}

}  // namespace gradstats

#include "gradstats/verify.hpp"

#include "gradstats/autodiff.hpp"
#include "gradstats/random.hpp"
#include "gradstats/stats.hpp"

#include <cmath>
#include <numeric>

namespace gradstats {

bool VerifyReport::pass() const {
  return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.pass; });
}

void VerifyReport::record(const std::string& name, double error, double threshold, std::uint64_t seed) {
  auto it = std::find_if(checks.begin(), checks.end(), [&](const CheckResult& c) { return c.name == name; });
  if (it == checks.end()) {
    checks.push_back({name, 0.0, threshold, true, 0});
    it = checks.end() - 1;
  }
  const bool ok = error <= threshold;
  if (!(error <= it->max_rel_error)) it->max_rel_error = error;
  if (!ok && it->pass) {
    it->pass = false;
    it->failing_seed = seed;
  }
}

void VerifyReport::merge(const VerifyReport& other) {
  checks.insert(checks.end(), other.checks.begin(), other.checks.end());
}

namespace {

// Integer in [lo, hi] from one uniform draw.
std::size_t pick(const CounterRng& rng, std::uint64_t index, std::size_t lo, std::size_t hi) {
  const auto span = static_cast<double>(hi - lo + 1);
  return lo + std::min(hi - lo, static_cast<std::size_t>(rng.uniform(index) * span));
}

constexpr std::uint64_t kSpecStream = 400;
constexpr std::uint64_t kBindStream = 500;

}  // namespace

ModelSpec random_mlp_spec(std::uint64_t seed, std::size_t max_layers, std::size_t max_width) {
  const CounterRng rng(seed, kSpecStream);
  ModelSpec m;
  m.kind = ModelSpec::Kind::mlp_vector;
  const std::size_t layers = pick(rng, 0, 1, max_layers);
  m.widths.clear();
  for (std::size_t k = 0; k <= layers; ++k) m.widths.push_back(pick(rng, 1 + k, 1, max_width));
  m.activation = rng.uniform(20) < 0.5 ? Activation::tanh : Activation::gelu;
  m.biases = rng.uniform(21) < 0.75;
  m.loss = rng.uniform(22) < 0.5 ? LossKind::mse : LossKind::softmax_cross_entropy;
  return m;
}

ModelSpec random_seq_spec(std::uint64_t seed, std::size_t max_length, std::size_t max_width) {
  const CounterRng rng(seed, kSpecStream + 1);
  ModelSpec m;
  m.kind = ModelSpec::Kind::seq_dense;
  m.length = pick(rng, 0, 1, max_length);
  m.width = pick(rng, 1, 1, max_width);
  m.depth = pick(rng, 2, 1, 3);
  m.loss = LossKind::mse;
  return m;
}

std::size_t random_batch(std::uint64_t seed, std::size_t max_batch) {
  return pick(CounterRng(seed, kSpecStream + 2), 0, 1, max_batch);
}

Bindings random_bindings(const Graph& g, std::uint64_t seed) {
  Bindings b;
  std::uint64_t stream = kBindStream;
  for (const auto& in : g.inputs()) {
    const CounterRng rng(seed, stream++);
    b[in.id] = rng.normal_tensor(in.shape);
  }
  return b;
}

std::vector<GradStatistic> suite_statistics() {
  return {GradStatistic::mean(), GradStatistic::mean_square(), GradStatistic::mean_sign(),
          GradStatistic::mean_abs_pow(0.5), GradStatistic::mean_abs_pow(3.0)};
}

namespace {

// Scalar loss sum(out * w) with a fixed random weight, so every output entry
// gets a distinct cotangent.
VarId weighted_sum(GraphBuilder& g, VarId out) {
  const Shape s = g.shape_of(out);
  if (s.empty()) return out;
  VarId w = g.input("w", s, Role::constant);
  std::vector<std::size_t> all(s.size());
  std::iota(all.begin(), all.end(), 0);
  return g.reduce_sum(g.elementwise(ops::mul(), out, w), all);
}

// Moves values at least `gap` away from `kink`, keeping their side.
void avoid(Tensor& t, double kink, double gap) {
  for (std::size_t k = 0; k < t.size(); ++k) {
    const double d = t[k] - kink;
    if (std::abs(d) < gap) t[k] = kink + (d < 0 ? -gap : gap) - d;
  }
}

void make_positive(Tensor& t) {
  for (std::size_t k = 0; k < t.size(); ++k) t[k] = 0.5 + std::abs(t[k]);
}

PrimitiveCase finish(std::string name, GraphBuilder& g, VarId out, std::uint64_t seed) {
  g.output(weighted_sum(g, out));
  Graph loss = g.build();
  Bindings b = random_bindings(loss, seed);
  return {std::move(name), std::move(loss), std::move(b)};
}

}  // namespace

std::vector<PrimitiveCase> primitive_cases(std::uint64_t seed) {
  std::vector<PrimitiveCase> cases;
  auto contract_case = [&](std::string name, Shape sa, Shape sb, std::vector<AxisPair> con, std::vector<AxisPair> bat) {
    GraphBuilder g;
    VarId a = g.input("a", std::move(sa), Role::parameter);
    VarId b = g.input("b", std::move(sb), Role::parameter);
    cases.push_back(finish(std::move(name), g, g.contract(a, b, std::move(con), std::move(bat)), seed));
  };
  contract_case("contract", {3, 4}, {4, 2}, {{1, 0}}, {});
  contract_case("contract", {4, 3}, {4, 2}, {{0, 0}}, {});
  contract_case("contract", {2, 3, 4}, {4, 3, 5}, {{1, 1}, {2, 0}}, {});
  contract_case("contract", {3, 2}, {4}, {}, {});
  contract_case("contract", {5, 3, 4}, {5, 4, 2}, {{2, 1}}, {{0, 0}});
  contract_case("contract", {3, 5, 2}, {2, 4, 5}, {{2, 0}}, {{1, 2}});

  {
    GraphBuilder g;
    VarId x = g.input("x", {3, 4, 2}, Role::parameter);
    cases.push_back(finish("reduce_sum", g, g.reduce_sum(x, {0, 2}), seed));
  }
  {
    GraphBuilder g;
    VarId x = g.input("x", {3, 2}, Role::parameter);
    cases.push_back(finish("broadcast", g, g.broadcast(x, {2, 4, 3}, {2, 0}), seed));
  }
  {
    GraphBuilder g;
    VarId x = g.input("x", {3, 4, 2}, Role::parameter);
    cases.push_back(finish("transpose", g, g.transpose(x, {2, 0, 1}), seed));
  }

  struct Unary {
    ElementwiseOp op;
    bool positive = false;
    std::optional<double> kink;
  };
  const std::optional<double> none;
  const std::vector<Unary> unary{
      {ops::neg(), false, none},         {ops::square(), false, none},     {ops::sqrt(), true, none},
      {ops::sign(), false, 0.0},         {ops::relu(), false, 0.0},        {ops::abs_pow(1.5), false, 0.0},
      {ops::abs_pow(3.0), false, none},  {ops::tanh(), false, none},       {ops::gelu(), false, none},
      {ops::max_with(0.3), false, 0.3},  {ops::exp(), false, none},        {ops::log(), true, none},
  };
  for (const auto& u : unary) {
    GraphBuilder g;
    VarId x = g.input("x", {3, 4}, Role::parameter);
    auto c = finish(primitive_name(ElementwisePrim{u.op}), g, g.elementwise(u.op, x), seed);
    Tensor& xv = c.bindings.at(x);
    if (u.positive) make_positive(xv);
    if (u.kink) avoid(xv, *u.kink, 0.1);
    cases.push_back(std::move(c));
  }
  for (const auto& op : {ops::add(), ops::sub(), ops::mul(), ops::div()}) {
    GraphBuilder g;
    VarId x = g.input("x", {3, 4}, Role::parameter);
    VarId y = g.input("y", {3, 4}, Role::parameter);
    auto c = finish(op.name(), g, g.elementwise(op, x, y), seed);
    if (op.kind == ElementwiseKind::div) make_positive(c.bindings.at(y));
    cases.push_back(std::move(c));
  }
  {
    // Rank-0 operand against a tensor.
    GraphBuilder g;
    VarId x = g.input("x", {3, 4}, Role::parameter);
    VarId s = g.input("s", {}, Role::parameter);
    cases.push_back(finish("mul", g, g.elementwise(ops::mul(), s, x), seed));
  }
  return cases;
}

namespace {

double fd_error(const Graph& loss, const Bindings& bnd, const std::vector<VarId>& wrt) {
  const Graph grad = grad_graph(loss, wrt);
  const auto analytic = eval(grad, bnd);
  const auto numeric = finite_difference(loss, bnd, wrt, 1e-5);
  return relative_error(analytic, numeric);
}

}  // namespace

VerifyReport verify_autodiff(std::uint64_t seed, std::size_t trials) {
  VerifyReport r;
  for (std::size_t t = 0; t < trials; ++t) {
    const std::uint64_t s = seed + t;
    for (const auto& c : primitive_cases(s)) {
      r.record("autodiff." + c.name, fd_error(c.loss, c.bindings, c.loss.parameters()), 1e-6, s);
    }
    const Model mlp = build_model(random_mlp_spec(s), TaskSpec{}, random_batch(s));
    r.record("autodiff.mlp_loss", fd_error(mlp.loss, random_bindings(mlp.loss, s), mlp.params), 1e-6, s);
    const Model seq = build_model(random_seq_spec(s), TaskSpec{}, random_batch(s));
    r.record("autodiff.seq_dense_loss", fd_error(seq.loss, random_bindings(seq.loss, s), seq.params), 1e-6, s);
  }
  return r;
}

namespace {

void oracle_checks(VerifyReport& r, const std::string& prefix, const Model& m, std::uint64_t seed) {
  const Bindings bnd = random_bindings(m.loss, seed);
  const Graph grad = grad_graph(m.loss, m.params);
  for (const auto& stat : suite_statistics()) {
    const auto surgered = eval(inject_statistic(grad, stat), bnd);
    const auto oracle = per_example_oracle(m.loss, bnd, m.params, stat);
    r.record(prefix + "." + stat.name(), relative_error(surgered, oracle), 1e-9, seed);
  }
}

}  // namespace

VerifyReport verify_surgery(std::uint64_t seed, std::size_t trials) {
  VerifyReport r;
  for (std::size_t t = 0; t < trials; ++t) {
    const std::uint64_t s = seed + t;
    oracle_checks(r, "surgery.mlp", build_model(random_mlp_spec(s), TaskSpec{}, random_batch(s)), s);
    oracle_checks(r, "surgery.seq_dense", build_model(random_seq_spec(s), TaskSpec{}, random_batch(s)), s);

    // Mean through the rewritten graph against finite differences of the loss.
    const Model m = build_model(random_mlp_spec(s, 2, 6), TaskSpec{}, random_batch(s, 4));
    const Bindings bnd = random_bindings(m.loss, s);
    const auto mean = eval(inject_statistic(grad_graph(m.loss, m.params), GradStatistic::mean()), bnd);
    auto fd = finite_difference(m.loss, bnd, m.params, 1e-5);
    const double b = static_cast<double>(*m.loss.batch_size());
    for (auto& g : fd) g = g / b;
    r.record("surgery.mean_vs_finite_difference", relative_error(mean, fd), 1e-6, s);
  }
  return r;
}

VerifyReport verify_estimators(std::uint64_t seed, std::size_t trials) {
  VerifyReport r;
  {
    const auto m = estimate_moments(Tensor::scalar(4.0), Tensor::scalar(5.0), 2);
    r.record("estimators.worked_instance", std::abs(m.sigma_sq.item() - 2.0) + std::abs(m.mu_sq.item() - 3.0), 0.0,
             seed);
  }
  for (std::size_t t = 0; t < trials; ++t) {
    const std::uint64_t s = seed + t;
    const CounterRng rng(s, 600);
    const std::size_t batch = 2 + static_cast<std::size_t>(rng.uniform(0) * 15);
    const std::size_t p = 8;
    Tensor g = rng.normal_tensor({batch, p}, 1);
    g.array() = 0.3 + 1.7 * g.array();
    const Tensor mean = reduce_sum(g, {0}) / static_cast<double>(batch);
    const Tensor nu_adam = square(mean);
    const Tensor nu_micro = reduce_sum(square(g), {0}) / static_cast<double>(batch);
    Tensor sample_var({p});
    for (std::size_t j = 0; j < p; ++j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < batch; ++i) acc += (g[i * p + j] - mean[j]) * (g[i * p + j] - mean[j]);
      sample_var[j] = acc / static_cast<double>(batch - 1);
    }
    const auto m = estimate_moments(nu_adam, nu_micro, batch);
    r.record("estimators.sample_variance_identity", relative_error(m.sigma_sq, sample_var), 1e-12, s);
  }
  return r;
}

VerifyReport run_verify(const std::string& scope, std::uint64_t seed, std::size_t trials) {
  if (trials == 0) throw std::invalid_argument("trials must be at least 1");
  VerifyReport r;
  const bool all = scope == "all";
  if (!all && scope != "surgery" && scope != "autodiff" && scope != "estimators") {
    throw std::invalid_argument("unknown scope '" + scope + "'");
  }
  if (all || scope == "autodiff") r.merge(verify_autodiff(seed, trials));
  if (all || scope == "surgery") r.merge(verify_surgery(seed, trials));
  if (all || scope == "estimators") r.merge(verify_estimators(seed, trials));
  return r;
}

}  // namespace gradstats

#include "gradstats/harness.hpp"

#include "gradstats/autodiff.hpp"
#include "gradstats/random.hpp"
#include "gradstats/surgery.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <future>
#include <sstream>
#include <stdexcept>

namespace gradstats {

namespace {

// Stream ids for the counter-based generator.
constexpr std::uint64_t kTrainInputs = 1;
constexpr std::uint64_t kTrainNoise = 2;
constexpr std::uint64_t kEvalInputs = 3;
constexpr std::uint64_t kEvalNoise = 4;
constexpr std::uint64_t kTeacher = 100;
constexpr std::uint64_t kInit = 200;
constexpr std::uint64_t kQuadratic = 300;

const char* to_string(Activation a) { return a == Activation::tanh ? "tanh" : "gelu"; }
const char* to_string(LossKind l) { return l == LossKind::mse ? "mse" : "softmax_cross_entropy"; }

Activation parse_activation(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "gelu") return Activation::gelu;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

LossKind parse_loss(const std::string& s) {
  if (s == "mse") return LossKind::mse;
  if (s == "softmax_cross_entropy") return LossKind::softmax_cross_entropy;
  throw std::invalid_argument("unknown loss '" + s + "'");
}

ElementwiseOp activation_op(Activation a) { return a == Activation::tanh ? ops::tanh() : ops::gelu(); }

std::vector<Shape> param_shapes(const ModelSpec& m, const TaskSpec& task) {
  std::vector<Shape> shapes;
  if (task.kind == TaskSpec::Kind::noisy_quadratic) return {{task.dim}};
  if (m.kind == ModelSpec::Kind::seq_dense) {
    for (std::size_t k = 0; k < m.depth; ++k) shapes.push_back({m.width, m.width});
    return shapes;
  }
  for (std::size_t k = 1; k < m.widths.size(); ++k) {
    shapes.push_back({m.widths[k - 1], m.widths[k]});
    if (m.biases) shapes.push_back({m.widths[k]});
  }
  return shapes;
}

// Summed loss over the batch from model outputs z and targets y, both [B, ...].
VarId summed_loss(GraphBuilder& g, LossKind kind, VarId z, VarId y) {
  const std::size_t rank = g.shape_of(z).size();
  if (kind == LossKind::mse) {
    std::vector<std::size_t> all(rank);
    for (std::size_t i = 0; i < rank; ++i) all[i] = i;
    VarId sq = g.elementwise(ops::square(), g.elementwise(ops::sub(), z, y));
    return g.reduce_sum(g.elementwise(ops::mul(), sq, g.scalar(0.5)), all);
  }
  if (rank != 2) throw std::invalid_argument("cross entropy needs [B, classes] logits");
  VarId lse = g.elementwise(ops::log(), g.reduce_sum(g.elementwise(ops::exp(), z), {1}));
  VarId picked = g.reduce_sum(g.elementwise(ops::mul(), y, z), {1});
  return g.reduce_sum(g.elementwise(ops::sub(), lse, picked), {0});
}

Tensor activate(Activation a, const Tensor& x) { return elementwise(activation_op(a), x); }

// Forward pass with concrete tensors, used for the teacher.
Tensor forward(const ModelSpec& m, const std::vector<Tensor>& params, const Tensor& x) {
  Tensor h = x;
  if (m.kind == ModelSpec::Kind::seq_dense) {
    for (std::size_t k = 0; k < m.depth; ++k) {
      h = contract(h, params[k], {{2, 0}});
      if (k + 1 < m.depth) h = elementwise(ops::tanh(), h);
    }
    return h;
  }
  std::size_t p = 0;
  const std::size_t layers = m.widths.size() - 1;
  for (std::size_t k = 0; k < layers; ++k) {
    h = contract(h, params[p++], {{1, 0}});
    if (m.biases) h = h + broadcast(params[p++], h.shape(), {1});
    if (k + 1 < layers) h = activate(m.activation, h);
  }
  return h;
}

std::vector<Tensor> random_params(const std::vector<Shape>& shapes, std::uint64_t seed, std::uint64_t stream,
                                  double bias_std) {
  std::vector<Tensor> out;
  for (std::size_t k = 0; k < shapes.size(); ++k) {
    const CounterRng rng(seed, stream + k);
    const Shape& s = shapes[k];
    if (s.size() == 1) {
      out.push_back(rng.normal_tensor(s, 0, bias_std));
    } else {
      out.push_back(rng.normal_tensor(s, 0, 1.0 / std::sqrt(static_cast<double>(s[0]))));
    }
  }
  return out;
}

std::string join_flags(const std::vector<std::string>& flags) {
  std::string out;
  for (const auto& f : flags) out += (out.empty() ? "" : ";") + f;
  return out;
}

// Runs the tasks, at most `threads` at a time, and returns results in order.
template <typename T>
std::vector<T> fan_out(std::vector<std::function<T()>>& tasks, std::size_t threads) {
  std::vector<T> out(tasks.size());
  if (threads <= 1 || tasks.size() <= 1) {
    for (std::size_t i = 0; i < tasks.size(); ++i) out[i] = tasks[i]();
    return out;
  }
  for (std::size_t start = 0; start < tasks.size(); start += threads) {
    const std::size_t end = std::min(tasks.size(), start + threads);
    std::vector<std::future<T>> futures;
    for (std::size_t i = start + 1; i < end; ++i) futures.push_back(std::async(std::launch::async, tasks[i]));
    out[start] = tasks[start]();
    for (std::size_t i = start + 1; i < end; ++i) out[i] = futures[i - start - 1].get();
  }
  return out;
}

std::vector<Tensor> squares(const std::vector<Tensor>& xs) {
  std::vector<Tensor> out;
  for (const auto& x : xs) out.push_back(square(x));
  return out;
}

}  // namespace

std::string to_string(ScalingRule rule) { return rule == ScalingRule::sqrt ? "sqrt" : "linear"; }

ScalingRule parse_rule(const std::string& text) {
  if (text == "sqrt") return ScalingRule::sqrt;
  if (text == "linear") return ScalingRule::linear;
  throw std::invalid_argument("unknown scaling rule '" + text + "'");
}

namespace {

void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw std::invalid_argument("unknown key '" + key + "' in " + where);
    }
  }
}

}  // namespace

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  check_keys(j,
             {"model", "task", "optimizer", "batch_size", "reference_batch", "lr", "scaling_rule", "warmup_base",
              "chinchilla_c", "steps", "samples", "weight_decay_numerator", "log_every", "seed", "eval_examples",
              "diagnostics", "verify_first_step"},
             "config");
  if (j.contains("model")) {
    const auto& m = j.at("model");
    check_keys(m, {"kind", "widths", "activation", "biases", "length", "width", "depth", "loss"}, "model");
    const std::string kind = m.value("kind", "mlp_vector");
    if (kind == "mlp_vector") {
      c.model.kind = ModelSpec::Kind::mlp_vector;
    } else if (kind == "seq_dense") {
      c.model.kind = ModelSpec::Kind::seq_dense;
    } else {
      throw std::invalid_argument("unknown model kind '" + kind + "'");
    }
    c.model.widths = m.value("widths", c.model.widths);
    c.model.activation = parse_activation(m.value("activation", "tanh"));
    c.model.biases = m.value("biases", true);
    c.model.length = m.value("length", c.model.length);
    c.model.width = m.value("width", c.model.width);
    c.model.depth = m.value("depth", c.model.depth);
    c.model.loss = parse_loss(m.value("loss", "mse"));
  }
  if (j.contains("task")) {
    const auto& t = j.at("task");
    check_keys(t, {"kind", "teacher_seed", "label_noise", "dim", "mu_g", "sigma_g", "h_min", "h_max", "d0"}, "task");
    const std::string kind = t.value("kind", "teacher_student");
    if (kind == "teacher_student") {
      c.task.kind = TaskSpec::Kind::teacher_student;
    } else if (kind == "noisy_quadratic") {
      c.task.kind = TaskSpec::Kind::noisy_quadratic;
    } else {
      throw std::invalid_argument("unknown task kind '" + kind + "'");
    }
    c.task.teacher_seed = t.value("teacher_seed", c.task.teacher_seed);
    c.task.label_noise = t.value("label_noise", c.task.label_noise);
    c.task.dim = t.value("dim", c.task.dim);
    c.task.mu_g = t.value("mu_g", c.task.mu_g);
    c.task.sigma_g = t.value("sigma_g", c.task.sigma_g);
    c.task.h_min = t.value("h_min", c.task.h_min);
    c.task.h_max = t.value("h_max", c.task.h_max);
    c.task.d0 = t.value("d0", c.task.d0);
  }
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    check_keys(o, {"name", "beta", "beta1", "beta2", "eps", "clip"}, "optimizer");
    c.optimizer = OptimizerSpec::parse(o.value("name", "adam"));
    c.optimizer.beta = o.value("beta", c.optimizer.beta);
    c.optimizer.beta1 = o.value("beta1", c.optimizer.beta1);
    c.optimizer.beta2 = o.value("beta2", c.optimizer.beta2);
    c.optimizer.eps = o.value("eps", c.optimizer.eps);
    if (o.contains("clip") && !o.at("clip").is_null()) c.optimizer.clip_threshold = o.at("clip").get<double>();
  }
  c.batch_size = j.value("batch_size", c.batch_size);
  c.reference_batch = j.value("reference_batch", c.reference_batch);
  c.lr = j.value("lr", c.lr);
  c.rule = parse_rule(j.value("scaling_rule", "sqrt"));
  c.warmup_base = j.value("warmup_base", c.warmup_base);
  c.chinchilla_c = j.value("chinchilla_c", c.chinchilla_c);
  if (j.contains("steps") && !j.at("steps").is_null()) c.steps = j.at("steps").get<std::uint64_t>();
  if (j.contains("samples") && !j.at("samples").is_null()) c.samples = j.at("samples").get<std::uint64_t>();
  c.weight_decay_numerator = j.value("weight_decay_numerator", c.weight_decay_numerator);
  c.log_every = j.value("log_every", c.log_every);
  c.seed = j.value("seed", c.seed);
  c.eval_examples = j.value("eval_examples", c.eval_examples);
  c.diagnostics = j.value("diagnostics", c.diagnostics);
  c.verify_first_step = j.value("verify_first_step", c.verify_first_step);
  if (c.batch_size == 0 || c.reference_batch == 0) throw std::invalid_argument("batch sizes must be positive");
  if (c.log_every == 0) throw std::invalid_argument("log_every must be positive");
  if (c.eval_examples == 0) throw std::invalid_argument("eval_examples must be positive");
  c.optimizer.validate();
  return c;
}

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json j;
  if (task.kind == TaskSpec::Kind::teacher_student) {
    j["model"] = {{"kind", model.kind == ModelSpec::Kind::mlp_vector ? "mlp_vector" : "seq_dense"},
                  {"widths", model.widths},
                  {"activation", to_string(model.activation)},
                  {"biases", model.biases},
                  {"length", model.length},
                  {"width", model.width},
                  {"depth", model.depth},
                  {"loss", to_string(model.loss)}};
    j["task"] = {{"kind", "teacher_student"}, {"teacher_seed", task.teacher_seed}, {"label_noise", task.label_noise}};
  } else {
    j["task"] = {{"kind", "noisy_quadratic"}, {"dim", task.dim},         {"mu_g", task.mu_g},
                 {"sigma_g", task.sigma_g},   {"h_min", task.h_min},     {"h_max", task.h_max},
                 {"d0", task.d0}};
  }
  j["optimizer"] = {{"name", optimizer.name()},   {"beta", optimizer.beta}, {"beta1", optimizer.beta1},
                    {"beta2", optimizer.beta2},   {"eps", optimizer.eps}};
  j["optimizer"]["clip"] = optimizer.clip_threshold ? nlohmann::json(*optimizer.clip_threshold) : nlohmann::json();
  j["batch_size"] = batch_size;
  j["reference_batch"] = reference_batch;
  j["lr"] = lr;
  j["scaling_rule"] = to_string(rule);
  j["warmup_base"] = warmup_base;
  j["chinchilla_c"] = chinchilla_c;
  j["steps"] = steps ? nlohmann::json(*steps) : nlohmann::json();
  j["samples"] = samples ? nlohmann::json(*samples) : nlohmann::json();
  j["weight_decay_numerator"] = weight_decay_numerator;
  j["log_every"] = log_every;
  j["seed"] = seed;
  j["eval_examples"] = eval_examples;
  j["diagnostics"] = diagnostics;
  j["verify_first_step"] = verify_first_step;
  return j;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  return TrainConfig::from_json(nlohmann::json::parse(in));
}

Model build_model(const ModelSpec& spec, const TaskSpec& task, std::size_t batch) {
  if (batch == 0) throw std::invalid_argument("batch size must be positive");
  GraphBuilder g;
  Model m;
  const auto shapes = param_shapes(spec, task);
  VarId loss;

  if (task.kind == TaskSpec::Kind::noisy_quadratic) {
    const std::size_t p = task.dim;
    const Shape full{batch, p};
    VarId xi = g.input("xi", full, Role::data, 0);
    VarId curv = g.input("curvature", {p}, Role::constant);
    VarId opt = g.input("optimum", {p}, Role::constant);
    VarId theta = g.input("theta", {p}, Role::parameter);
    m.params = {theta};
    m.names = {"theta"};
    VarId d = g.elementwise(ops::sub(), g.broadcast(theta, full, {1}, 0), g.broadcast(opt, full, {1}, 0));
    VarId quad = g.elementwise(ops::mul(), g.broadcast(curv, full, {1}, 0), g.elementwise(ops::square(), d));
    VarId per = g.elementwise(ops::add(), g.elementwise(ops::mul(), quad, g.scalar(0.5)),
                              g.elementwise(ops::mul(), xi, d));
    loss = g.reduce_sum(per, {0, 1});
  } else if (spec.kind == ModelSpec::Kind::seq_dense) {
    if (spec.depth == 0 || spec.length == 0 || spec.width == 0) throw std::invalid_argument("empty seq_dense model");
    if (spec.loss != LossKind::mse) throw std::invalid_argument("seq_dense supports the mse loss only");
    const Shape io{batch, spec.length, spec.width};
    VarId h = g.input("x", io, Role::data, 0);
    VarId y = g.input("y", io, Role::data, 0);
    for (std::size_t k = 0; k < spec.depth; ++k) {
      const std::string name = "W" + std::to_string(k + 1);
      VarId w = g.input(name, shapes[k], Role::parameter);
      m.params.push_back(w);
      m.names.push_back(name);
      h = g.contract(h, w, {{2, 0}});
      if (k + 1 < spec.depth) h = g.elementwise(ops::tanh(), h);
    }
    loss = summed_loss(g, spec.loss, h, y);
    m.tokens_per_example = spec.length;
  } else {
    if (spec.widths.size() < 2) throw std::invalid_argument("mlp_vector needs at least two widths");
    VarId h = g.input("x", {batch, spec.widths.front()}, Role::data, 0);
    VarId y = g.input("y", {batch, spec.widths.back()}, Role::data, 0);
    const std::size_t layers = spec.widths.size() - 1;
    for (std::size_t k = 0; k < layers; ++k) {
      const std::string suffix = std::to_string(k + 1);
      VarId w = g.input("W" + suffix, {spec.widths[k], spec.widths[k + 1]}, Role::parameter);
      m.params.push_back(w);
      m.names.push_back("W" + suffix);
      h = g.contract(h, w, {{1, 0}});
      if (spec.biases) {
        VarId b = g.input("b" + suffix, {spec.widths[k + 1]}, Role::parameter);
        m.params.push_back(b);
        m.names.push_back("b" + suffix);
        h = g.elementwise(ops::add(), h, g.broadcast(b, {batch, spec.widths[k + 1]}, {1}, 0));
      }
      if (k + 1 < layers) h = g.elementwise(activation_op(spec.activation), h);
    }
    loss = summed_loss(g, spec.loss, h, y);
  }
  g.output(loss);
  m.loss = g.build();
  for (const auto& s : shapes) m.param_count += num_elements(s);
  return m;
}

std::uint64_t chinchilla_steps(double params, double batch, double tokens, double c) {
  if (!(params > 0 && batch > 0 && tokens > 0 && c > 0)) throw std::invalid_argument("chinchilla_steps: inputs must be positive");
  const double k = std::floor(c * params / (tokens * batch));
  if (k < 1.0) throw std::invalid_argument("chinchilla_steps: budget gives zero steps");
  return static_cast<std::uint64_t>(k);
}

TaskData::TaskData(const TrainConfig& cfg, const Model&) : cfg_(cfg) {
  shapes_ = param_shapes(cfg.model, cfg.task);
  if (cfg.task.kind == TaskSpec::Kind::noisy_quadratic) {
    const std::size_t p = cfg.task.dim;
    if (p == 0 || !(cfg.task.h_min > 0.0) || cfg.task.h_max < cfg.task.h_min) {
      throw std::invalid_argument("noisy_quadratic: need dim > 0 and 0 < h_min <= h_max");
    }
    curvature_ = Tensor({p});
    for (std::size_t j = 0; j < p; ++j) {
      const double f = p == 1 ? 0.0 : static_cast<double>(j) / static_cast<double>(p - 1);
      curvature_[j] = std::exp(std::log(cfg.task.h_min) + f * (std::log(cfg.task.h_max) - std::log(cfg.task.h_min)));
    }
    optimum_ = CounterRng(cfg.seed, kQuadratic).normal_tensor({p});
  } else {
    if (cfg.model.loss == LossKind::softmax_cross_entropy && cfg.model.kind != ModelSpec::Kind::mlp_vector) {
      throw std::invalid_argument("cross entropy needs an mlp_vector model");
    }
    teacher_ = random_params(shapes_, cfg.task.teacher_seed, kTeacher, 0.1);
  }
}

Tensor TaskData::teacher_forward(const Tensor& x) const { return forward(cfg_.model, teacher_, x); }

Bindings TaskData::batch(const Model& model, std::uint64_t first, std::size_t count, bool held_out) const {
  Bindings b;
  const Graph& g = model.loss;
  const CounterRng inputs(cfg_.seed, held_out ? kEvalInputs : kTrainInputs);
  const CounterRng noise(cfg_.seed, held_out ? kEvalNoise : kTrainNoise);
  if (cfg_.task.kind == TaskSpec::Kind::noisy_quadratic) {
    const std::size_t p = cfg_.task.dim;
    Tensor xi({count, p});
    for (std::size_t i = 0; i < count; ++i) {
      for (std::size_t j = 0; j < p; ++j) {
        xi[i * p + j] = cfg_.task.mu_g + cfg_.task.sigma_g * inputs.normal((first + i) * p + j);
      }
    }
    b[g.input("xi")->id] = std::move(xi);
    b[g.input("curvature")->id] = curvature_;
    b[g.input("optimum")->id] = optimum_;
    return b;
  }
  Shape xs = g.input("x")->shape;
  xs[0] = count;
  const std::size_t per = num_elements(xs) / count;
  Tensor x(xs);
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t j = 0; j < per; ++j) x[i * per + j] = inputs.normal((first + i) * per + j);
  }
  Tensor y = teacher_forward(x);
  const std::size_t out = y.size() / count;
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t j = 0; j < out; ++j) {
      y[i * out + j] += cfg_.task.label_noise * noise.normal((first + i) * out + j);
    }
  }
  if (cfg_.model.loss == LossKind::softmax_cross_entropy) {
    Tensor onehot(y.shape());
    for (std::size_t i = 0; i < count; ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < out; ++j) {
        if (y[i * out + j] > y[i * out + best]) best = j;
      }
      onehot[i * out + best] = 1.0;
    }
    y = std::move(onehot);
  }
  b[g.input("x")->id] = std::move(x);
  b[g.input("y")->id] = std::move(y);
  return b;
}

std::vector<Tensor> TaskData::initial_params() const {
  if (cfg_.task.kind == TaskSpec::Kind::noisy_quadratic) {
    Tensor theta = optimum_;
    for (std::size_t j = 0; j < theta.size(); ++j) theta[j] += (j % 2 == 0 ? 1.0 : -1.0) * cfg_.task.d0;
    return {theta};
  }
  return random_params(shapes_, cfg_.seed, kInit, 0.0);
}

double RunSummary::musq_negative_fraction() const {
  return musq_entries == 0 ? 0.0 : static_cast<double>(musq_negative) / static_cast<double>(musq_entries);
}

double RunSummary::nu_hat_negative_fraction() const {
  return nu_hat_entries == 0 ? 0.0 : static_cast<double>(nu_hat_negative) / static_cast<double>(nu_hat_entries);
}

std::size_t threads_from_env() {
  const char* env = std::getenv("GRADSTATS_THREADS");
  if (!env || !*env) return 1;
  const long n = std::strtol(env, nullptr, 10);
  return n < 1 ? 1 : static_cast<std::size_t>(n);
}

RunRecord run_training(const TrainConfig& cfg, std::size_t threads) {
  const auto started = std::chrono::steady_clock::now();
  cfg.optimizer.validate();
  const std::size_t batch = cfg.batch_size;
  const double b = static_cast<double>(batch);
  const auto& opt = cfg.optimizer;
  const bool estimator_variant =
      opt.family == Family::adam && (opt.variant == AdamVariant::micro_adam_var || opt.variant == AdamVariant::micro_adam_msq);
  if (estimator_variant && batch < 2) throw std::invalid_argument(opt.name() + " needs a batch of at least 2");

  const Model model = build_model(cfg.model, cfg.task, batch);
  const Model held_model = build_model(cfg.model, cfg.task, cfg.eval_examples);
  const TaskData data(cfg, model);

  RunRecord rec;
  rec.config = cfg;
  rec.layers = model.names;
  auto& sum = rec.summary;
  sum.param_count = model.param_count;

  std::uint64_t total;
  if (cfg.steps) {
    total = *cfg.steps;
  } else if (cfg.samples) {
    total = *cfg.samples / batch;
  } else {
    total = chinchilla_steps(static_cast<double>(model.param_count), b,
                             static_cast<double>(model.tokens_per_example), cfg.chinchilla_c);
  }
  if (total == 0) throw std::invalid_argument("training budget gives zero steps");
  sum.total_steps = total;

  const double ratio = b / static_cast<double>(cfg.reference_batch);
  const double gamma = cfg.rule == ScalingRule::sqrt ? std::sqrt(ratio) : ratio;
  const Schedule schedule{cfg.lr * gamma,
                          std::min<std::uint64_t>(total, std::max<std::uint64_t>(1, std::llround(cfg.warmup_base * ratio))),
                          total};
  const double decay = cfg.weight_decay_numerator / static_cast<double>(total) * gamma;
  sum.peak_lr = schedule.peak;
  sum.warmup_steps = schedule.warmup_steps;
  sum.weight_decay = decay;

  const bool want_sq = batch >= 2 && (opt.needs_mean_square() || cfg.diagnostics);
  const Graph grad = grad_graph(model.loss, model.params, {.include_loss = true});
  std::optional<Graph> sq_graph, sign_graph;
  if (want_sq || opt.needs_mean_sign()) {
    const Graph plain = grad_graph(model.loss, model.params);
    if (want_sq) sq_graph = inject_statistic(plain, GradStatistic::mean_square());
    if (opt.needs_mean_sign()) sign_graph = inject_statistic(plain, GradStatistic::mean_sign());
  }

  std::vector<Tensor> params = data.initial_params();
  std::vector<Shape> shapes;
  for (const auto& p : params) shapes.push_back(p.shape());
  OptimizerState state = init_state(shapes);
  const std::size_t np = params.size();

  // EMAs of the two preconditioner inputs, for the moment diagnostics.
  const double beta2 = opt.family == Family::adam ? opt.beta2 : 0.95;
  std::vector<Tensor> ema_adam(shapes.begin(), shapes.end()), ema_micro(shapes.begin(), shapes.end());
  const Preconditioner kind =
      opt.family == Family::adam && opt.variant != AdamVariant::adam ? Preconditioner::micro : Preconditioner::adam;
  rec.moments.resize(np);

  const Bindings held = data.batch(held_model, 0, cfg.eval_examples, true);
  auto bind = [&](Bindings bnd, const Model& m) {
    for (std::size_t i = 0; i < np; ++i) bnd[m.params[i]] = params[i];
    return bnd;
  };
  auto held_loss = [&]() {
    return eval(held_model.loss, bind(held, held_model))[0].item() / static_cast<double>(cfg.eval_examples);
  };

  {
    MetricsRow row;
    row.train_loss = eval(model.loss, bind(data.batch(model, 0, batch, false), model))[0].item() / b;
    row.eval_loss = held_loss();
    rec.rows.push_back(row);
  }

  for (std::uint64_t t = 1; t <= total; ++t) {
    const Bindings bnd = bind(data.batch(model, (t - 1) * batch, batch, false), model);

    std::vector<std::function<std::vector<Tensor>()>> tasks;
    tasks.push_back([&] { return eval(grad, bnd); });
    if (sq_graph) tasks.push_back([&] { return eval(*sq_graph, bnd); });
    if (sign_graph) tasks.push_back([&] { return eval(*sign_graph, bnd); });
    auto results = fan_out(tasks, threads);

    const double train_loss = results[0].back().item() / b;
    std::vector<Tensor> mean_grad;
    for (std::size_t i = 0; i < np; ++i) mean_grad.push_back(results[0][i] / b);
    std::vector<Tensor> nu_micro;
    if (sq_graph) nu_micro.assign(results[1].begin(), results[1].begin() + static_cast<std::ptrdiff_t>(np));
    std::vector<std::string> flags;

    if (cfg.verify_first_step && t == 1 && sq_graph) {
      const auto oracle = per_example_oracle(model.loss, bnd, model.params, GradStatistic::mean_square());
      sum.verify_max_rel_error = relative_error(oracle, nu_micro);
      if (*sum.verify_max_rel_error > 1e-9) flags.push_back("verify_fail");
    }

    if (want_sq) {
      const auto nu_adam = squares(mean_grad);
      for (std::size_t i = 0; i < np; ++i) {
        ema_adam[i].array() = beta2 * ema_adam[i].array() + (1.0 - beta2) * nu_adam[i].array();
        ema_micro[i].array() = beta2 * ema_micro[i].array() + (1.0 - beta2) * nu_micro[i].array();
        const auto single = estimate_moments(nu_adam[i], nu_micro[i], batch);
        sum.musq_entries += single.mu_sq.size();
        sum.musq_negative += static_cast<std::uint64_t>((single.mu_sq.array() < 0.0).count());
      }
    }

    // Clip on the mean gradient; second-moment inputs scale with its square.
    double factor = 1.0;
    if (opt.clip_threshold) {
      factor = clip_factor(mean_grad, *opt.clip_threshold);
      if (factor != 1.0) {
        flags.push_back("clip");
        for (auto& g : mean_grad) g.array() *= factor;
        for (auto& n : nu_micro) n.array() *= factor * factor;
      }
    }

    StepStats stats;
    stats.mean_grad = mean_grad;
    if (opt.family == Family::adam) {
      auto nu_adam = squares(mean_grad);
      switch (opt.variant) {
        case AdamVariant::adam: stats.nu_batch = std::move(nu_adam); break;
        case AdamVariant::micro_adam: stats.nu_batch = batch == 1 ? std::move(nu_adam) : nu_micro; break;
        case AdamVariant::micro_adam_var:
        case AdamVariant::micro_adam_msq:
          for (std::size_t i = 0; i < np; ++i) {
            auto m = estimate_moments(nu_adam[i], nu_micro[i], batch);
            stats.nu_batch.push_back(opt.variant == AdamVariant::micro_adam_var ? m.sigma_sq : m.mu_sq);
          }
          break;
      }
    }
    if (sign_graph) stats.mean_sign.assign(results.back().begin(), results.back().begin() + static_cast<std::ptrdiff_t>(np));

    StepResult step = optimizer_step(opt, state, stats);
    state = std::move(step.state);
    if (opt.family == Family::adam && opt.variant == AdamVariant::micro_adam_msq) {
      for (const auto& n : state.nu) {
        sum.nu_hat_entries += n.size();
        sum.nu_hat_negative += static_cast<std::uint64_t>((n.array() < 0.0).count());
      }
    }

    const double lr = schedule_value(schedule, t);
    double norm_sq = 0.0;
    for (std::size_t i = 0; i < np; ++i) {
      norm_sq += (lr * step.update[i].array() + decay * params[i].array()).square().sum();
    }
    apply_update(params, step.update, lr, decay);

    bool finite = std::isfinite(train_loss);
    for (const auto& p : params) finite = finite && all_finite(p);
    if (!finite) flags.push_back("unstable");

    sum.steps_completed = t;
    if (!finite || t % cfg.log_every == 0 || t == total) {
      MetricsRow row;
      row.step = t;
      row.samples = t * batch;
      row.train_loss = train_loss;
      row.eval_loss = finite ? held_loss() : std::numeric_limits<double>::quiet_NaN();
      row.lr = lr;
      row.update_norm = std::sqrt(norm_sq);
      row.flags = join_flags(flags);
      rec.rows.push_back(row);
      if (want_sq && finite) {
        const double corr = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (std::size_t i = 0; i < np; ++i) {
          const auto m = estimate_moments(ema_adam[i] / corr, ema_micro[i] / corr, batch, kind);
          rec.moments[i].push_back({t, layer_ratio_summary(model.names[i], m)});
        }
      }
    }
    if (!finite) {
      sum.unstable = true;
      sum.unstable_step = t;
      break;
    }
  }

  sum.final_train_loss = rec.rows.back().train_loss;
  sum.final_eval_loss = rec.rows.back().eval_loss;
  sum.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return rec;
}

std::string metrics_csv(const RunRecord& run) {
  std::ostringstream out;
  out << "step,samples,train_loss,eval_loss,lr,update_norm,flags\n";
  for (const auto& r : run.rows) {
    out << r.step << ',' << r.samples << ',' << format_number(r.train_loss) << ',' << format_number(r.eval_loss)
        << ',' << format_number(r.lr) << ',' << format_number(r.update_norm) << ',' << r.flags << '\n';
  }
  return out.str();
}

std::string moments_csv(const std::vector<MomentsRow>& rows) {
  std::ostringstream out;
  out << "step,musq_mean,musq_median,sigsq_eff_mean,ratio_median,ratio_mean\n";
  for (const auto& r : rows) {
    out << r.step << ',' << format_number(r.ratio.mu_sq_mean) << ',' << format_number(r.ratio.mu_sq_median) << ','
        << format_number(r.ratio.sigma_sq_eff_mean) << ',' << format_number(r.ratio.ratio_median) << ','
        << format_number(r.ratio.ratio_mean) << '\n';
  }
  return out.str();
}

nlohmann::json summary_json(const RunRecord& run) {
  const auto& s = run.summary;
  auto num = [](double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(format_number(x)); };
  nlohmann::json j;
  j["config"] = run.config.to_json();
  j["total_steps"] = s.total_steps;
  j["steps_completed"] = s.steps_completed;
  j["final_train_loss"] = num(s.final_train_loss);
  j["final_eval_loss"] = num(s.final_eval_loss);
  j["unstable"] = s.unstable;
  j["unstable_step"] = s.unstable_step ? nlohmann::json(*s.unstable_step) : nlohmann::json();
  j["peak_lr"] = s.peak_lr;
  j["warmup_steps"] = s.warmup_steps;
  j["weight_decay"] = s.weight_decay;
  j["param_count"] = s.param_count;
  j["musq_negative_fraction"] = s.musq_negative_fraction();
  j["nu_hat_negative_fraction"] = s.nu_hat_negative_fraction();
  j["verify_max_rel_error"] = s.verify_max_rel_error ? nlohmann::json(*s.verify_max_rel_error) : nlohmann::json();
  j["wall_time_s"] = s.wall_time_s;
  return j;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

}  // namespace

void write_run(const std::filesystem::path& dir, const RunRecord& run) {
  std::filesystem::create_directories(dir);
  write_text(dir / "metrics.csv", metrics_csv(run));
  for (std::size_t i = 0; i < run.moments.size(); ++i) {
    if (!run.moments[i].empty()) write_text(dir / ("moments_" + run.layers[i] + ".csv"), moments_csv(run.moments[i]));
  }
  write_text(dir / "summary.json", summary_json(run).dump(2) + "\n");
}

Curve eval_curve(const RunRecord& run) {
  Curve c;
  for (const auto& r : run.rows) {
    if (!std::isfinite(r.eval_loss)) break;
    c.samples.push_back(static_cast<double>(r.samples));
    c.loss.push_back(r.eval_loss);
  }
  return c;
}

namespace {

double interpolate(const Curve& c, double x) {
  auto it = std::lower_bound(c.samples.begin(), c.samples.end(), x);
  if (it == c.samples.begin()) return c.loss.front();
  if (it == c.samples.end()) return c.loss.back();
  const auto hi = static_cast<std::size_t>(it - c.samples.begin());
  const double x0 = c.samples[hi - 1], x1 = c.samples[hi];
  const double w = (x - x0) / (x1 - x0);
  return c.loss[hi - 1] + w * (c.loss[hi] - c.loss[hi - 1]);
}

}  // namespace

double normalized_gap(std::span<const Curve> curves, std::size_t reference, std::size_t grid_points) {
  if (curves.size() < 2) throw std::invalid_argument("normalized_gap: need at least two curves");
  if (reference >= curves.size()) throw std::invalid_argument("normalized_gap: bad reference index");
  if (grid_points < 2) throw std::invalid_argument("normalized_gap: grid too small");
  double lo = -std::numeric_limits<double>::infinity(), hi = std::numeric_limits<double>::infinity();
  for (const auto& c : curves) {
    if (c.samples.empty()) throw std::invalid_argument("normalized_gap: empty curve");
    lo = std::max(lo, c.samples.front());
    hi = std::min(hi, c.samples.back());
  }
  if (!(hi > lo)) throw std::invalid_argument("normalized_gap: curves do not overlap");
  std::vector<std::vector<double>> ys(curves.size());
  for (std::size_t k = 0; k < grid_points; ++k) {
    const double x = lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(grid_points - 1);
    for (std::size_t c = 0; c < curves.size(); ++c) ys[c].push_back(interpolate(curves[c], x));
  }
  const auto [mn, mx] = std::minmax_element(ys[reference].begin(), ys[reference].end());
  const double range = *mx - *mn;
  double gap = 0.0;
  for (std::size_t i = 0; i < ys.size(); ++i) {
    for (std::size_t j = i + 1; j < ys.size(); ++j) {
      for (std::size_t k = 0; k < grid_points; ++k) gap = std::max(gap, std::abs(ys[i][k] - ys[j][k]));
    }
  }
  if (gap == 0.0) return 0.0;
  if (!(range > 0.0)) return std::numeric_limits<double>::infinity();
  return gap / range;
}

TrainConfig sweep_member(const TrainConfig& base, std::size_t batch, ScalingRule rule) {
  TrainConfig c = base;
  c.batch_size = batch;
  c.rule = rule;
  // Log at the same sample spacing for every batch size.
  const double scaled = static_cast<double>(base.log_every) * static_cast<double>(base.reference_batch) /
                        static_cast<double>(batch);
  c.log_every = std::max<std::uint64_t>(1, std::llround(scaled));
  return c;
}

SweepResult batch_size_sweep(const TrainConfig& base, std::span<const std::size_t> batches, ScalingRule rule,
                             std::size_t jobs, std::size_t threads) {
  if (batches.size() < 2) throw std::invalid_argument("batch_size_sweep: need at least two batch sizes");
  std::vector<std::function<RunRecord()>> tasks;
  for (auto bsz : batches) {
    TrainConfig c = sweep_member(base, bsz, rule);
    tasks.push_back([c, threads] { return run_training(c, threads); });
  }
  SweepResult out;
  out.runs = fan_out(tasks, jobs);
  for (std::size_t i = 0; i < batches.size(); ++i) {
    if (batches[i] == base.reference_batch) {
      out.reference = i;
      break;
    }
  }
  std::vector<Curve> curves;
  for (const auto& r : out.runs) {
    curves.push_back(eval_curve(r));
    out.flagged = out.flagged || r.summary.unstable;
  }
  out.gap = normalized_gap(curves, out.reference);
  return out;
}

void write_sweep(const std::filesystem::path& dir, const SweepResult& sweep) {
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  j["rule"] = to_string(sweep.runs.front().config.rule);
  j["reference_batch"] = sweep.runs[sweep.reference].config.batch_size;
  j["normalized_gap"] = std::isfinite(sweep.gap) ? nlohmann::json(sweep.gap) : nlohmann::json(format_number(sweep.gap));
  j["flagged"] = sweep.flagged;
  auto& runs = j["runs"] = nlohmann::json::array();
  for (const auto& r : sweep.runs) {
    const std::string name = "B" + std::to_string(r.config.batch_size);
    write_run(dir / name, r);
    runs.push_back({{"batch_size", r.config.batch_size},
                    {"dir", name},
                    {"unstable", r.summary.unstable},
                    {"final_eval_loss", std::isfinite(r.summary.final_eval_loss)
                                            ? nlohmann::json(r.summary.final_eval_loss)
                                            : nlohmann::json(format_number(r.summary.final_eval_loss))}});
  }
  write_text(dir / "summary.json", j.dump(2) + "\n");
}

std::vector<double> lr_grid(double base) {
  std::vector<double> out;
  for (int i = -6; i <= 1; ++i) out.push_back(std::pow(10.0, 0.25 * i) * base);
  return out;
}

}  // namespace gradstats

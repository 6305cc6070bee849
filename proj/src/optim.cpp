#include "gradstats/optim.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <numbers>
#include <stdexcept>

namespace gradstats {

OptimizerSpec OptimizerSpec::sgd() {
  OptimizerSpec s;
  s.family = Family::sgd;
  return s;
}

OptimizerSpec OptimizerSpec::sign(SignOrder order, double beta) {
  OptimizerSpec s;
  s.family = Family::sign;
  s.sign_order = order;
  s.beta = beta;
  return s;
}

OptimizerSpec OptimizerSpec::adam(AdamVariant variant, double beta1, double beta2, std::optional<double> eps) {
  OptimizerSpec s;
  s.family = Family::adam;
  s.variant = variant;
  s.beta1 = beta1;
  s.beta2 = beta2;
  s.eps = eps.value_or(variant == AdamVariant::micro_adam_msq ? 1e-6 : 1e-8);
  return s;
}

OptimizerSpec OptimizerSpec::parse(const std::string& name) {
  if (name == "sgd") return sgd();
  if (name == "sign_ema") return sign(SignOrder::sign_ema);
  if (name == "sign_sgd") return sign(SignOrder::sign_sgd);
  if (name == "micro_sign_sgd") return sign(SignOrder::micro_sign_sgd);
  if (name == "adam") return adam(AdamVariant::adam);
  if (name == "micro_adam") return adam(AdamVariant::micro_adam);
  if (name == "micro_adam_var") return adam(AdamVariant::micro_adam_var);
  if (name == "micro_adam_msq") return adam(AdamVariant::micro_adam_msq);
  throw std::invalid_argument("unknown optimizer '" + name + "'");
}

std::string OptimizerSpec::name() const {
  switch (family) {
    case Family::sgd: return "sgd";
    case Family::sign:
      switch (sign_order) {
        case SignOrder::sign_ema: return "sign_ema";
        case SignOrder::sign_sgd: return "sign_sgd";
        case SignOrder::micro_sign_sgd: return "micro_sign_sgd";
      }
      break;
    case Family::adam:
      switch (variant) {
        case AdamVariant::adam: return "adam";
        case AdamVariant::micro_adam: return "micro_adam";
        case AdamVariant::micro_adam_var: return "micro_adam_var";
        case AdamVariant::micro_adam_msq: return "micro_adam_msq";
      }
      break;
  }
  return "?";
}

void OptimizerSpec::validate() const {
  auto decay = [](double b, const char* what) {
    if (!(b >= 0.0 && b < 1.0)) throw std::invalid_argument(std::string(what) + " must lie in [0, 1)");
  };
  decay(beta, "beta");
  decay(beta1, "beta1");
  decay(beta2, "beta2");
  if (!(eps > 0.0)) throw std::invalid_argument("eps must be positive");
  if (clip_threshold && !(*clip_threshold > 0.0)) throw std::invalid_argument("clip threshold must be positive");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight decay must be non-negative");
}

bool OptimizerSpec::needs_mean_square() const {
  return family == Family::adam && variant != AdamVariant::adam;
}

bool OptimizerSpec::needs_mean_sign() const {
  return family == Family::sign && sign_order == SignOrder::micro_sign_sgd;
}

OptimizerState init_state(std::span<const Shape> shapes) {
  OptimizerState s;
  for (const auto& shape : shapes) {
    s.mu.emplace_back(shape);
    s.nu.emplace_back(shape);
  }
  return s;
}

namespace {

void check_sizes(const OptimizerState& state, const std::vector<Tensor>& xs, const char* what) {
  if (xs.size() != state.mu.size()) {
    throw std::invalid_argument(std::string(what) + ": expected " + std::to_string(state.mu.size()) + " tensors");
  }
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (xs[i].shape() != state.mu[i].shape()) {
      throw ShapeError(std::string(what) + ": shape " + shape_to_string(xs[i].shape()) + " does not match state " +
                       shape_to_string(state.mu[i].shape()));
    }
  }
}

}  // namespace

StepResult adam_family_step(const OptimizerSpec& spec, const OptimizerState& state, const StepStats& stats) {
  if (spec.family != Family::adam) throw std::invalid_argument("adam_family_step: not an Adam-family spec");
  check_sizes(state, stats.mean_grad, "mean_grad");
  check_sizes(state, stats.nu_batch, "nu_batch");
  StepResult r{state, {}};
  r.state.t = state.t + 1;
  const double t = static_cast<double>(r.state.t);
  const double c1 = 1.0 - std::pow(spec.beta1, t);
  const double c2 = 1.0 - std::pow(spec.beta2, t);
  const bool relu = spec.variant == AdamVariant::micro_adam_msq;
  for (std::size_t i = 0; i < state.mu.size(); ++i) {
    auto mu = r.state.mu[i].array();
    auto nu = r.state.nu[i].array();
    mu = spec.beta1 * mu + (1.0 - spec.beta1) * stats.mean_grad[i].array();
    nu = spec.beta2 * nu + (1.0 - spec.beta2) * stats.nu_batch[i].array();
    Tensor u(state.mu[i].shape());
    for (std::size_t k = 0; k < u.size(); ++k) {
      const double m_hat = r.state.mu[i][k] / c1;
      double v_hat = r.state.nu[i][k] / c2;
      if (relu) v_hat = std::max(0.0, v_hat);
      const double denom = spec.eps + v_hat;
      if (denom < 0.0) throw std::domain_error("negative second-moment estimate reached the square root");
      u[k] = m_hat / std::sqrt(denom);
    }
    r.update.push_back(std::move(u));
  }
  return r;
}

StepResult sign_family_step(const OptimizerSpec& spec, const OptimizerState& state, const StepStats& stats) {
  if (spec.family != Family::sign) throw std::invalid_argument("sign_family_step: not a sign-family spec");
  const bool micro = spec.sign_order == SignOrder::micro_sign_sgd;
  if (micro && stats.mean_sign.empty()) throw std::invalid_argument("micro_sign_sgd needs mean_sign");
  const auto& input = micro ? stats.mean_sign : stats.mean_grad;
  check_sizes(state, input, micro ? "mean_sign" : "mean_grad");
  StepResult r{state, {}};
  r.state.t = state.t + 1;
  const double c = 1.0 - std::pow(spec.beta, static_cast<double>(r.state.t));
  for (std::size_t i = 0; i < state.mu.size(); ++i) {
    const Tensor x = spec.sign_order == SignOrder::sign_sgd ? sign(input[i]) : input[i];
    r.state.mu[i].array() = spec.beta * r.state.mu[i].array() + (1.0 - spec.beta) * x.array();
    Tensor u = r.state.mu[i] / c;
    if (spec.sign_order == SignOrder::sign_ema) u = sign(u);
    r.update.push_back(std::move(u));
  }
  return r;
}

StepResult optimizer_step(const OptimizerSpec& spec, const OptimizerState& state, const StepStats& stats) {
  switch (spec.family) {
    case Family::adam: return adam_family_step(spec, state, stats);
    case Family::sign: return sign_family_step(spec, state, stats);
    case Family::sgd: {
      check_sizes(state, stats.mean_grad, "mean_grad");
      StepResult r{state, stats.mean_grad};
      r.state.t = state.t + 1;
      return r;
    }
  }
  throw std::logic_error("unreachable");
}

double clip_factor(std::span<const Tensor> grads, double threshold) {
  if (!(threshold > 0.0)) throw std::invalid_argument("clip threshold must be positive");
  const double norm = global_norm(grads);
  if (norm > threshold) return threshold / norm;
  return 1.0;
}

std::vector<Tensor> clip_global_norm(std::span<const Tensor> grads, double threshold) {
  const double f = clip_factor(grads, threshold);
  std::vector<Tensor> out(grads.begin(), grads.end());
  if (f == 1.0) return out;
  for (auto& g : out) g.array() *= f;
  return out;
}

double schedule_value(const Schedule& s, std::uint64_t t) {
  if (t > s.total_steps) throw std::out_of_range("schedule step beyond total_steps");
  if (s.warmup_steps > s.total_steps) throw std::invalid_argument("warmup longer than the schedule");
  if (t <= s.warmup_steps) {
    if (s.warmup_steps == 0) return s.total_steps == 0 ? 0.0 : s.peak;
    return s.peak * static_cast<double>(t) / static_cast<double>(s.warmup_steps);
  }
  const double x = static_cast<double>(t - s.warmup_steps) / static_cast<double>(s.total_steps - s.warmup_steps);
  return s.peak * 0.5 * (1.0 + std::cos(std::numbers::pi * x));
}

void apply_update(std::span<Tensor> params, std::span<const Tensor> update, double lr, double weight_decay) {
  if (params.size() != update.size()) throw std::invalid_argument("apply_update: size mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != update[i].shape()) throw ShapeError("apply_update: shape mismatch");
    auto p = params[i].array();
    p = p - lr * update[i].array() - weight_decay * p;
  }
}

namespace {

constexpr int kCheckpointVersion = 1;

std::string hex(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", x);
  return buf;
}

double unhex(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') throw std::invalid_argument("bad float in checkpoint: " + s);
  return v;
}

nlohmann::json tensors_to_json(const std::vector<Tensor>& ts) {
  auto arr = nlohmann::json::array();
  for (const auto& t : ts) {
    nlohmann::json j;
    j["shape"] = t.shape();
    auto& data = j["data"] = nlohmann::json::array();
    for (double x : t.data()) data.push_back(hex(x));
    arr.push_back(std::move(j));
  }
  return arr;
}

std::vector<Tensor> tensors_from_json(const nlohmann::json& arr) {
  std::vector<Tensor> out;
  for (const auto& j : arr) {
    std::vector<double> data;
    for (const auto& s : j.at("data")) data.push_back(unhex(s.get<std::string>()));
    out.emplace_back(j.at("shape").get<Shape>(), std::move(data));
  }
  return out;
}

}  // namespace

std::string save_checkpoint(const OptimizerSpec& spec, const OptimizerState& state) {
  nlohmann::json j;
  j["version"] = kCheckpointVersion;
  j["optimizer"] = {{"name", spec.name()},
                    {"beta", hex(spec.beta)},
                    {"beta1", hex(spec.beta1)},
                    {"beta2", hex(spec.beta2)},
                    {"eps", hex(spec.eps)},
                    {"weight_decay", hex(spec.weight_decay)}};
  if (spec.clip_threshold) j["optimizer"]["clip"] = hex(*spec.clip_threshold);
  j["t"] = state.t;
  j["mu"] = tensors_to_json(state.mu);
  j["nu"] = tensors_to_json(state.nu);
  return j.dump(1);
}

OptimizerState load_checkpoint(const std::string& text, OptimizerSpec* spec) {
  const auto j = nlohmann::json::parse(text);
  if (j.at("version").get<int>() != kCheckpointVersion) {
    throw std::invalid_argument("unsupported checkpoint version " + j.at("version").dump());
  }
  if (spec) {
    const auto& o = j.at("optimizer");
    *spec = OptimizerSpec::parse(o.at("name").get<std::string>());
    spec->beta = unhex(o.at("beta").get<std::string>());
    spec->beta1 = unhex(o.at("beta1").get<std::string>());
    spec->beta2 = unhex(o.at("beta2").get<std::string>());
    spec->eps = unhex(o.at("eps").get<std::string>());
    spec->weight_decay = unhex(o.at("weight_decay").get<std::string>());
    if (o.contains("clip")) spec->clip_threshold = unhex(o.at("clip").get<std::string>());
  }
  OptimizerState s;
  s.t = j.at("t").get<std::uint64_t>();
  s.mu = tensors_from_json(j.at("mu"));
  s.nu = tensors_from_json(j.at("nu"));
  return s;
}

}  // namespace gradstats

// Command-line driver: training runs, batch-size sweeps, verification suites
// and the small analytic calculators.

#include "gradstats/autodiff.hpp"
#include "gradstats/harness.hpp"
#include "gradstats/random.hpp"
#include "gradstats/stats.hpp"
#include "gradstats/surgery.hpp"
#include "gradstats/verify.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using namespace gradstats;

namespace {

constexpr int kOk = 0;
constexpr int kCheckFailed = 1;
constexpr int kUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
  bool json = false;
  bool force = false;
};

void prepare_out_dir(const std::string& out, bool force) {
  const fs::path dir(out);
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw UsageError(out + " exists and is not a directory");
    if (!fs::is_empty(dir) && !force) throw UsageError(out + " is not empty; pass --force to overwrite");
  }
  fs::create_directories(dir);
}

TrainConfig config_of(const Common& c) {
  if (c.config.empty()) throw UsageError("--config is required");
  TrainConfig cfg;
  try {
    cfg = load_config(c.config);
  } catch (const std::exception& e) {
    throw UsageError(std::string("bad config: ") + e.what());
  }
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

std::string fixed6(double x) {
  if (std::isinf(x)) return format_number(x);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", x);
  return buf;
}

int cmd_train(const Common& c) {
  const TrainConfig cfg = config_of(c);
  if (c.out.empty()) throw UsageError("--out is required");
  prepare_out_dir(c.out, c.force);
  const RunRecord run = run_training(cfg, threads_from_env());
  write_run(c.out, run);
  if (c.json) {
    std::cout << summary_json(run).dump(2) << "\n";
  } else {
    std::cout << "steps " << run.summary.steps_completed << "/" << run.summary.total_steps << "  final eval loss "
              << format_number(run.summary.final_eval_loss) << (run.summary.unstable ? "  UNSTABLE" : "") << "\n";
  }
  return run.summary.unstable ? kCheckFailed : kOk;
}

int cmd_sweep(const Common& c, const std::vector<std::size_t>& batches, const std::string& rule_text, bool grid) {
  TrainConfig base = config_of(c);
  if (c.out.empty()) throw UsageError("--out is required");
  if (batches.size() < 2) throw UsageError("--batches needs at least two sizes");
  ScalingRule rule;
  try {
    rule = parse_rule(rule_text);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  prepare_out_dir(c.out, c.force);
  const std::vector<double> lrs = grid ? lr_grid(base.lr) : std::vector<double>{base.lr};
  nlohmann::json report = nlohmann::json::array();
  bool flagged = false;
  for (std::size_t i = 0; i < lrs.size(); ++i) {
    base.lr = lrs[i];
    const SweepResult sweep = batch_size_sweep(base, batches, rule, c.jobs, threads_from_env());
    const fs::path dir = grid ? fs::path(c.out) / ("lr_" + std::to_string(i)) : fs::path(c.out);
    write_sweep(dir, sweep);
    flagged = flagged || sweep.flagged;
    report.push_back({{"lr", lrs[i]}, {"normalized_gap", format_number(sweep.gap)}, {"flagged", sweep.flagged}});
    if (!c.json) {
      std::cout << "lr " << format_number(lrs[i]) << "  rule " << to_string(rule) << "  normalized gap "
                << fixed6(sweep.gap) << (sweep.flagged ? "  (unstable member)" : "") << "\n";
    }
  }
  if (c.json) std::cout << report.dump(2) << "\n";
  return flagged ? kCheckFailed : kOk;
}

void print_sites(const std::string& title, const Model& m, const GradStatistic& stat) {
  const Graph grad = grad_graph(m.loss, m.params);
  std::cout << title << "\n";
  std::cout << "  parameter  shape_class     rewrite (" << stat.name() << ")\n";
  for (const auto& s : collect_reduce_sites(grad)) {
    std::printf("  %-10s %-15s %s\n", m.loss.input(s.parameter)->name.c_str(), to_string(s.shape_class).c_str(),
                rewrite_name(s, stat).c_str());
  }
}

int cmd_verify(const Common& c, const std::string& scope, std::size_t trials, const std::string& fault) {
  if (trials == 0) throw UsageError("--trials must be at least 1");
  if (scope != "surgery" && scope != "autodiff" && scope != "estimators" && scope != "all") {
    throw UsageError("--scope must be surgery, autodiff, estimators or all");
  }
  const std::uint64_t seed = c.seed.value_or(0);
  if (!fault.empty()) testing::set_vjp_fault(fault);

  if (!c.json && (scope == "surgery" || scope == "all")) {
    ModelSpec mlp;
    mlp.widths = {4, 8, 3};
    print_sites("sites: mlp_vector [4,8,3]", build_model(mlp, TaskSpec{}, 4), GradStatistic::mean_square());
    ModelSpec seq;
    seq.kind = ModelSpec::Kind::seq_dense;
    print_sites("sites: seq_dense L=4 D=4 depth=2", build_model(seq, TaskSpec{}, 4), GradStatistic::mean_square());
  }

  const VerifyReport report = run_verify(scope, seed, trials);
  if (c.json) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& k : report.checks) {
      j.push_back({{"check", k.name},
                   {"max_rel_error", k.max_rel_error},
                   {"threshold", k.threshold},
                   {"pass", k.pass},
                   {"failing_seed", k.pass ? nlohmann::json() : nlohmann::json(k.failing_seed)}});
    }
    std::cout << j.dump(2) << "\n";
  } else {
    for (const auto& k : report.checks) {
      std::printf("%s %-44s max_rel_error %.3e (threshold %.0e)", k.pass ? "PASS" : "FAIL", k.name.c_str(),
                  k.max_rel_error, k.threshold);
      if (!k.pass) std::printf("  seed %llu", static_cast<unsigned long long>(k.failing_seed));
      std::printf("\n");
    }
    std::printf("%s\n", report.pass() ? "all checks passed" : "verification FAILED");
  }
  return report.pass() ? kOk : kCheckFailed;
}

int cmd_snr(std::optional<double> p, std::optional<double> r, const std::string& mode, std::uint64_t n,
            std::uint64_t seed) {
  if (p.has_value() == r.has_value()) throw UsageError("give exactly one of --p or --r");
  if (p && !(*p > 0.0 && *p < 1.0)) throw UsageError("--p must lie in (0, 1)");
  if (mode == "exact") {
    const double prob = p ? *p : normal_cdf(*r);
    std::cout << fixed6(sign_snr(prob)) << "\n";
  } else if (mode == "gaussian_small_r") {
    if (!r) throw UsageError("gaussian_small_r needs --r");
    std::cout << fixed6(gaussian_sign_snr_small_r(*r)) << "\n";
  } else if (mode == "monte_carlo") {
    if (n < 200) throw UsageError("--n must be at least 200");
    // Signs in 100 chunks; the spread of the chunk estimates gives the error.
    const CounterRng rng(seed, 700);
    const std::uint64_t chunks = 100, per = n / chunks;
    double sum = 0.0, sum_sq = 0.0;
    std::vector<double> est;
    for (std::uint64_t c = 0; c < chunks; ++c) {
      double s1 = 0.0, s2 = 0.0;
      for (std::uint64_t i = 0; i < per; ++i) {
        const std::uint64_t k = c * per + i;
        const double draw = p ? (rng.uniform(k) < *p ? 1.0 : -1.0) : (rng.normal(k) + *r > 0.0 ? 1.0 : -1.0);
        s1 += draw;
        s2 += draw * draw;
      }
      sum += s1;
      sum_sq += s2;
      const double m = s1 / per;
      est.push_back(std::abs(m) / std::sqrt(std::max(0.0, s2 / per - m * m)));
    }
    const double total = static_cast<double>(chunks * per);
    const double m = sum / total;
    const double snr = std::abs(m) / std::sqrt(sum_sq / total - m * m);
    const double mean_est = std::accumulate(est.begin(), est.end(), 0.0) / chunks;
    double var = 0.0;
    for (double e : est) var += (e - mean_est) * (e - mean_est);
    const double stderr_ = std::sqrt(var / (chunks - 1)) / std::sqrt(static_cast<double>(chunks));
    std::cout << fixed6(snr) << " stderr " << fixed6(stderr_) << "\n";
  } else {
    throw UsageError("--mode must be exact, gaussian_small_r or monte_carlo");
  }
  return kOk;
}

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
  return out;
}

int cmd_moments(const std::string& grads, std::optional<double> nu_adam, std::optional<double> nu_micro,
                std::optional<std::size_t> batch, const std::string& kind_text, bool json) {
  std::size_t b;
  double na, nm;
  if (!grads.empty()) {
    const auto g = parse_list(grads);
    b = g.size();
    double mean = 0.0, msq = 0.0;
    for (double x : g) {
      mean += x;
      msq += x * x;
    }
    mean /= b;
    na = mean * mean;
    nm = msq / b;
  } else {
    if (!nu_adam || !nu_micro || !batch) throw UsageError("give --grads, or all of --nu-adam --nu-micro --batch");
    na = *nu_adam;
    nm = *nu_micro;
    b = *batch;
  }
  if (b < 2) throw UsageError("the estimators need a batch of at least 2");
  if (kind_text != "adam" && kind_text != "micro") throw UsageError("--kind must be adam or micro");
  const auto m = estimate_moments(Tensor::scalar(na), Tensor::scalar(nm), b,
                                  kind_text == "adam" ? Preconditioner::adam : Preconditioner::micro);
  if (json) {
    nlohmann::json j{{"batch", b},
                     {"nu_adam", na},
                     {"nu_micro", nm},
                     {"mu_sq", m.mu_sq.item()},
                     {"sigma_sq", m.sigma_sq.item()},
                     {"sigma_sq_eff", m.sigma_sq_eff.item()},
                     {"ratio", format_number(m.ratio.item())}};
    std::cout << j.dump(2) << "\n";
  } else {
    std::cout << "mu_sq " << format_number(m.mu_sq.item()) << "\nsigma_sq " << format_number(m.sigma_sq.item())
              << "\nsigma_sq_eff " << format_number(m.sigma_sq_eff.item()) << "\nratio "
              << format_number(m.ratio.item()) << "\n";
  }
  return kOk;
}

int cmd_cost(const Common& c, const std::string& stat_text, std::optional<std::size_t> batch) {
  TrainConfig cfg = config_of(c);
  if (batch) cfg.batch_size = *batch;
  GradStatistic stat = GradStatistic::mean();
  try {
    stat = GradStatistic::parse(stat_text);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  const Model m = build_model(cfg.model, cfg.task, cfg.batch_size);
  const Graph grad = grad_graph(m.loss, m.params);
  const CostReport mean = cost_report(inject_statistic(grad, GradStatistic::mean()));
  const CostReport other = cost_report(inject_statistic(grad, stat));
  const CostReport oracle = cost_report(per_example_gradient_graph(grad));
  const double ratio = static_cast<double>(other.peak_live_values) / static_cast<double>(mean.peak_live_values);
  if (c.json) {
    auto row = [](const CostReport& r) {
      return nlohmann::json{{"total_flops", r.total_flops}, {"peak_live_values", r.peak_live_values}};
    };
    nlohmann::json j{{"batch_size", cfg.batch_size},
                     {"param_count", m.param_count},
                     {"statistic", stat.name()},
                     {"mean", row(mean)},
                     {"statistic_cost", row(other)},
                     {"per_example_oracle", row(oracle)},
                     {"peak_ratio", ratio}};
    std::cout << j.dump(2) << "\n";
  } else {
    std::printf("batch %zu, %zu parameters\n", cfg.batch_size, m.param_count);
    std::printf("%-22s %14s %14s\n", "graph", "flops", "peak_values");
    std::printf("%-22s %14llu %14llu\n", "mean", static_cast<unsigned long long>(mean.total_flops),
                static_cast<unsigned long long>(mean.peak_live_values));
    std::printf("%-22s %14llu %14llu\n", stat.name().c_str(), static_cast<unsigned long long>(other.total_flops),
                static_cast<unsigned long long>(other.peak_live_values));
    std::printf("%-22s %14llu %14llu\n", "per_example_oracle", static_cast<unsigned long long>(oracle.total_flops),
                static_cast<unsigned long long>(oracle.peak_live_values));
    std::printf("peak ratio %s/mean: %.4f\n", stat.name().c_str(), ratio);
  }
  return kOk;
}

void add_common(CLI::App* app, Common& c, bool needs_out) {
  app->add_option("--config", c.config, "JSON run configuration");
  if (needs_out) app->add_option("--out", c.out, "output directory");
  app->add_option("--seed", c.seed, "seed override");
  app->add_option("--jobs", c.jobs, "parallel runs")->check(CLI::PositiveNumber);
  app->add_flag("--json", c.json, "machine-readable output");
  app->add_flag("--force", c.force, "write into a non-empty output directory");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gradstats: per-example gradient statistics through graph surgery"};
  app.require_subcommand(1);
  Common common;

  auto* train = app.add_subcommand("train", "train one configuration");
  add_common(train, common, true);

  auto* sweep = app.add_subcommand("sweep", "batch-size sweep under a learning-rate scaling rule");
  add_common(sweep, common, true);
  std::vector<std::size_t> batches{4, 8, 16};
  std::string rule = "sqrt";
  bool grid = false;
  sweep->add_option("--batches", batches, "batch sizes")->delimiter(',');
  sweep->add_option("--rule", rule, "sqrt or linear");
  sweep->add_flag("--lr-grid", grid, "repeat over the learning-rate grid around the configured lr");

  auto* verify = app.add_subcommand("verify", "randomized oracle, gradient and estimator checks");
  add_common(verify, common, false);
  std::string scope = "all";
  std::size_t trials = 20;
  std::string fault;
  verify->add_option("--scope", scope, "surgery, autodiff, estimators or all");
  verify->add_option("--trials", trials, "randomized trials per check");
  verify->add_option("--inject-fault", fault, "negate the VJP of this primitive");

  auto* snr = app.add_subcommand("snr", "signal-to-noise ratio of the sign");
  std::optional<double> p, r;
  std::string mode = "exact";
  std::uint64_t n = 1000000, snr_seed = 0;
  snr->add_option("--p", p, "probability that X > 0");
  snr->add_option("--r", r, "mean of a unit-variance Gaussian");
  snr->add_option("--mode", mode, "exact, gaussian_small_r or monte_carlo");
  snr->add_option("--n", n, "Monte-Carlo sample count");
  snr->add_option("--seed", snr_seed, "Monte-Carlo seed");

  auto* moments = app.add_subcommand("moments", "mean-square and variance estimates from one batch");
  std::string grads, kind = "adam";
  std::optional<double> nu_adam, nu_micro;
  std::optional<std::size_t> mbatch;
  bool mjson = false;
  moments->add_option("--grads", grads, "comma-separated per-example gradients of one coordinate");
  moments->add_option("--nu-adam", nu_adam, "squared batch mean");
  moments->add_option("--nu-micro", nu_micro, "batch mean of squares");
  moments->add_option("--batch", mbatch, "batch size");
  moments->add_option("--kind", kind, "adam or micro (sets sigma_sq_eff)");
  moments->add_flag("--json", mjson, "machine-readable output");

  auto* cost = app.add_subcommand("cost", "cost model of the statistic graph against the mean");
  add_common(cost, common, false);
  std::string stat = "mean_square";
  std::optional<std::size_t> cbatch;
  cost->add_option("--stat", stat, "mean, mean_square, mean_sign or mean_abs_pow:<alpha>");
  cost->add_option("--batch", cbatch, "batch size override");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*train) return cmd_train(common);
    if (*sweep) return cmd_sweep(common, batches, rule, grid);
    if (*verify) return cmd_verify(common, scope, trials, fault);
    if (*snr) return cmd_snr(p, r, mode, n, snr_seed);
    if (*moments) return cmd_moments(grads, nu_adam, nu_micro, mbatch, kind, mjson);
    if (*cost) return cmd_cost(common, stat, cbatch);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kCheckFailed;
  }
  return kUsage;
}

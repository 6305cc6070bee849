#ifndef GRADSTATS_HARNESS_HPP
#define GRADSTATS_HARNESS_HPP

#include "gradstats/graph.hpp"
#include "gradstats/optim.hpp"
#include "gradstats/stats.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace gradstats {

enum class Activation { tanh, gelu };
enum class LossKind { mse, softmax_cross_entropy };

struct ModelSpec {
  enum class Kind { mlp_vector, seq_dense };
  Kind kind = Kind::mlp_vector;
  std::vector<std::size_t> widths{4, 16, 2};
  Activation activation = Activation::tanh;
  bool biases = true;
  std::size_t length = 4;  // seq_dense
  std::size_t width = 4;
  std::size_t depth = 2;
  LossKind loss = LossKind::mse;
};

struct TaskSpec {
  enum class Kind { teacher_student, noisy_quadratic };
  Kind kind = Kind::teacher_student;
  std::uint64_t teacher_seed = 1;
  double label_noise = 0.1;
  // noisy_quadratic
  std::size_t dim = 32;
  double mu_g = 0.0;
  double sigma_g = 1.0;
  double h_min = 0.5;
  double h_max = 2.0;
  double d0 = 1.0;
};

enum class ScalingRule { sqrt, linear };

struct TrainConfig {
  ModelSpec model;
  TaskSpec task;
  OptimizerSpec optimizer;
  std::size_t batch_size = 16;
  std::size_t reference_batch = 16;
  double lr = 1e-3;  // peak learning rate at the reference batch
  ScalingRule rule = ScalingRule::sqrt;
  double warmup_base = 20.0;  // warmup steps at the reference batch
  double chinchilla_c = 20.0;
  std::optional<std::uint64_t> steps;
  std::optional<std::uint64_t> samples;  // K = samples / B
  double weight_decay_numerator = 0.0;
  std::uint64_t log_every = 10;
  std::uint64_t seed = 0;
  std::size_t eval_examples = 512;
  bool diagnostics = false;
  bool verify_first_step = false;

  static TrainConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

TrainConfig load_config(const std::filesystem::path& path);

/// Desk-scale model: the summed loss graph plus its parameters.
struct Model {
  Graph loss;
  std::vector<VarId> params;
  std::vector<std::string> names;
  std::size_t param_count = 0;
  std::size_t tokens_per_example = 1;
};

Model build_model(const ModelSpec& model, const TaskSpec& task, std::size_t batch);

/// K = floor(c P / (L B)). Throws when K is 0.
std::uint64_t chinchilla_steps(double params, double batch, double tokens, double c);

/// Synthetic data for a task; every draw is addressed by example index.
class TaskData {
 public:
  TaskData(const TrainConfig& cfg, const Model& model);

  /// Data bindings for examples [first, first + count) of a split.
  Bindings batch(const Model& model, std::uint64_t first, std::size_t count, bool held_out) const;
  std::vector<Tensor> initial_params() const;

 private:
  Tensor teacher_forward(const Tensor& x) const;

  TrainConfig cfg_;
  std::vector<Shape> shapes_;
  std::vector<Tensor> teacher_;
  Tensor curvature_;
  Tensor optimum_;
};

struct MetricsRow {
  std::uint64_t step = 0;
  std::uint64_t samples = 0;
  double train_loss = 0.0;
  double eval_loss = 0.0;
  double lr = 0.0;
  double update_norm = 0.0;
  std::string flags;
};

struct MomentsRow {
  std::uint64_t step = 0;
  LayerRatio ratio;
};

struct RunSummary {
  std::uint64_t total_steps = 0;
  std::uint64_t steps_completed = 0;
  double final_train_loss = 0.0;
  double final_eval_loss = 0.0;
  bool unstable = false;
  std::optional<std::uint64_t> unstable_step;
  double peak_lr = 0.0;
  std::uint64_t warmup_steps = 0;
  double weight_decay = 0.0;
  std::size_t param_count = 0;
  std::uint64_t musq_entries = 0;
  std::uint64_t musq_negative = 0;
  std::uint64_t nu_hat_entries = 0;
  std::uint64_t nu_hat_negative = 0;
  std::optional<double> verify_max_rel_error;
  double wall_time_s = 0.0;

  double musq_negative_fraction() const;
  double nu_hat_negative_fraction() const;
};

struct RunRecord {
  TrainConfig config;
  std::vector<MetricsRow> rows;
  std::vector<std::string> layers;
  std::vector<std::vector<MomentsRow>> moments;  // per layer
  RunSummary summary;
};

/// Worker threads for within-step fan-out, from GRADSTATS_THREADS (default 1).
std::size_t threads_from_env();

RunRecord run_training(const TrainConfig& cfg, std::size_t threads = 1);

std::string metrics_csv(const RunRecord& run);
std::string moments_csv(const std::vector<MomentsRow>& rows);
nlohmann::json summary_json(const RunRecord& run);
void write_run(const std::filesystem::path& dir, const RunRecord& run);

struct Curve {
  std::vector<double> samples;
  std::vector<double> loss;
};

Curve eval_curve(const RunRecord& run);

/// Largest pairwise gap between curves on a shared samples grid, divided by
/// the loss range of the reference curve.
double normalized_gap(std::span<const Curve> curves, std::size_t reference, std::size_t grid_points = 200);

struct SweepResult {
  std::vector<RunRecord> runs;
  std::size_t reference = 0;
  double gap = 0.0;
  bool flagged = false;
};

TrainConfig sweep_member(const TrainConfig& base, std::size_t batch, ScalingRule rule);

SweepResult batch_size_sweep(const TrainConfig& base, std::span<const std::size_t> batches, ScalingRule rule,
                             std::size_t jobs = 1, std::size_t threads = 1);

void write_sweep(const std::filesystem::path& dir, const SweepResult& sweep);

/// {10^(i/4) * base : -6 <= i <= 1}
std::vector<double> lr_grid(double base);

std::string to_string(ScalingRule rule);
ScalingRule parse_rule(const std::string& text);

}  // namespace gradstats

#endif  // GRADSTATS_HARNESS_HPP

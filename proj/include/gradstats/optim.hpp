#ifndef GRADSTATS_OPTIM_HPP
#define GRADSTATS_OPTIM_HPP

#include "gradstats/tensor.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace gradstats {

enum class Family { sgd, sign, adam };
enum class SignOrder { sign_ema, sign_sgd, micro_sign_sgd };
enum class AdamVariant { adam, micro_adam, micro_adam_var, micro_adam_msq };

struct OptimizerSpec {
  Family family = Family::adam;
  SignOrder sign_order = SignOrder::sign_ema;
  AdamVariant variant = AdamVariant::adam;
  double beta = 0.9;  // sign family EMA decay
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  std::optional<double> clip_threshold;
  double weight_decay = 0.0;

  static OptimizerSpec sgd();
  static OptimizerSpec sign(SignOrder order, double beta = 0.9);
  /// MicroAdamMSQ defaults to eps = 1e-6, the others to 1e-8.
  static OptimizerSpec adam(AdamVariant variant, double beta1 = 0.9, double beta2 = 0.95,
                            std::optional<double> eps = {});

  /// "sgd", "sign_ema", "sign_sgd", "micro_sign_sgd", "adam", "micro_adam",
  /// "micro_adam_var", "micro_adam_msq".
  static OptimizerSpec parse(const std::string& name);
  std::string name() const;

  void validate() const;

  /// Whether the step consumes the per-example mean square.
  bool needs_mean_square() const;
  bool needs_mean_sign() const;
};

struct OptimizerState {
  std::vector<Tensor> mu;
  std::vector<Tensor> nu;
  std::uint64_t t = 0;

  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

OptimizerState init_state(std::span<const Shape> shapes);

/// Per-step inputs. `nu_batch` is the preconditioner input already reduced by
/// the caller; `mean_sign` is (1/B) sum_i sign(g_i).
struct StepStats {
  std::vector<Tensor> mean_grad;
  std::vector<Tensor> nu_batch;
  std::vector<Tensor> mean_sign;
};

struct StepResult {
  OptimizerState state;
  std::vector<Tensor> update;
};

StepResult adam_family_step(const OptimizerSpec& spec, const OptimizerState& state, const StepStats& stats);
StepResult sign_family_step(const OptimizerSpec& spec, const OptimizerState& state, const StepStats& stats);
StepResult optimizer_step(const OptimizerSpec& spec, const OptimizerState& state, const StepStats& stats);

/// Scale factor min(1, threshold/||g||) with ||g|| taken over all tensors.
double clip_factor(std::span<const Tensor> grads, double threshold);
std::vector<Tensor> clip_global_norm(std::span<const Tensor> grads, double threshold);

struct Schedule {
  double peak = 0.0;
  std::uint64_t warmup_steps = 0;
  std::uint64_t total_steps = 0;
};

/// Linear warmup from 0 to peak, then a cosine half period down to 0.
double schedule_value(const Schedule& s, std::uint64_t t);

/// theta <- theta - lr*u - weight_decay*theta
void apply_update(std::span<Tensor> params, std::span<const Tensor> update, double lr, double weight_decay);

/// JSON with hexadecimal floats, so a round trip is exact.
std::string save_checkpoint(const OptimizerSpec& spec, const OptimizerState& state);
OptimizerState load_checkpoint(const std::string& text, OptimizerSpec* spec = nullptr);

}  // namespace gradstats

#endif  // GRADSTATS_OPTIM_HPP

#include "gradstats/optim.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace gradstats;

namespace {

OptimizerState scalar_state() {
  const std::vector<Shape> shapes{Shape{}};
  return init_state(shapes);
}

StepStats scalar_stats(double g, double nu) { return {{Tensor::scalar(g)}, {Tensor::scalar(nu)}, {}}; }

}  // namespace

TEST(Adam, OneStepHandExpansion) {
  const auto spec = OptimizerSpec::adam(AdamVariant::adam, 0.9, 0.95, 1e-8);
  const StepResult r = adam_family_step(spec, scalar_state(), scalar_stats(1.0, 1.0));
  EXPECT_EQ(r.state.t, 1u);
  EXPECT_NEAR(r.update[0].item(), 1.0 / std::sqrt(1.0 + 1e-8), 1e-15);
  std::vector<Tensor> theta{Tensor::scalar(0.0)};
  apply_update(theta, r.update, 0.1, 0.0);
  EXPECT_NEAR(theta[0].item(), -0.1, 1e-9);
}

TEST(Adam, FirstStepBiasCorrectionRecoversGradient) {
  for (double beta1 : {0.0, 0.5, 0.9, 0.999}) {
    const auto spec = OptimizerSpec::adam(AdamVariant::adam, beta1, 0.95, 1e-8);
    const StepResult r = adam_family_step(spec, scalar_state(), scalar_stats(0.37, 0.0));
    // u = mu_hat / sqrt(eps) with nu = 0, so mu_hat = u * sqrt(eps).
    EXPECT_NEAR(r.update[0].item() * std::sqrt(1e-8), 0.37, 1e-15);
  }
}

TEST(Adam, MsqNegativeEstimateIsFloored) {
  const auto spec = OptimizerSpec::adam(AdamVariant::micro_adam_msq);
  EXPECT_EQ(spec.eps, 1e-6);
  const StepResult r = adam_family_step(spec, scalar_state(), scalar_stats(1.0, -0.5));
  EXPECT_TRUE(std::isfinite(r.update[0].item()));
  EXPECT_NEAR(r.update[0].item(), 1.0 / std::sqrt(1e-6), 1e-6);
  // The raw state keeps the negative value; only the use is filtered.
  EXPECT_LT(r.state.nu[0].item(), 0.0);
}

TEST(Adam, PlainAdamRejectsNegativeDenominator) {
  const auto spec = OptimizerSpec::adam(AdamVariant::adam);
  EXPECT_THROW(adam_family_step(spec, scalar_state(), scalar_stats(1.0, -0.5)), std::domain_error);
}

TEST(Adam, ScaleInvariance) {
  const auto spec = OptimizerSpec::adam(AdamVariant::adam);
  OptimizerState a = scalar_state(), b = scalar_state();
  for (int t = 0; t < 20; ++t) {
    const double g = std::sin(0.7 * t) + 0.2;
    auto ra = adam_family_step(spec, a, scalar_stats(g, g * g));
    auto rb = adam_family_step(spec, b, scalar_stats(100.0 * g, 1e4 * g * g));
    EXPECT_NEAR(ra.update[0].item(), rb.update[0].item(), 1e-6 * std::abs(ra.update[0].item()) + 1e-6);
    a = ra.state;
    b = rb.state;
  }
}

TEST(Sign, EmaOfNegativeStream) {
  const auto spec = OptimizerSpec::sign(SignOrder::sign_ema);
  OptimizerState s = scalar_state();
  for (int t = 0; t < 5; ++t) {
    auto r = sign_family_step(spec, s, scalar_stats(-3.0, 0.0));
    EXPECT_EQ(r.update[0].item(), -1.0);
    s = r.state;
  }
}

TEST(Sign, SignSgdFirstStep) {
  const auto spec = OptimizerSpec::sign(SignOrder::sign_sgd);
  const std::vector<Shape> shapes{Shape{2}};
  const StepStats stats{{Tensor({2}, {0.2, -0.1})}, {}, {}};
  EXPECT_EQ(sign_family_step(spec, init_state(shapes), stats).update[0], Tensor({2}, {1, -1}));
}

TEST(Sign, MicroSignCancellingExamples) {
  const auto spec = OptimizerSpec::sign(SignOrder::micro_sign_sgd);
  // Per-example gradients {+1, -3}: mean sign 0.
  const StepStats stats{{Tensor::scalar(-1.0)}, {}, {Tensor::scalar(0.0)}};
  EXPECT_EQ(sign_family_step(spec, scalar_state(), stats).update[0].item(), 0.0);
}

TEST(Clip, Examples) {
  const std::vector<Tensor> g{Tensor({2}, {0.012, 0.016})};
  const auto halved = clip_global_norm(g, 0.01);
  EXPECT_NEAR(halved[0][0], 0.006, 1e-15);
  EXPECT_NEAR(halved[0][1], 0.008, 1e-15);
  EXPECT_EQ(clip_global_norm(g, 1.0)[0], g[0]);
  const std::vector<Tensor> zero{Tensor({3})};
  EXPECT_EQ(clip_global_norm(zero, 0.01)[0], zero[0]);
}

TEST(Schedule, Examples) {
  const Schedule s{2.0, 10, 110};
  EXPECT_EQ(schedule_value(s, 0), 0.0);
  EXPECT_EQ(schedule_value(s, 10), 2.0);
  EXPECT_NEAR(schedule_value(s, 60), 1.0, 1e-15);
  EXPECT_NEAR(schedule_value(s, 110), 0.0, 1e-15);
}

TEST(Checkpoint, RoundTripIsExact) {
  const auto spec = OptimizerSpec::adam(AdamVariant::micro_adam, 0.8, 0.99, 1e-7);
  const std::vector<Shape> shapes{Shape{2, 2}, Shape{}};
  OptimizerState s = init_state(shapes);
  const StepStats stats{{Tensor({2, 2}, {0.1, -1.0 / 3.0, 1e-300, 7}), Tensor::scalar(M_PI)},
                        {Tensor({2, 2}, {1, 2, 3, 4}), Tensor::scalar(1e-20)},
                        {}};
  s = adam_family_step(spec, s, stats).state;
  OptimizerSpec loaded_spec;
  const OptimizerState back = load_checkpoint(save_checkpoint(spec, s), &loaded_spec);
  EXPECT_EQ(back, s);
  EXPECT_EQ(loaded_spec.name(), spec.name());
  EXPECT_EQ(loaded_spec.beta2, spec.beta2);
}

TEST(Spec, ValidateAndParse) {
  auto bad = OptimizerSpec::adam(AdamVariant::adam, 1.0);
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  for (const char* n : {"sgd", "sign_ema", "sign_sgd", "micro_sign_sgd", "adam", "micro_adam", "micro_adam_var",
                        "micro_adam_msq"}) {
    EXPECT_EQ(OptimizerSpec::parse(n).name(), n);
  }
}

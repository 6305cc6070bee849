#include "gradstats/harness.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace gradstats;

namespace {

TrainConfig quadratic_config() {
  TrainConfig cfg;
  cfg.task.kind = TaskSpec::Kind::noisy_quadratic;
  cfg.task.sigma_g = 2.0;
  cfg.optimizer = OptimizerSpec::adam(AdamVariant::adam);
  cfg.steps = 50;
  cfg.log_every = 5;
  return cfg;
}

}  // namespace

TEST(Chinchilla, Examples) {
  EXPECT_EQ(chinchilla_steps(1e6, 64, 128, 20), 2441u);
  EXPECT_EQ(chinchilla_steps(64, 20, 64, 20), 1u);
  EXPECT_EQ(chinchilla_steps(1e6, 128, 128, 20), 2441u / 2);
  EXPECT_THROW(chinchilla_steps(1, 64, 128, 20), std::invalid_argument);
}

TEST(Train, RepeatedRunsAreIdentical) {
  TrainConfig cfg;
  cfg.steps = 30;
  cfg.batch_size = 8;
  cfg.diagnostics = true;
  const RunRecord a = run_training(cfg, 1), b = run_training(cfg, 3);
  EXPECT_EQ(metrics_csv(a), metrics_csv(b));
  ASSERT_EQ(a.moments.size(), b.moments.size());
  for (std::size_t k = 0; k < a.moments.size(); ++k) EXPECT_EQ(moments_csv(a.moments[k]), moments_csv(b.moments[k]));
}

TEST(Train, LogsExpectedRows) {
  const RunRecord r = run_training(quadratic_config());
  ASSERT_FALSE(r.rows.empty());
  EXPECT_EQ(r.rows.front().step, 0u);
  EXPECT_EQ(r.rows.back().step, 50u);
  EXPECT_EQ(r.rows.back().samples, 50u * 16u);
  EXPECT_EQ(r.rows.size(), 11u);
  for (const auto& row : r.rows) EXPECT_TRUE(std::isfinite(row.eval_loss));
}

TEST(Train, NoisyQuadraticGradientMoments) {
  // The emitted per-example gradient at theta is h*d + xi with xi ~ N(mu_g, sigma_g).
  TrainConfig cfg = quadratic_config();
  cfg.task.mu_g = 0.25;
  cfg.task.sigma_g = 1.5;
  const Model m = build_model(cfg.model, cfg.task, 1);
  const TaskData data(cfg, m);
  const VarId xi = m.loss.input("xi")->id;
  const Tensor x = data.batch(m, 0, 10000 / cfg.task.dim + 1, false).at(xi);
  double mean = 0.0, sq = 0.0;
  for (double v : x.data()) {
    mean += v;
    sq += v * v;
  }
  mean /= static_cast<double>(x.size());
  const double sd = std::sqrt(sq / static_cast<double>(x.size()) - mean * mean);
  EXPECT_NEAR(mean, 0.25, 0.02 * 1.5);
  EXPECT_NEAR(sd, 1.5, 0.02 * 1.5);
}

TEST(Train, AdamNuConcentratesNearNoiseFloor) {
  // With mu_g = 0 and theta held near the optimum, nu_hat ~ sigma^2 / B.
  TrainConfig cfg = quadratic_config();
  cfg.task.d0 = 0.0;
  cfg.task.sigma_g = 2.0;
  cfg.batch_size = 8;
  cfg.lr = 1e-9;
  cfg.steps = 400;
  const Model m = build_model(cfg.model, cfg.task, cfg.batch_size);
  const TaskData data(cfg, m);
  // Average the batch-mean-square across coordinates and batches directly.
  const VarId xi = m.loss.input("xi")->id;
  double acc = 0.0;
  std::size_t n = 0;
  for (std::uint64_t s = 0; s < 400; ++s) {
    const Tensor x = data.batch(m, s * cfg.batch_size, cfg.batch_size, false).at(xi);
    const Tensor mean = reduce_sum(x, {0}) / static_cast<double>(cfg.batch_size);
    for (double v : mean.data()) {
      acc += v * v;
      ++n;
    }
  }
  const double expected = 4.0 / 8.0;
  EXPECT_NEAR(acc / n, expected, 0.05 * expected);
}

TEST(Sweep, IdenticalBatchGivesZeroGap) {
  const RunRecord r = run_training(quadratic_config());
  const std::vector<Curve> curves{eval_curve(r), eval_curve(r)};
  EXPECT_EQ(normalized_gap(curves, 0), 0.0);
}

TEST(Sweep, MemberScaling) {
  TrainConfig base = quadratic_config();
  base.lr = 1e-3;
  base.weight_decay_numerator = 0.0;
  const TrainConfig s = sweep_member(base, 4, ScalingRule::sqrt);
  const TrainConfig l = sweep_member(base, 4, ScalingRule::linear);
  EXPECT_EQ(s.batch_size, 4u);
  EXPECT_EQ(l.batch_size, 4u);
  const RunRecord rs = run_training(s), rl = run_training(l);
  EXPECT_NEAR(rs.summary.peak_lr, 1e-3 * 0.5, 1e-18);
  EXPECT_NEAR(rl.summary.peak_lr, 1e-3 * 0.25, 1e-18);
}

TEST(Config, JsonRoundTrip) {
  TrainConfig cfg = quadratic_config();
  cfg.optimizer = OptimizerSpec::adam(AdamVariant::micro_adam_msq);
  cfg.optimizer.clip_threshold = 0.01;
  cfg.rule = ScalingRule::linear;
  const TrainConfig back = TrainConfig::from_json(cfg.to_json());
  EXPECT_EQ(back.to_json(), cfg.to_json());
  EXPECT_THROW(TrainConfig::from_json(nlohmann::json{{"bogus", 1}}), std::invalid_argument);
}

TEST(Train, MsqClippedRunStaysFinite) {
  TrainConfig cfg;
  cfg.optimizer = OptimizerSpec::adam(AdamVariant::micro_adam_msq);
  cfg.optimizer.clip_threshold = 1e-2;
  cfg.steps = 200;
  const RunRecord r = run_training(cfg);
  EXPECT_FALSE(r.summary.unstable);
  for (const auto& row : r.rows) EXPECT_TRUE(std::isfinite(row.train_loss));
}

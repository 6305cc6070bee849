#include "gradstats/random.hpp"
#include "gradstats/stats.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace gradstats;

TEST(Moments, WorkedInstance) {
  const auto m = estimate_moments(Tensor::scalar(4.0), Tensor::scalar(5.0), 2);
  EXPECT_EQ(m.sigma_sq.item(), 2.0);
  EXPECT_EQ(m.mu_sq.item(), 3.0);
}

TEST(Moments, IdenticalGradients) {
  const double c = 0.75;
  const auto m = estimate_moments(Tensor::scalar(c * c), Tensor::scalar(c * c), 5);
  EXPECT_EQ(m.sigma_sq.item(), 0.0);
  EXPECT_EQ(m.mu_sq.item(), c * c);
  EXPECT_TRUE(std::isinf(m.ratio.item()));
}

TEST(Moments, SingleExampleRejected) {
  EXPECT_THROW(estimate_moments(Tensor::scalar(1.0), Tensor::scalar(1.0), 1), std::invalid_argument);
}

TEST(Moments, SampleVarianceIdentity) {
  const CounterRng rng(3, 0);
  for (std::size_t b = 2; b <= 12; ++b) {
    std::vector<double> g(b);
    double mean = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
      g[i] = 0.4 + rng.normal(b * 100 + i);
      mean += g[i] / static_cast<double>(b);
      sq += g[i] * g[i] / static_cast<double>(b);
    }
    double var = 0.0;
    for (double x : g) var += (x - mean) * (x - mean) / static_cast<double>(b - 1);
    const auto m = estimate_moments(Tensor::scalar(mean * mean), Tensor::scalar(sq), b);
    EXPECT_NEAR(m.sigma_sq.item(), var, 1e-12 * var);
  }
}

TEST(SignSnr, Examples) {
  EXPECT_EQ(sign_snr(0.5), 0.0);
  EXPECT_NEAR(sign_snr(0.75), 1.0 / std::sqrt(3.0), 1e-12);
  EXPECT_EQ(gaussian_sign_snr_small_r(0.0), 0.0);
  EXPECT_NEAR(gaussian_sign_snr_small_r(0.1), 0.0398942, 1e-7);
  EXPECT_THROW(sign_snr(1.5), std::domain_error);
}

TEST(UpdateMoments, Examples) {
  const double a = 0.01, k = 4096, mu = 0.3, sigma = 2.0;
  for (double b : {1.0, 4.0, 16.0}) {
    auto [m, v] = update_moments(UpdateRule::sgd, a * b, b, k / b, mu, sigma);
    EXPECT_NEAR(m, a * k * mu, 1e-12 * a * k * mu);
    EXPECT_NEAR(v, a * a * k * sigma * sigma, 1e-12 * a * a * k * sigma * sigma);
    auto [m2, v2] = update_moments(UpdateRule::adam_normalized, a * std::sqrt(b), b, k / b, 0.0, sigma);
    EXPECT_EQ(m2, 0.0);
    EXPECT_NEAR(v2, a * a * k, 1e-12 * a * a * k);
  }
  auto [m3, v3] = update_moments(UpdateRule::adam_normalized, 0.1, 4, 10, 0.5, 0.0);
  EXPECT_NEAR(m3, 1.0, 1e-15);
  EXPECT_EQ(v3, 0.0);
}

TEST(LayerRatio, Median) {
  EXPECT_EQ(median({1, 2, 100}), 2.0);
  EXPECT_EQ(median({7}), 7.0);
  const auto m = estimate_moments(Tensor::scalar(4.0), Tensor::scalar(5.0), 2);
  const LayerRatio r = layer_ratio_summary("W1", m);
  EXPECT_EQ(r.ratio_median, 3.0);
  EXPECT_EQ(r.ratio_mean, 3.0);
}

TEST(LayerRatio, MonteCarloMatchesConstruction) {
  // Per-entry mean mu and std sigma; sigma_eff^2 = sigma^2 / B for the Adam preconditioner.
  const std::size_t batch = 8, batches = 10000;
  const double mu = 0.5, sigma = 1.5;
  const CounterRng rng(21, 1);
  double mu_sq = 0.0, sig_eff = 0.0;
  for (std::size_t n = 0; n < batches; ++n) {
    double mean = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < batch; ++i) {
      const double g = mu + sigma * rng.normal(n * batch + i);
      mean += g / batch;
      sq += g * g / batch;
    }
    const auto m = estimate_moments(Tensor::scalar(mean * mean), Tensor::scalar(sq), batch);
    mu_sq += m.mu_sq.item() / batches;
    sig_eff += m.sigma_sq_eff.item() / batches;
  }
  const double expected = mu * mu / (sigma * sigma / batch);
  EXPECT_NEAR(mu_sq / sig_eff, expected, 0.05 * expected);
}

TEST(Format, Numbers) {
  EXPECT_EQ(format_number(0.5), "0.5");
  EXPECT_EQ(format_number(std::numeric_limits<double>::infinity()), "inf");
}

#include "gradstats/stats.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace gradstats {

MomentEstimates estimate_moments(const Tensor& nu_adam, const Tensor& nu_micro, std::size_t batch,
                                 Preconditioner kind) {
  if (batch < 2) throw std::invalid_argument("estimate_moments: batch size must be at least 2");
  if (nu_adam.shape() != nu_micro.shape()) throw ShapeError("estimate_moments: shape mismatch");
  const double b = static_cast<double>(batch);
  const double norm = 1.0 - 1.0 / b;
  MomentEstimates m;
  m.mu_sq = Tensor(nu_adam.shape());
  m.sigma_sq = Tensor(nu_adam.shape());
  m.sigma_sq_eff = Tensor(nu_adam.shape());
  m.ratio = Tensor(nu_adam.shape());
  for (std::size_t k = 0; k < nu_adam.size(); ++k) {
    m.mu_sq[k] = (nu_adam[k] - nu_micro[k] / b) / norm;
    m.sigma_sq[k] = (nu_micro[k] - nu_adam[k]) / norm;
    m.sigma_sq_eff[k] = kind == Preconditioner::adam ? m.sigma_sq[k] / b : m.sigma_sq[k];
    m.ratio[k] = m.sigma_sq_eff[k] < 1e-300 ? std::numeric_limits<double>::infinity()
                                             : m.mu_sq[k] / m.sigma_sq_eff[k];
  }
  return m;
}

double sign_snr(double p) {
  if (!(p > 0.0 && p < 1.0)) throw std::domain_error("sign_snr: p must lie in (0, 1)");
  return std::abs(2.0 * p - 1.0) / (2.0 * std::sqrt(p * (1.0 - p)));
}

double gaussian_sign_snr_small_r(double r) { return r / std::sqrt(2.0 * std::numbers::pi); }

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

std::pair<double, double> update_moments(UpdateRule rule, double lr, double batch, double steps, double mu,
                                         double sigma) {
  if (!(batch >= 1.0) || !(steps >= 1.0) || !(sigma >= 0.0)) {
    throw std::invalid_argument("update_moments: need batch >= 1, steps >= 1, sigma >= 0");
  }
  if (rule == UpdateRule::sgd) return {steps * lr * mu, steps * lr * lr * sigma * sigma / batch};
  if (mu == 0.0 && sigma == 0.0) throw std::domain_error("update_moments: degenerate preconditioner");
  const double mean = steps * lr * mu / std::sqrt(mu * mu + sigma * sigma / batch);
  const double var = steps * lr * lr * sigma * sigma / (batch * mu * mu + sigma * sigma);
  return {mean, var};
}

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median of an empty set");
  const std::size_t n = values.size();
  std::sort(values.begin(), values.end());
  if (n % 2 == 1) return values[n / 2];
  return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

LayerRatio layer_ratio_summary(const std::string& layer, const MomentEstimates& m) {
  if (m.ratio.size() == 0) throw std::invalid_argument("layer_ratio_summary: empty layer");
  auto mean = [](const Tensor& t) { return std::accumulate(t.data().begin(), t.data().end(), 0.0) / t.size(); };
  LayerRatio r;
  r.layer = layer;
  r.mu_sq_mean = mean(m.mu_sq);
  r.mu_sq_median = median(m.mu_sq.values());
  r.sigma_sq_eff_mean = mean(m.sigma_sq_eff);
  r.ratio_mean = mean(m.ratio);
  r.ratio_median = median(m.ratio.values());
  return r;
}

std::string format_number(double x) {
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  if (std::isnan(x)) return "nan";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

}  // namespace gradstats

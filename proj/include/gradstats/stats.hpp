#ifndef GRADSTATS_STATS_HPP
#define GRADSTATS_STATS_HPP

#include "gradstats/tensor.hpp"

#include <string>
#include <utility>
#include <vector>

namespace gradstats {

enum class Preconditioner { adam, micro };

struct MomentEstimates {
  Tensor mu_sq;
  Tensor sigma_sq;
  Tensor sigma_sq_eff;
  Tensor ratio;  // mu_sq / sigma_sq_eff, +inf where sigma_sq_eff < 1e-300
};

/// mu^2 and sigma^2 from the squared batch mean (nu_adam) and the batch mean
/// of squares (nu_micro). Negative mu^2 estimates are kept as they are.
MomentEstimates estimate_moments(const Tensor& nu_adam, const Tensor& nu_micro, std::size_t batch,
                                 Preconditioner kind = Preconditioner::adam);

/// |2p-1| / (2 sqrt(p(1-p))) for p = P(X > 0).
double sign_snr(double p);

/// r / sqrt(2 pi); accurate for |r| <= 0.3.
double gaussian_sign_snr_small_r(double r);

/// Standard normal CDF.
double normal_cdf(double x);

enum class UpdateRule { sgd, adam_normalized };

/// Mean and variance of the summed update after `steps` steps.
std::pair<double, double> update_moments(UpdateRule rule, double lr, double batch, double steps, double mu,
                                         double sigma);

struct LayerRatio {
  std::string layer;
  double mu_sq_mean = 0.0;
  double mu_sq_median = 0.0;
  double sigma_sq_eff_mean = 0.0;
  double ratio_mean = 0.0;
  double ratio_median = 0.0;
};

/// Median of the values; the average of the two middle values for even counts.
double median(std::vector<double> values);

LayerRatio layer_ratio_summary(const std::string& layer, const MomentEstimates& m);

/// "inf" for +infinity, otherwise shortest round-trip decimal.
std::string format_number(double x);

}  // namespace gradstats

#endif  // GRADSTATS_STATS_HPP

#ifndef GRADSTATS_RANDOM_HPP
#define GRADSTATS_RANDOM_HPP

#include "gradstats/tensor.hpp"

#include <array>
#include <cstdint>

namespace gradstats {

using PhiloxCounter = std::array<std::uint32_t, 4>;
using PhiloxKey = std::array<std::uint32_t, 2>;

/// Philox4x32 with 10 rounds.
PhiloxCounter philox4x32(PhiloxCounter ctr, PhiloxKey key);

/// Stateless stream of draws addressed by (seed, stream, index). Any draw can
/// be recomputed without replaying the ones before it.
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, std::uint64_t stream) : seed_(seed), stream_(stream) {}

  /// Uniform on (0, 1).
  double uniform(std::uint64_t index) const;
  /// Standard normal via Box-Muller on one Philox block.
  double normal(std::uint64_t index) const;

  /// Fills a tensor with normals; entry k uses index offset + k.
  Tensor normal_tensor(const Shape& shape, std::uint64_t offset = 0, double stddev = 1.0) const;

 private:
  PhiloxCounter block(std::uint64_t index) const;

  std::uint64_t seed_;
  std::uint64_t stream_;
};

}  // namespace gradstats

#endif  // GRADSTATS_RANDOM_HPP

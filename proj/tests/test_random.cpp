#include "gradstats/random.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace gradstats;

// Known-answer vectors for Philox4x32-10.
TEST(Philox, KnownAnswers) {
  EXPECT_EQ(philox4x32({0, 0, 0, 0}, {0, 0}), (PhiloxCounter{0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8}));
  EXPECT_EQ(philox4x32({0xffffffff, 0xffffffff, 0xffffffff, 0xffffffff}, {0xffffffff, 0xffffffff}),
            (PhiloxCounter{0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd}));
  EXPECT_EQ(philox4x32({0x243f6a88, 0x85a308d3, 0x13198a2e, 0x03707344}, {0xa4093822, 0x299f31d0}),
            (PhiloxCounter{0xd16cfe09, 0x94fdcceb, 0x5001e420, 0x24126ea1}));
}

TEST(CounterRng, AddressableAndStreamSeparated) {
  const CounterRng a(5, 1), b(5, 2), c(6, 1);
  EXPECT_EQ(a.uniform(17), CounterRng(5, 1).uniform(17));
  EXPECT_NE(a.uniform(17), b.uniform(17));
  EXPECT_NE(a.uniform(17), c.uniform(17));
  for (std::uint64_t i = 0; i < 1000; ++i) {
    const double u = a.uniform(i);
    EXPECT_GT(u, 0.0);
    EXPECT_LT(u, 1.0);
  }
}

TEST(CounterRng, NormalMoments) {
  const CounterRng rng(0, 0);
  const std::size_t n = 200000;
  double m = 0.0, v = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = rng.normal(i);
    m += x / n;
    v += x * x / n;
  }
  EXPECT_NEAR(m, 0.0, 0.01);
  EXPECT_NEAR(v, 1.0, 0.02);
}

TEST(CounterRng, TensorUsesOffset) {
  const CounterRng rng(1, 9);
  const Tensor t = rng.normal_tensor({2, 3}, 10, 2.0);
  for (std::size_t k = 0; k < t.size(); ++k) EXPECT_EQ(t[k], 2.0 * rng.normal(10 + k));
}

#include "gradstats/tensor.hpp"

#include <gtest/gtest.h>

#include <numeric>
#include <random>

using namespace gradstats;

namespace {

Tensor iota_tensor(Shape shape, double start = 1.0) {
  Tensor t(std::move(shape));
  std::iota(t.data().begin(), t.data().end(), start);
  return t;
}

Tensor random_tensor(Shape shape, unsigned seed) {
  std::mt19937 gen(seed);
  std::normal_distribution<double> n;
  Tensor t(std::move(shape));
  for (auto& x : t.data()) x = n(gen);
  return t;
}

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_EQ(Tensor::scalar(2.5).rank(), 0u);
  EXPECT_EQ(Tensor::scalar(2.5).item(), 2.5);
}

TEST(Contract, MatrixTimesOnes) {
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b({2, 1}, {1, 1});
  EXPECT_EQ(contract(a, b, {{1, 0}}), Tensor({2, 1}, {3, 7}));
}

TEST(Contract, OuterProductSumOverBatch) {
  Tensor s({2, 2}, {1, 2, 3, 4});
  Tensor r({2, 2}, {5, 6, 7, 8});
  EXPECT_EQ(contract(s, r, {{0, 0}}), Tensor({2, 2}, {26, 30, 38, 44}));
}

TEST(Contract, ZeroExtentContractedAxisGivesZeros) {
  Tensor a({3, 0});
  Tensor b({0, 2});
  EXPECT_EQ(contract(a, b, {{1, 0}}), Tensor::filled({3, 2}, 0.0));
}

TEST(Contract, RejectsMismatchedExtents) {
  EXPECT_THROW(contract(Tensor({2, 3}), Tensor({2, 3}), {{1, 0}}), ShapeError);
}

TEST(Contract, BatchedMatchesLoop) {
  const Tensor a = random_tensor({3, 4, 5}, 1);
  const Tensor b = random_tensor({3, 5, 2}, 2);
  const std::vector<AxisPair> con{{2, 1}}, bat{{0, 0}};
  const Tensor c = contract(a, b, con, bat);
  ASSERT_EQ(c.shape(), (Shape{3, 4, 2}));
  for (std::size_t k = 0; k < 3; ++k) {
    // take keeps the sliced axis with extent 1.
    const Tensor ak({4, 5}, take(a, 0, k).values()), bk({5, 2}, take(b, 0, k).values());
    const Tensor ck({4, 2}, take(c, 0, k).values());
    EXPECT_LT(relative_error(ck, contract(ak, bk, {{1, 0}})), 1e-14);
  }
}

TEST(Elementwise, Examples) {
  EXPECT_EQ(sign(Tensor({3}, {-2, 0, 5})), Tensor({3}, {-1, 0, 1}));
  EXPECT_EQ(square(Tensor({2, 2}, {1, 2, 3, 4})), Tensor({2, 2}, {1, 4, 9, 16}));
  EXPECT_EQ(abs_pow(Tensor({2}, {4, 9}), 0.5), Tensor({2}, {2, 3}));
}

TEST(Elementwise, ScalarOperandBroadcasts) {
  const Tensor r = elementwise(ops::mul(), Tensor::scalar(2.0), Tensor({2}, {1, 3}));
  EXPECT_EQ(r, Tensor({2}, {2, 6}));
  EXPECT_THROW(elementwise(ops::add(), Tensor({2}), Tensor({3})), ShapeError);
}

TEST(ReduceBroadcast, Examples) {
  EXPECT_EQ(reduce_sum(Tensor({2, 2}, {1, 2, 3, 4}), {0}), Tensor({2}, {4, 6}));
  EXPECT_EQ(broadcast(Tensor({2}, {4, 6}), {2, 2}, {1}), Tensor({2, 2}, {4, 6, 4, 6}));
}

TEST(ReduceBroadcast, AdjointPair) {
  const Tensor x({2}, {1, 2});
  const Tensor y({2, 2}, {1, 0, 0, 1});
  EXPECT_EQ(inner(broadcast(x, {2, 2}, {1}), y), 3.0);
  EXPECT_EQ(inner(x, reduce_sum(y, {0})), 3.0);
}

TEST(ReduceBroadcast, AdjointPropertyRandom) {
  for (unsigned seed = 0; seed < 10; ++seed) {
    const Tensor x = random_tensor({3, 2}, seed);
    const Tensor y = random_tensor({2, 4, 3}, seed + 100);
    const double lhs = inner(broadcast(x, {2, 4, 3}, {2, 0}), y);
    const double rhs = inner(x, transpose(reduce_sum(y, {1}), {1, 0}));
    EXPECT_NEAR(lhs, rhs, 1e-12 * (1 + std::abs(lhs)));
  }
}

TEST(Transpose, RoundTrip) {
  const Tensor x = iota_tensor({2, 3, 4});
  const Tensor t = transpose(x, {2, 0, 1});
  EXPECT_EQ(t.shape(), (Shape{4, 2, 3}));
  EXPECT_EQ(t.at({3, 1, 2}), x.at({1, 2, 3}));
  EXPECT_EQ(transpose(t, {1, 2, 0}), x);
  EXPECT_THROW(transpose(x, {0, 0, 1}), ShapeError);
}

TEST(ReduceSum, DeterministicAcrossCalls) {
  const Tensor x = random_tensor({64, 33}, 5);
  EXPECT_EQ(reduce_sum(x, {0}), reduce_sum(x, {0}));
}

TEST(Stack, TakeInverts) {
  const Tensor a = iota_tensor({2, 3}), b = iota_tensor({2, 3}, 10);
  const std::vector<Tensor> parts{a, b};
  const Tensor s = stack(parts);
  EXPECT_EQ(take(s, 0, 0), Tensor({1, 2, 3}, a.values()));
  EXPECT_EQ(take(s, 0, 1), Tensor({1, 2, 3}, b.values()));
}

TEST(Norms, GlobalNormAndRelativeError) {
  const std::vector<Tensor> parts{Tensor({2}, {3, 0}), Tensor({1}, {4})};
  EXPECT_EQ(global_norm(parts), 5.0);
  EXPECT_EQ(relative_error(Tensor({1}, {1}), Tensor({1}, {1})), 0.0);
}

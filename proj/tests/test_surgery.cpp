#include "gradstats/autodiff.hpp"
#include "gradstats/harness.hpp"
#include "gradstats/surgery.hpp"
#include "gradstats/verify.hpp"

#include <gtest/gtest.h>

using namespace gradstats;

namespace {

// Dense layer z = S W with loss sum(z * R), so the weight gradient is sum_i s_i r_i^T.
struct DenseCase {
  Graph loss;
  VarId s, r, w;
};

DenseCase dense_case(std::size_t batch) {
  GraphBuilder g;
  DenseCase c;
  c.s = g.input("S", {batch, 2}, Role::data, 0);
  c.r = g.input("R", {batch, 2}, Role::data, 0);
  c.w = g.input("W", {2, 2}, Role::parameter);
  VarId z = g.contract(c.s, c.w, {{1, 0}});
  g.output(g.reduce_sum(g.elementwise(ops::mul(), z, c.r), {0, 1}));
  c.loss = g.build();
  return c;
}

}  // namespace

TEST(Sites, TwoLayerMlpWithBiases) {
  ModelSpec spec;
  spec.widths = {4, 8, 3};
  const Model m = build_model(spec, TaskSpec{}, 4);
  const auto sites = collect_reduce_sites(grad_graph(m.loss, m.params));
  int dense = 0, bias = 0;
  for (const auto& s : sites) {
    dense += s.shape_class == SiteClass::rank_one_dense;
    bias += s.shape_class == SiteClass::bias_sum;
  }
  EXPECT_EQ(sites.size(), 4u);
  EXPECT_EQ(dense, 2);
  EXPECT_EQ(bias, 2);
}

TEST(Sites, SequenceDense) {
  ModelSpec spec;
  spec.kind = ModelSpec::Kind::seq_dense;
  spec.depth = 1;
  const Model m = build_model(spec, TaskSpec{}, 3);
  const auto sites = collect_reduce_sites(grad_graph(m.loss, m.params));
  ASSERT_EQ(sites.size(), 1u);
  EXPECT_EQ(sites[0].shape_class, SiteClass::sequence_dense);
}

TEST(Sites, ZeroParameterGraph) {
  GraphBuilder g;
  VarId x = g.input("x", {2, 3}, Role::data, 0);
  g.output(g.reduce_sum(x, {0, 1}));
  EXPECT_TRUE(collect_reduce_sites(grad_graph(g.build(), {})).empty());
}

TEST(Inject, MeanSquareFactoredExample) {
  const DenseCase c = dense_case(2);
  const std::vector<VarId> wrt{c.w};
  const Graph sq = inject_statistic(grad_graph(c.loss, wrt), GradStatistic::mean_square());
  const Bindings b{{c.s, Tensor({2, 2}, {1, 2, 3, 4})}, {c.r, Tensor({2, 2}, {5, 6, 7, 8})}, {c.w, Tensor({2, 2})}};
  const Tensor out = eval(sq, b).at(0);
  EXPECT_EQ(2.0 * out, Tensor({2, 2}, {466, 612, 884, 1168}));
}

TEST(Inject, MeanSignAllPositive) {
  const DenseCase c = dense_case(2);
  const std::vector<VarId> wrt{c.w};
  const Graph sg = inject_statistic(grad_graph(c.loss, wrt), GradStatistic::mean_sign());
  const Bindings b{{c.s, Tensor({2, 2}, {1, 2, 3, 4})}, {c.r, Tensor({2, 2}, {5, 6, 7, 8})}, {c.w, Tensor({2, 2})}};
  EXPECT_EQ(eval(sg, b).at(0), Tensor::filled({2, 2}, 1.0));
}

TEST(Inject, MeanIsGradientOverBatchBitwise) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Model m = build_model(random_mlp_spec(seed), TaskSpec{}, random_batch(seed));
    const Bindings b = random_bindings(m.loss, seed);
    const Graph grad = grad_graph(m.loss, m.params);
    const auto g = eval(grad, b);
    const auto mean = eval(inject_statistic(grad, GradStatistic::mean()), b);
    const double batch = static_cast<double>(*m.loss.batch_size());
    for (std::size_t k = 0; k < g.size(); ++k) EXPECT_EQ(mean[k], g[k] / batch);
  }
}

TEST(Inject, FactoredRejectedAtSequenceSite) {
  ModelSpec spec;
  spec.kind = ModelSpec::Kind::seq_dense;
  const Model m = build_model(spec, TaskSpec{}, 3);
  EXPECT_THROW(inject_statistic(grad_graph(m.loss, m.params), GradStatistic::mean_square(), Rewrite::factored),
               SurgeryError);
}

TEST(Inject, CustomStatisticUsesPerExamplePath) {
  ModelSpec spec;
  spec.widths = {3, 5, 2};
  const Model m = build_model(spec, TaskSpec{}, 4);
  const Bindings b = random_bindings(m.loss, 11);
  const auto cube = GradStatistic::custom("cube", [](double x) { return x * x * x; });
  const auto grad = grad_graph(m.loss, m.params);
  for (const auto& site : collect_reduce_sites(grad)) EXPECT_EQ(rewrite_name(site, cube), "per_example");
  const auto got = eval(inject_statistic(grad, cube), b);
  EXPECT_LE(relative_error(got, per_example_oracle(m.loss, b, m.params, cube)), 1e-9);
}

TEST(Oracle, MatchesSurgeryOnRandomModels) {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const Model m = build_model(random_mlp_spec(seed), TaskSpec{}, random_batch(seed));
    const Bindings b = random_bindings(m.loss, seed);
    const Graph grad = grad_graph(m.loss, m.params);
    for (const auto& stat : suite_statistics()) {
      const auto oracle = per_example_oracle(m.loss, b, m.params, stat);
      EXPECT_LE(relative_error(eval(inject_statistic(grad, stat), b), oracle), 1e-9) << stat.name();
      EXPECT_LE(relative_error(per_example_oracle(m.loss, b, m.params, stat, OracleVariant::stacked), oracle), 1e-12);
    }
  }
}

TEST(Oracle, SingleExampleIsPhiOfGradient) {
  ModelSpec spec;
  spec.widths = {3, 4, 2};
  const Model m = build_model(spec, TaskSpec{}, 1);
  const Bindings b = random_bindings(m.loss, 4);
  const auto g = eval(grad_graph(m.loss, m.params), b);
  for (const auto& stat : suite_statistics()) {
    const auto oracle = per_example_oracle(m.loss, b, m.params, stat);
    for (std::size_t k = 0; k < g.size(); ++k) EXPECT_LE(relative_error(oracle[k], stat.apply(g[k])), 1e-15);
  }
}

TEST(Oracle, MeanEqualsGradientOverBatch) {
  const Model m = build_model(ModelSpec{}, TaskSpec{}, 6);
  const Bindings b = random_bindings(m.loss, 2);
  const auto g = eval(grad_graph(m.loss, m.params), b);
  const auto oracle = per_example_oracle(m.loss, b, m.params, GradStatistic::mean());
  for (std::size_t k = 0; k < g.size(); ++k) EXPECT_LE(relative_error(oracle[k], g[k] / 6.0), 1e-12);
}

TEST(PerExample, StackedGradientsSumToBatchGradient) {
  const Model m = build_model(ModelSpec{}, TaskSpec{}, 5);
  const Bindings b = random_bindings(m.loss, 9);
  const Graph grad = grad_graph(m.loss, m.params);
  const auto g = eval(grad, b);
  const auto per = eval(per_example_gradient_graph(grad), b);
  ASSERT_EQ(per.size(), g.size());
  for (std::size_t k = 0; k < g.size(); ++k) {
    EXPECT_EQ(per[k].shape().front(), 5u);
    EXPECT_LE(relative_error(reduce_sum(per[k], {0}), g[k]), 1e-12);
  }
}

TEST(Statistic, ParseRoundTrip) {
  for (const auto& s : suite_statistics()) EXPECT_EQ(GradStatistic::parse(s.name()).name(), s.name());
  EXPECT_THROW(GradStatistic::parse("median"), std::invalid_argument);
}

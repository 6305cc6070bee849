#include "gradstats/autodiff.hpp"
#include "gradstats/harness.hpp"
#include "gradstats/verify.hpp"

#include <gtest/gtest.h>

using namespace gradstats;

TEST(GradGraph, SquaredProduct) {
  GraphBuilder g;
  VarId x = g.input("x", {1, 1}, Role::data, 0);
  VarId w = g.input("w", {1, 1}, Role::parameter);
  VarId z = g.contract(x, w, {{1, 0}});
  g.output(g.reduce_sum(g.elementwise(ops::square(), z), {0, 1}));
  const Graph loss = g.build();
  const std::vector<VarId> wrt{w};
  const auto grad = eval(grad_graph(loss, wrt), {{x, Tensor({1, 1}, {3})}, {w, Tensor({1, 1}, {1})}});
  EXPECT_EQ(grad.at(0), Tensor({1, 1}, {18}));
}

TEST(GradGraph, LinearMapGivesColumnSums) {
  GraphBuilder g;
  VarId x = g.input("x", {2, 2}, Role::data, 0);
  VarId w = g.input("w", {2, 1}, Role::parameter);
  g.output(g.reduce_sum(g.contract(x, w, {{1, 0}}), {0, 1}));
  const Graph loss = g.build();
  const std::vector<VarId> wrt{w};
  const auto grad = eval(grad_graph(loss, wrt), {{x, Tensor::filled({2, 2}, 1.0)}, {w, Tensor({2, 1}, {0.3, -2})}});
  EXPECT_EQ(grad.at(0), Tensor({2, 1}, {2, 2}));
}

TEST(GradGraph, BiasCotangentIsTaggedBatchReduce) {
  GraphBuilder g;
  VarId s = g.input("s", {3, 2}, Role::data, 0);
  VarId b = g.input("b", {2}, Role::parameter);
  VarId t = g.elementwise(ops::add(), s, g.broadcast(b, {3, 2}, {1}, 0));
  g.output(g.reduce_sum(g.elementwise(ops::square(), t), {0, 1}));
  const Graph loss = g.build();
  const std::vector<VarId> wrt{b};
  const Graph grad = grad_graph(loss, wrt);
  bool found = false;
  for (const auto& e : grad.equations()) {
    if (e.batch_reduce_of == b) {
      EXPECT_EQ(kind_of(e.primitive), PrimitiveKind::reduce_sum);
      found = true;
    }
  }
  EXPECT_TRUE(found);
}

TEST(GradGraph, RejectsNonScalarLossAndTiedWeights) {
  {
    GraphBuilder g;
    VarId w = g.input("w", {2}, Role::parameter);
    g.output(g.elementwise(ops::square(), w));
    const std::vector<VarId> wrt{w};
    EXPECT_THROW(grad_graph(g.build(), wrt), GraphError);
  }
  {
    GraphBuilder g;
    VarId w = g.input("w", {2, 2}, Role::parameter);
    g.output(g.reduce_sum(g.contract(w, w, {{1, 0}}), {0, 1}));
    const std::vector<VarId> wrt{w};
    EXPECT_THROW(grad_graph(g.build(), wrt), TiedWeightError);
  }
}

TEST(GradGraph, IncludeLossAppendsLoss) {
  GraphBuilder g;
  VarId w = g.input("w", {}, Role::parameter);
  g.output(g.elementwise(ops::square(), w));
  const std::vector<VarId> wrt{w};
  const auto out = eval(grad_graph(g.build(), wrt, {.include_loss = true}), {{w, Tensor::scalar(3.0)}});
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].item(), 6.0);
  EXPECT_EQ(out[1].item(), 9.0);
}

TEST(FiniteDifference, QuadraticIsExact) {
  GraphBuilder g;
  VarId w = g.input("w", {}, Role::parameter);
  g.output(g.elementwise(ops::square(), w));
  const Graph loss = g.build();
  const std::vector<VarId> wrt{w};
  // Exact in floating point for dyadic steps.
  for (double h : {0.5, 0.125, 0x1p-10}) {
    EXPECT_EQ(finite_difference(loss, {{w, Tensor::scalar(3.0)}}, wrt, h).at(0).item(), 6.0);
  }
}

TEST(FiniteDifference, ZeroParameters) {
  GraphBuilder g;
  VarId x = g.input("x", {}, Role::constant);
  g.output(x);
  EXPECT_TRUE(finite_difference(g.build(), {{x, Tensor::scalar(1.0)}}, {}, 1e-5).empty());
}

TEST(FiniteDifference, PrimitivesMatchGradGraph) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    for (const auto& c : primitive_cases(seed)) {
      const auto params = c.loss.parameters();
      const auto analytic = eval(grad_graph(c.loss, params), c.bindings);
      const auto numeric = finite_difference(c.loss, c.bindings, params, 1e-5);
      EXPECT_LE(relative_error(analytic, numeric), 1e-6) << c.name << " seed " << seed;
    }
  }
}

TEST(FiniteDifference, TanhMlp) {
  ModelSpec spec;
  spec.widths = {5, 7, 3};
  const Model m = build_model(spec, TaskSpec{}, 4);
  const Bindings b = random_bindings(m.loss, 3);
  const auto analytic = eval(grad_graph(m.loss, m.params), b);
  EXPECT_LE(relative_error(analytic, finite_difference(m.loss, b, m.params, 1e-5)), 1e-6);
}

TEST(FaultHook, FlipsNamedPrimitive) {
  const auto cases = primitive_cases(0);
  const auto it = std::find_if(cases.begin(), cases.end(), [](const PrimitiveCase& c) { return c.name == "tanh"; });
  ASSERT_NE(it, cases.end());
  const auto params = it->loss.parameters();
  gradstats::testing::set_vjp_fault("tanh");
  const auto faulty = eval(grad_graph(it->loss, params), it->bindings);
  gradstats::testing::set_vjp_fault(std::nullopt);
  const auto clean = eval(grad_graph(it->loss, params), it->bindings);
  EXPECT_GT(relative_error(faulty, clean), 1e-3);
}

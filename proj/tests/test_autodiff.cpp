#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "smartpc/gradcheck_suite.hpp"
#include "smartpc/ops.hpp"
#include "support.hpp"

using namespace smartpc;

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = uniform(rng, lo, hi);
  return t;
}

// Sum of all elements as a scalar root via a ones-vector linear map.
Var sum_all(Tape<double>& t, Var x) {
  Tensor<double> flat = t.value(x);
  const std::size_t n = flat.size();
  flat.reshape({1, n});
  Var f = t.push(std::move(flat), t.requires_grad(x), [x](Tape<double>& tp, std::size_t self) {
    const auto& g = tp.grad_buffer(self);
    auto& gx = tp.grad_buffer(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
  Var ones = t.constant(Tensor<double>({n, 1}, 1.0));
  Var zero = t.constant(Tensor<double>({1}, 0.0));
  return ops::linear(t, f, ones, zero);
}

}  // namespace

TEST(Linear, IdentityWeightPassesInputThrough) {
  Rng rng(1);
  Tape<double> t;
  Tensor<double> eye({4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye.at(i, i) = 1.0;
  auto x = random_tensor({3, 4}, rng);
  Var y = ops::linear(t, t.constant(x), t.constant(eye), t.constant(Tensor<double>({4})));
  EXPECT_EQ(t.value(y), x);
}

TEST(Linear, ZeroInputBroadcastsBias) {
  Rng rng(2);
  Tape<double> t;
  auto b = random_tensor({5}, rng);
  Var y = ops::linear(t, t.constant(Tensor<double>({3, 2})), t.constant(random_tensor({2, 5}, rng)), t.constant(b));
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(t.value(y).at(r, c), b[c]);
}

TEST(Linear, ShapeMismatchRejected) {
  Tape<double> t;
  Var x = t.constant(Tensor<double>({2, 3}));
  EXPECT_THROW(ops::linear(t, x, t.constant(Tensor<double>({4, 2})), t.constant(Tensor<double>({2}))),
               InvalidArgument);
  EXPECT_THROW(ops::linear(t, x, t.constant(Tensor<double>({3, 2})), t.constant(Tensor<double>({3}))),
               InvalidArgument);
}

TEST(BatchNorm, RunningMeanFollowsEma) {
  BatchNormState<double> bn(1);
  Tape<double> t;
  // batch {0, 2}: mean 1, biased var 1, unbiased var 2
  Var x = t.constant(Tensor<double>({2, 1}, std::vector<double>{0.0, 2.0}));
  ops::batchnorm(t, x, t.constant(bn.gamma), t.constant(bn.beta), bn, BnMode::train);
  EXPECT_NEAR(bn.running_mean[0], 0.1, 1e-15);
  EXPECT_NEAR(bn.running_var[0], 0.9 + 0.1 * 2.0, 1e-15);
}

TEST(BatchNorm, AdaptStatsUpdatesLikeTrain) {
  Rng rng(3);
  auto x = random_tensor({16, 3}, rng);
  BatchNormState<double> a(3), b(3);
  Tape<double> t1(false), t2(false);
  ops::batchnorm(t1, t1.constant(x), t1.constant(a.gamma), t1.constant(a.beta), a, BnMode::train);
  ops::batchnorm(t2, t2.constant(x), t2.constant(b.gamma), t2.constant(b.beta), b, BnMode::adapt_stats);
  EXPECT_TRUE(bitwise_equal(a.running_mean, b.running_mean));
  EXPECT_TRUE(bitwise_equal(a.running_var, b.running_var));
}

TEST(BatchNorm, EvalUsesRunningStatsAndLeavesStateAlone) {
  Rng rng(4);
  BatchNormState<double> bn(3);
  bn.running_mean = Tensor<double>({3}, std::vector<double>{0.5, -1.0, 2.0});
  bn.running_var = Tensor<double>({3}, std::vector<double>{0.25, 4.0, 1.0});
  const auto before = bn;
  auto x = random_tensor({1, 3}, rng);
  Tape<double> t;
  Var y = ops::batchnorm(t, t.constant(x), t.constant(bn.gamma), t.constant(bn.beta), bn, BnMode::eval);
  for (std::size_t j = 0; j < 3; ++j)
    EXPECT_NEAR(t.value(y)[j], (x[j] - before.running_mean[j]) / std::sqrt(before.running_var[j] + 1e-5), 1e-12);
  EXPECT_TRUE(bitwise_equal(bn.running_mean, before.running_mean));
  EXPECT_TRUE(bitwise_equal(bn.running_var, before.running_var));
}

TEST(BatchNorm, TrainOutputHasAffineStatistics) {
  Rng rng(5);
  for (int c = 0; c < 10; ++c) {
    const std::size_t n = 32 + rng() % 100;
    BatchNormState<double> bn(4);
    bn.gamma = random_tensor({4}, rng, 0.5, 2.0);
    bn.beta = random_tensor({4}, rng);
    auto x = random_tensor({n, 4}, rng, -3, 5);
    Tape<double> t;
    Var y = ops::batchnorm(t, t.constant(x), t.constant(bn.gamma), t.constant(bn.beta), bn, BnMode::train);
    for (std::size_t j = 0; j < 4; ++j) {
      double mean = 0, var = 0;
      for (std::size_t i = 0; i < n; ++i) mean += t.value(y).at(i, j);
      mean /= static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) var += std::pow(t.value(y).at(i, j) - mean, 2);
      var /= static_cast<double>(n);
      EXPECT_NEAR(mean, bn.beta[j], 1e-5);
      EXPECT_NEAR(var / (bn.gamma[j] * bn.gamma[j]), 1.0, 0.02);
    }
  }
}

TEST(BatchNorm, Contracts) {
  BatchNormState<double> bn(2);
  Tape<double> t;
  Var one_row = t.parameter(Tensor<double>({1, 2}));
  EXPECT_THROW(ops::batchnorm(t, one_row, t.constant(bn.gamma), t.constant(bn.beta), bn, BnMode::train),
               InvalidArgument);
  EXPECT_THROW(ops::batchnorm(t, one_row, t.constant(bn.gamma), t.constant(bn.beta), bn, BnMode::adapt_stats),
               InvalidArgument);
  Var x = t.parameter(Tensor<double>({3, 2}, std::vector<double>{1, 2, 3, 4, 6, 5}));
  Var y = ops::batchnorm(t, x, t.constant(bn.gamma), t.constant(bn.beta), bn, BnMode::adapt_stats);
  EXPECT_THROW(t.backward(sum_all(t, y)), ContractViolation);
  EXPECT_THROW(BatchNormState<double>(2, 1.5), InvalidArgument);
}

TEST(Elementwise, ReluAndSoftplusValues) {
  Tape<double> t;
  Var x = t.constant(Tensor<double>({4}, std::vector<double>{-1.0, 2.0, 0.0, 1000.0}));
  const auto& r = t.value(ops::relu(t, x));
  EXPECT_EQ(r[0], 0.0);
  EXPECT_EQ(r[1], 2.0);
  const auto& s = t.value(ops::softplus(t, x));
  EXPECT_NEAR(s[2], std::numbers::ln2, 1e-15);
  EXPECT_EQ(s[3], 1000.0);
  EXPECT_TRUE(s.all_finite());
}

TEST(Elementwise, ReluSubgradientAtZeroIsZero) {
  Tape<double> t;
  Var x = t.parameter(Tensor<double>({3}, std::vector<double>{0.0, 1.0, -1.0}));
  t.backward(sum_all(t, ops::relu(t, x)));
  EXPECT_EQ(t.grad(x)[0], 0.0);
  EXPECT_EQ(t.grad(x)[1], 1.0);
  EXPECT_EQ(t.grad(x)[2], 0.0);
}

TEST(Elementwise, SoftplusGradientIsLogistic) {
  Tape<double> t;
  std::vector<double> xs{-30.0, -2.0, 0.0, 0.7, 30.0};
  Var x = t.parameter(Tensor<double>({xs.size()}, xs));
  t.backward(sum_all(t, ops::softplus(t, x)));
  for (std::size_t i = 0; i < xs.size(); ++i) EXPECT_NEAR(t.grad(x)[i], 1.0 / (1.0 + std::exp(-xs[i])), 1e-15);
}

TEST(MaxPool, SingleTokenIsIdentity) {
  Rng rng(6);
  auto x = random_tensor({1, 5}, rng);
  Tape<double> t;
  EXPECT_EQ(t.value(ops::maxpool_tokens(t, t.constant(x))).values(), x.values());
}

TEST(MaxPool, GradientOnlyAtStrictArgmax) {
  Tape<double> t;
  // channel 0 max at row 2, channel 1 max at row 0
  Var x = t.parameter(Tensor<double>({3, 2}, std::vector<double>{0.1, 5.0, -1.0, 2.0, 3.0, 4.0}));
  t.backward(sum_all(t, ops::maxpool_tokens(t, x)));
  const std::vector<double> expect{0, 1, 0, 0, 1, 0};
  EXPECT_EQ(std::vector<double>(t.grad(x).values().begin(), t.grad(x).values().end()), expect);
}

TEST(MaxPool, TiesRouteToFirstRow) {
  Tape<double> t;
  Var x = t.parameter(Tensor<double>({2, 1}, std::vector<double>{3.0, 3.0}));
  t.backward(sum_all(t, ops::maxpool_tokens(t, x)));
  EXPECT_EQ(t.grad(x)[0], 1.0);
  EXPECT_EQ(t.grad(x)[1], 0.0);
}

TEST(CrossEntropy, UniformLogitsGiveLogK) {
  Tape<double> t;
  const std::vector<std::size_t> labels{2, 0};
  Var y = ops::softmax_cross_entropy(t, t.constant(Tensor<double>({2, 4}, 0.7)), labels);
  EXPECT_NEAR(t.value(y)[0], std::log(4.0), 1e-14);
}

TEST(CrossEntropy, LargeMarginGoesToZero) {
  Tape<double> t;
  const std::vector<std::size_t> labels{1};
  Var y = ops::softmax_cross_entropy(t, t.constant(Tensor<double>({1, 3}, std::vector<double>{0, 800, -5})), labels);
  EXPECT_LT(t.value(y)[0], 1e-300);
  EXPECT_TRUE(t.value(y).all_finite());
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOneHot) {
  Tape<double> t;
  const std::vector<std::size_t> labels{0};
  Var z = t.parameter(Tensor<double>({1, 2}, std::vector<double>{0.0, 0.0}));
  t.backward(ops::softmax_cross_entropy(t, z, labels));
  EXPECT_NEAR(t.grad(z)[0], -0.5, 1e-15);
  EXPECT_NEAR(t.grad(z)[1], 0.5, 1e-15);
  const std::vector<std::size_t> bad{2};
  EXPECT_THROW(ops::softmax_cross_entropy(t, z, bad), InvalidArgument);
}

TEST(Tape, FanOutAccumulates) {
  Rng rng(7);
  auto xv = random_tensor({3, 2}, rng);
  Tape<double> t;
  Var x = t.parameter(xv);
  t.backward(sum_all(t, ops::add(t, x, x)));
  for (double g : t.grad(x).values()) EXPECT_EQ(g, 2.0);

  // duplicating a subgraph input doubles its gradient
  Tape<double> single, twice;
  Var a = single.parameter(xv);
  single.backward(sum_all(single, ops::softplus(single, a)));
  Var b = twice.parameter(xv);
  twice.backward(sum_all(twice, ops::add(twice, ops::softplus(twice, b), ops::softplus(twice, b))));
  for (std::size_t i = 0; i < xv.size(); ++i) EXPECT_NEAR(twice.grad(b)[i], 2.0 * single.grad(a)[i], 1e-15);
}

TEST(Tape, NonRecordingTapeHasNoBackward) {
  Tape<double> t(false);
  Var x = t.parameter(Tensor<double>({1}, 1.0));
  EXPECT_FALSE(t.requires_grad(x));
  EXPECT_THROW(t.backward(x), ContractViolation);
}

TEST(Gradcheck, QuadraticIsExact) {
  // f = sum_i a_i x_i^2 + x_0 x_1
  const std::vector<double> a{1.5, -0.3, 2.0, 0.25};
  DifferentiableProgram f = [&](std::span<const double> x, std::vector<double>* g) {
    double v = x[0] * x[1];
    for (std::size_t i = 0; i < x.size(); ++i) v += a[i] * x[i] * x[i];
    if (g) {
      g->assign(x.size(), 0.0);
      for (std::size_t i = 0; i < x.size(); ++i) (*g)[i] = 2.0 * a[i] * x[i];
      (*g)[0] += x[1];
      (*g)[1] += x[0];
    }
    return GradEval{v, 0};
  };
  const std::vector<double> theta{0.3, -1.2, 0.8, 2.0};
  auto r = gradcheck(f, theta, {.tolerance = 1e-9});
  EXPECT_TRUE(r.passed) << r.max_rel_error;
  EXPECT_LT(r.max_rel_error, 1e-9);
  EXPECT_EQ(r.checked, 4u);
}

TEST(Gradcheck, CorruptedGradientFails) {
  DifferentiableProgram f = [](std::span<const double> x, std::vector<double>* g) {
    double v = 0;
    for (double xi : x) v += std::sin(xi);
    if (g) {
      g->clear();
      for (double xi : x) g->push_back(1.1 * std::cos(xi));
    }
    return GradEval{v, 0};
  };
  const std::vector<double> theta{0.1, 0.5, 1.0};
  auto r = gradcheck(f, theta, {.tolerance = 1e-3});
  EXPECT_FALSE(r.passed);
  EXPECT_NEAR(r.max_rel_error, 0.1 / 1.1, 1e-6);
}

TEST(Gradcheck, KinkCrossingsAreSkipped) {
  DifferentiableProgram f = [](std::span<const double> x, std::vector<double>* g) {
    if (g) *g = {x[0] > 0 ? 1.0 : 0.0};
    return GradEval{std::max(x[0], 0.0), x[0] > 0 ? 1u : 0u};
  };
  const std::vector<double> at_kink{1e-5};
  auto r = gradcheck(f, at_kink);
  EXPECT_EQ(r.skipped_kinks, 1u);
  EXPECT_FALSE(r.passed);
}

TEST(Gradcheck, SuitePasses) {
  const auto comps = run_gradcheck_suite({.tiny = true});
  ASSERT_FALSE(comps.empty());
  for (const auto& c : comps) {
    EXPECT_TRUE(c.report.passed) << c.name << " rel err " << c.report.max_rel_error << " at " << c.report.worst_index;
    EXPECT_LT(c.report.max_rel_error, c.composition ? kCompositionTolerance : kPrimitiveTolerance) << c.name;
  }
}

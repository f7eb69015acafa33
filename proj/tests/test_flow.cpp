#include <gtest/gtest.h>

#include <cmath>

#include "dsd/error.hpp"
#include "dsd/flow.hpp"
#include "dsd/gradcheck.hpp"
#include "dsd/random.hpp"

using namespace dsd;

namespace {

Tensor s1(double v) { return Tensor::vector({v}); }

}  // namespace

TEST(Flow, InterpolateEndpoints) {
  EXPECT_DOUBLE_EQ(flow::interpolate(s1(2.0), s1(0.5), 0.5).item(), 1.25);
  auto rng = keyed_rng({1});
  const Tensor z = Tensor::randn({3, 4}, rng), e = Tensor::randn({3, 4}, rng);
  EXPECT_TRUE(bitwise_equal(flow::interpolate(z, e, 1.0), z));
  EXPECT_TRUE(bitwise_equal(flow::interpolate(z, e, 0.0), e));
  EXPECT_THROW(flow::interpolate(z, e, 1.5), Error);
  EXPECT_THROW(flow::interpolate(z, e, -0.1), Error);
}

TEST(Flow, PerRowTimes) {
  const Tensor z({2, 2}, {1, 1, 1, 1}), e = Tensor::zeros({2, 2});
  const std::vector<double> t{0.25, 0.75};
  const Tensor zt = flow::interpolate(z, e, t);
  EXPECT_DOUBLE_EQ(zt[1], 0.25);
  EXPECT_DOUBLE_EQ(zt[2], 0.75);
}

TEST(Flow, NoisySampleInvariants) {
  auto rng = keyed_rng({2});
  const Tensor z = Tensor::randn({16, 3, 2}, rng);
  const auto s = flow::make_noisy_sample(z, rng);
  ASSERT_EQ(s.t.size(), 16u);
  for (double t : s.t) {
    EXPECT_GE(t, 0.0);
    EXPECT_LE(t, flow::kTimeMax);
  }
  EXPECT_LT(max_abs_diff(s.z_t, flow::interpolate(z, s.eps, s.t)), 1e-15);
}

TEST(Flow, VelocityLossByHand) {
  EXPECT_DOUBLE_EQ(flow::loss_velocity(s1(0.0), s1(2.0), s1(0.5)).item(), 2.25);
  EXPECT_DOUBLE_EQ(flow::loss_velocity(s1(1.5), s1(2.0), s1(0.5)).item(), 0.0);
  auto rng = keyed_rng({3});
  const Tensor v = Tensor::randn({5}, rng), z = Tensor::randn({5}, rng), e = Tensor::randn({5}, rng);
  const double base = flow::loss_velocity(v, z, e).item();
  EXPECT_DOUBLE_EQ(flow::loss_velocity_decoupled(v, z, e).item(), base);
  EXPECT_DOUBLE_EQ(flow::loss_detached_velocity(v, z, e).item(), base);
}

TEST(Flow, DecoupledTargetGetsNoGradient) {
  auto rng = keyed_rng({4});
  const Tensor v0 = Tensor::randn({6}, rng), z0 = Tensor::randn({6}, rng), e0 = Tensor::randn({6}, rng);
  for (int which = 0; which < 2; ++which) {
    Tape tape;
    const Tensor v = tape.watch(v0), z = tape.watch(z0);
    const Tensor loss = which == 0 ? flow::loss_velocity_decoupled(v, z, e0) : flow::loss_detached_velocity(v, z, e0);
    const auto g = tape.backward(loss);
    const Tensor gz = g.wrt(z), gv = g.wrt(v);
    for (double x : gz.data()) EXPECT_EQ(x, 0.0);
    double norm = 0.0;
    for (double x : gv.data()) norm += x * x;
    EXPECT_GT(norm, 0.0);
  }
  // The joint form does send gradient to z, and it matches finite differences.
  const TensorFunction f = [&](std::span<const Tensor> in) { return flow::loss_velocity(v0, in[0], e0); };
  const auto r = finite_diff_check(f, std::span<const Tensor>(&z0, 1));
  EXPECT_LT(r.max_relative_error, 1e-8);
  Tape tape;
  const Tensor z = tape.watch(z0);
  const auto g = tape.backward(flow::loss_velocity(v0, z, e0));
  const Tensor gz = g.wrt(z);
  double norm = 0.0;
  for (double x : gz.data()) norm += x * x;
  EXPECT_GT(norm, 0.0);
}

TEST(Flow, CleanLossWeights) {
  EXPECT_DOUBLE_EQ(flow::loss_clean(s1(0.0), s1(1.0), 0.5, true).item(), 4.0);
  EXPECT_DOUBLE_EQ(flow::loss_clean(s1(0.0), s1(1.0), 0.5, false).item(), 1.0);
  EXPECT_DOUBLE_EQ(flow::loss_clean(s1(0.7), s1(0.7), 0.3, true).item(), 0.0);
  EXPECT_THROW(flow::loss_clean(s1(0.0), s1(1.0), 1.0, true), Error);
}

TEST(Flow, CleanVelocityConversions) {
  const double zt = flow::interpolate(s1(2.0), s1(0.5), 0.5).item();
  EXPECT_DOUBLE_EQ(flow::velocity_from_clean(s1(2.0), s1(zt), 0.5).item(), 1.5);
  EXPECT_THROW(flow::velocity_from_clean(s1(2.0), s1(zt), 0.9995), Error);
  auto rng = keyed_rng({5});
  const Tensor v = Tensor::randn({4, 3}, rng), z = Tensor::randn({4, 3}, rng);
  EXPECT_LT(max_abs_diff(flow::velocity_from_clean(flow::clean_from_velocity(v, z, 0.3), z, 0.3), v), 1e-12);
  EXPECT_TRUE(bitwise_equal(flow::clean_from_velocity(Tensor::zeros({4, 3}), z, 0.3), z));
}

TEST(Flow, EquivalenceOverRandomDraws) {
  auto rng = keyed_rng({6});
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const Tensor v = Tensor::randn({8}, rng), z = Tensor::randn({8}, rng), e = Tensor::randn({8}, rng);
    worst = std::max(worst, flow::equivalence_check(v, z, e, flow::sample_time(rng)));
  }
  EXPECT_LT(worst, 1e-10);
  const Tensor z = Tensor::vector({1, 2}), e = Tensor::vector({0.5, -1});
  EXPECT_EQ(flow::equivalence_check(sub(z, e), z, e, 0.4), 0.0);
}

TEST(Flow, TwoPointPosterior) {
  const Tensor data({2, 1}, {-1.0, 1.0});
  const std::vector<double> zt{0.5};
  const auto pm = flow::posterior_moments(data, zt, 0.5);
  // Weights exp(-(0.5 -+ 0.5)^2 / 0.5): e^-2 and 1.
  const double oracle = (1.0 - std::exp(-2.0)) / (1.0 + std::exp(-2.0));
  EXPECT_NEAR(pm.mean[0], oracle, 1e-12);
  EXPECT_NEAR(pm.mean[0], 0.761594, 1e-6);
  EXPECT_NEAR(pm.variance, 1.0 - oracle * oracle, 1e-12);
  const std::vector<double> f{0.0};
  const auto bv = flow::bias_variance_check(f, data, zt, 0.5);
  EXPECT_NEAR(bv.fit, 0.580026, 1e-6);
  EXPECT_NEAR(bv.variance, 0.419974, 1e-6);
  EXPECT_NEAR(bv.total, 1.0, 1e-12);
}

TEST(Flow, OnePointPosteriorIsExact) {
  const Tensor data({1, 3}, {0.2, -0.4, 1.0});
  const std::vector<double> zt{5.0, -3.0, 0.0};
  const auto pm = flow::posterior_moments(data, zt, 0.7);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(pm.mean[i], data[i]);
  EXPECT_DOUBLE_EQ(pm.variance, 0.0);
}

TEST(Flow, PosteriorLimits) {
  const Tensor data({3, 1}, {-4.0, 1.0, 6.0});
  const std::vector<double> near0{0.3};
  EXPECT_NEAR(flow::posterior_moments(data, near0, 0.0).mean[0], 1.0, 1e-12);
  const std::vector<double> near1{0.999 * 6.0};
  const auto pm = flow::posterior_moments(data, near1, 0.999);
  EXPECT_NEAR(pm.weights[2], 1.0, 1e-12);
}

TEST(Flow, BiasVarianceOverRandomSets) {
  auto rng = keyed_rng({7});
  for (int i = 0; i < 100; ++i) {
    std::uniform_int_distribution<std::size_t> npts(1, 32), ndim(1, 8);
    const std::size_t n = npts(rng), d = ndim(rng);
    const Tensor data = Tensor::randn({n, d}, rng);
    const double t = flow::sample_time(rng);
    const Tensor zt = Tensor::randn({d}, rng), f = Tensor::randn({d}, rng);
    const auto bv = flow::bias_variance_check(f.data(), data, zt.data(), t);
    EXPECT_LT(bv.discrepancy, 1e-10);
    EXPECT_NEAR(bv.total, bv.fit + bv.variance, 1e-10);
    const auto pm = flow::posterior_moments(data, zt.data(), t);
    const auto at_mean = flow::bias_variance_check(pm.mean, data, zt.data(), t);
    EXPECT_TRUE(at_mean.minimizer_is_mean);
    EXPECT_NEAR(at_mean.fit, 0.0, 1e-20);
    EXPECT_LE(at_mean.total, bv.total + 1e-12);
  }
}

TEST(Flow, TargetDescentShrinksVariance) {
  // Gradient descent on the targets alone under E ||c - z_2||^2 pulls both
  // points toward c; the empirical variance falls every step.
  double a = -1.0, b = 2.0;
  const double c = 0.3, lr = 0.1;
  double prev = 0.25 * (a - b) * (a - b);
  for (int i = 0; i < 20; ++i) {
    Tape tape;
    const Tensor za = tape.watch(s1(a)), zb = tape.watch(s1(b));
    const Tensor loss = add(squared_error(s1(c), za), squared_error(s1(c), zb));
    const auto g = tape.backward(loss);
    EXPECT_GT(g.wrt(za).item() * (a - c), 0.0);  // descent direction points toward c
    a -= lr * g.wrt(za).item();
    b -= lr * g.wrt(zb).item();
    const double var = 0.25 * (a - b) * (a - b);
    EXPECT_LT(var, prev);
    prev = var;
  }
}

TEST(Flow, PosteriorVelocityOnePoint) {
  const Tensor data({1, 2}, {1.0, -2.0});
  const std::vector<double> zt{0.0, 0.0};
  const auto v = flow::posterior_velocity(data, zt, 0.5);
  EXPECT_NEAR(v[0], 2.0, 1e-12);
  EXPECT_NEAR(v[1], -4.0, 1e-12);
}

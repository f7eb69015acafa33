#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "dsd/error.hpp"
#include "dsd/gradcheck.hpp"
#include "dsd/random.hpp"
#include "dsd/tensor.hpp"
#include "dsd/verify.hpp"

using namespace dsd;

namespace {

Tensor iota(Shape shape, double start = 0.0, double step = 1.0) {
  std::vector<double> v(numel(shape));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = start + step * static_cast<double>(i);
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace

TEST(Tensor, ShapeAndStorage) {
  const Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.dim(1), 3u);
  EXPECT_THROW(t.dim(2), ShapeError);
  EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_DOUBLE_EQ(Tensor::scalar(4.5).item(), 4.5);
  EXPECT_THROW(t.item(), ShapeError);
  EXPECT_FALSE(t.requires_grad());
}

TEST(Tensor, MatmulMatchesHandLoop) {
  auto rng = keyed_rng({1});
  const Tensor a = Tensor::randn({3, 5}, rng), b = Tensor::randn({5, 4}, rng);
  const Tensor c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{3, 4}));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 5; ++k) s += a[i * 5 + k] * b[k * 4 + j];
      EXPECT_NEAR(c[i * 4 + j], s, 1e-12);
    }
}

TEST(Tensor, BatchedMatmul) {
  auto rng = keyed_rng({2});
  const Tensor a = Tensor::randn({2, 3, 4}, rng), b = Tensor::randn({2, 4, 2}, rng);
  const Tensor c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 3, 2}));
  for (std::size_t n = 0; n < 2; ++n) {
    const Tensor an = reshape(slice(a, 0, n, n + 1), {3, 4}), bn = reshape(slice(b, 0, n, n + 1), {4, 2});
    EXPECT_LT(max_abs_diff(reshape(slice(c, 0, n, n + 1), {3, 2}), matmul(an, bn)), 1e-12);
  }
  EXPECT_THROW(matmul(a, Tensor::zeros({3, 2})), ShapeError);
}

TEST(Tensor, BroadcastSuffix) {
  const Tensor a = iota({2, 3}), b = Tensor({3}, {10, 20, 30});
  const Tensor c = add(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 3}));
  EXPECT_DOUBLE_EQ(c[4], 4 + 20);
  EXPECT_DOUBLE_EQ(mul(a, Tensor::scalar(2.0))[5], 10.0);
  EXPECT_THROW(add(a, Tensor::zeros({2})), ShapeError);
}

TEST(Tensor, Reductions) {
  const Tensor a = iota({2, 3});
  EXPECT_DOUBLE_EQ(sum(a).item(), 15.0);
  EXPECT_DOUBLE_EQ(mean(a).item(), 2.5);
  const Tensor s0 = sum(a, 0);
  EXPECT_EQ(s0.shape(), (Shape{3}));
  EXPECT_DOUBLE_EQ(s0[2], 2 + 5);
  const Tensor m1 = mean(a, 1);
  EXPECT_DOUBLE_EQ(m1[1], 4.0);
}

TEST(Tensor, TransposeConcatSlice) {
  const Tensor a = iota({2, 3, 4});
  const Tensor t = transpose(a, {2, 0, 1});
  EXPECT_EQ(t.shape(), (Shape{4, 2, 3}));
  // out[k, i, j] = a[i, j, k]
  EXPECT_DOUBLE_EQ(t[(3 * 2 + 1) * 3 + 2], a[(1 * 3 + 2) * 4 + 3]);
  const Tensor parts[] = {slice(a, 2, 0, 1), slice(a, 2, 1, 4)};
  EXPECT_TRUE(bitwise_equal(concat(parts, 2), a));
  EXPECT_THROW(slice(a, 1, 2, 5), ShapeError);
}

TEST(Tensor, SoftmaxLayerNormGelu) {
  const Tensor x({2, 3}, {1, 2, 3, -1, 0, 1});
  const Tensor s = softmax(x);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  EXPECT_NEAR(s[2], std::exp(3.0) / z, 1e-14);
  EXPECT_NEAR(s[3] + s[4] + s[5], 1.0, 1e-14);
  // Row [1, 2, 3]: mean 2, variance 2/3.
  const Tensor ln = layer_norm(x);
  EXPECT_NEAR(ln[0], -1.0 / std::sqrt(2.0 / 3.0 + 1e-6), 1e-12);
  const Tensor g = gelu(Tensor::vector({0.0, 1.0, -2.0}));
  EXPECT_DOUBLE_EQ(g[0], 0.0);
  EXPECT_NEAR(g[1], 0.5 * (1.0 + std::erf(1.0 / std::sqrt(2.0))), 1e-15);
  EXPECT_NEAR(g[2], -2.0 * 0.5 * (1.0 + std::erf(-2.0 / std::sqrt(2.0))), 1e-15);
}

TEST(Tensor, LossesAndLookups) {
  const Tensor logits({2, 3}, {0, 0, 0, 1, 2, 3});
  const std::vector<std::size_t> labels{1, 2};
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  const double expect = 0.5 * (std::log(3.0) + (std::log(z) - 3.0));
  EXPECT_NEAR(cross_entropy_with_logits(logits, labels).item(), expect, 1e-14);
  const std::vector<std::size_t> bad{0, 3};
  EXPECT_THROW(cross_entropy_with_logits(logits, bad), ShapeError);
  EXPECT_DOUBLE_EQ(squared_error(Tensor::vector({1, 2}), Tensor::vector({0, 4})).item(), 2.5);
  const Tensor c = cosine_similarity(Tensor({2, 2}, {1, 0, 1, 1}), Tensor({2, 2}, {0, 1, 2, 2}));
  EXPECT_NEAR(c[0], 0.0, 1e-15);
  EXPECT_NEAR(c[1], 1.0, 1e-12);
  const std::vector<std::size_t> idx{2, 0, 2};
  const Tensor e = embedding_lookup(iota({3, 2}), idx);
  EXPECT_EQ(e.shape(), (Shape{3, 2}));
  EXPECT_DOUBLE_EQ(e[0], 4.0);
  EXPECT_DOUBLE_EQ(e[3], 1.0);
  const Tensor r = repeat_rows(iota({2, 2}), 3);
  EXPECT_EQ(r.shape(), (Shape{6, 2}));
  EXPECT_DOUBLE_EQ(r[5], 1.0);
  EXPECT_DOUBLE_EQ(r[6], 2.0);
}

TEST(Tensor, SinusoidalEmbedding) {
  const Tensor e = sinusoidal_time_embed(Tensor::vector({0.0, 0.5}), 8);
  ASSERT_EQ(e.shape(), (Shape{2, 8}));
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_DOUBLE_EQ(e[i], 0.0);
    EXPECT_DOUBLE_EQ(e[4 + i], 1.0);
  }
  for (std::size_t i = 0; i < 4; ++i) {
    const double s = e[8 + i], c = e[12 + i];
    EXPECT_NEAR(s * s + c * c, 1.0, 1e-14);
  }
}

TEST(Autodiff, ChainRuleByHand) {
  // f = sum((a * b + a)^2), df/da = 2 (ab + a)(b + 1), df/db = 2 (ab + a) a
  const Tensor a0 = Tensor::vector({1.0, -2.0, 0.5}), b0 = Tensor::vector({3.0, 0.25, -1.0});
  Tape tape;
  const Tensor a = tape.watch(a0), b = tape.watch(b0);
  const Tensor y = add(mul(a, b), a);
  const auto g = tape.backward(sum(mul(y, y)));
  for (std::size_t i = 0; i < 3; ++i) {
    const double yi = a0[i] * b0[i] + a0[i];
    EXPECT_NEAR(g.wrt(a)[i], 2 * yi * (b0[i] + 1), 1e-14);
    EXPECT_NEAR(g.wrt(b)[i], 2 * yi * a0[i], 1e-14);
  }
}

TEST(Autodiff, FanOutAccumulates) {
  Tape tape;
  const Tensor x = tape.watch(Tensor::scalar(3.0));
  const auto g = tape.backward(add(mul(x, x), mul(x, x)));
  EXPECT_DOUBLE_EQ(g.wrt(x).item(), 12.0);
}

TEST(Autodiff, TapeIsSingleUse) {
  Tape tape;
  const Tensor x = tape.watch(Tensor::scalar(1.0));
  const Tensor y = mul(x, x);
  (void)tape.backward(y);
  EXPECT_THROW((void)tape.backward(y), Error);
}

TEST(Autodiff, NonScalarLossRejected) {
  Tape tape;
  const Tensor x = tape.watch(Tensor::vector({1.0, 2.0}));
  EXPECT_THROW((void)tape.backward(mul(x, x)), ShapeError);
}

TEST(Autodiff, MixedTapesRejected) {
  Tape t1, t2;
  const Tensor a = t1.watch(Tensor::scalar(1.0)), b = t2.watch(Tensor::scalar(2.0));
  EXPECT_THROW(add(a, b), Error);
}

TEST(Autodiff, StopGradientBlocksFlow) {
  Tape tape;
  const Tensor x = tape.watch(Tensor::vector({1.0, 2.0}));
  const Tensor y = add(mul(stop_gradient(x), x), stop_gradient(x));
  EXPECT_FALSE(stop_gradient(x).requires_grad());
  const auto g = tape.backward(sum(y));
  EXPECT_DOUBLE_EQ(g.wrt(x)[0], 1.0);
  EXPECT_DOUBLE_EQ(g.wrt(x)[1], 2.0);
}

TEST(Autodiff, ParametersBindUnderScope) {
  Parameter p("w", Tensor::vector({2.0, -1.0}));
  Parameter frozen("f", Tensor::vector({5.0, 5.0}), false);
  EXPECT_FALSE(p.var().requires_grad());
  Tape tape;
  TapeScope scope(tape);
  const Tensor loss = sum(mul(mul(p.var(), p.var()), frozen.var()));
  EXPECT_FALSE(frozen.var().requires_grad());
  const auto g = tape.backward(loss);
  EXPECT_DOUBLE_EQ(g.of(p)[0], 20.0);
  EXPECT_DOUBLE_EQ(g.of(p)[1], -10.0);
  EXPECT_DOUBLE_EQ(g.of(frozen)[0], 0.0);
}

TEST(Autodiff, UnreachedParameterGetsZeros) {
  Parameter p("w", Tensor::vector({1.0, 2.0, 3.0}));
  Parameter q("q", Tensor::scalar(1.0));
  Tape tape;
  TapeScope scope(tape);
  const auto g = tape.backward(mul(q.var(), q.var()));
  EXPECT_EQ(g.of(p).shape(), (Shape{3}));
  EXPECT_DOUBLE_EQ(sum(g.of(p)).item(), 0.0);
}

TEST(FrozenStopGradients, ReplaysRecordedValues) {
  FrozenStopGradients freeze;
  const Tensor a = stop_gradient(Tensor::scalar(1.0));
  EXPECT_EQ(freeze.recorded(), 1u);
  freeze.rewind();
  const Tensor b = stop_gradient(Tensor::scalar(7.0));
  EXPECT_DOUBLE_EQ(a.item(), 1.0);
  EXPECT_DOUBLE_EQ(b.item(), 1.0);
  freeze.rewind();
  EXPECT_THROW(stop_gradient(Tensor::zeros({2})), ShapeError);
}

TEST(GradCheck, QuadraticIsExact) {
  const TensorFunction f = [](std::span<const Tensor> in) { return sum(mul(in[0], in[0])); };
  const Tensor x = Tensor::vector({0.3, -1.2, 2.0});
  const auto r = finite_diff_check(f, std::span<const Tensor>(&x, 1));
  EXPECT_LT(r.max_relative_error, 1e-9);
}

TEST(GradCheck, DetectsWrongGradient) {
  // stop_gradient hides the second factor from the tape; with freezing off,
  // the central difference sees it and the check must fail.
  const TensorFunction f = [](std::span<const Tensor> in) { return sum(mul(in[0], stop_gradient(in[0]))); };
  const Tensor x = Tensor::vector({0.3, -1.2, 2.0});
  GradCheckOptions opt;
  opt.freeze_stop_gradients = false;
  EXPECT_GT(finite_diff_check(f, std::span<const Tensor>(&x, 1), opt).max_relative_error, 0.4);
  EXPECT_LT(finite_diff_check(f, std::span<const Tensor>(&x, 1)).max_relative_error, 1e-8);
}

class OpGradient : public ::testing::TestWithParam<OpKind> {};

TEST_P(OpGradient, MatchesCentralDifference) {
  for (std::uint64_t seed = 0; seed < 3; ++seed)
    EXPECT_LT(verify::op_gradient_error(GetParam(), seed), 1e-6) << op_name(GetParam()) << " seed " << seed;
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::ValuesIn(all_op_kinds()),
                         [](const auto& info) {
                           std::string n(op_name(info.param));
                           for (auto& c : n)
                             if (c == '-') c = '_';
                           return n;
                         });

TEST(Ops, ApplyDispatchMatchesDirect) {
  const Tensor a = iota({2, 3}, -1.0, 0.5), b = iota({3, 2}, 0.5, 0.25);
  const Tensor ab[] = {a, b};
  EXPECT_TRUE(bitwise_equal(apply(OpKind::kMatmul, ab), matmul(a, b)));
  OpAttributes attrs;
  attrs.perm = {1, 0};
  const Tensor one[] = {a};
  EXPECT_TRUE(bitwise_equal(apply(OpKind::kTranspose, one, attrs), transpose(a, {1, 0})));
  EXPECT_EQ(all_op_kinds().size(), 19u);
}

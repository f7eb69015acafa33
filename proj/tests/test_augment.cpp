#include <gtest/gtest.h>

#include <cmath>

#include "dsd/augment.hpp"
#include "dsd/error.hpp"
#include "dsd/random.hpp"

using namespace dsd;

namespace {

Tensor noise_image(std::size_t size, std::uint64_t seed) {
  auto rng = keyed_rng({seed});
  return Tensor::uniform({1, size, size}, rng, 0.0, 1.0);
}

std::size_t masked_patches(const Tensor& before, const Tensor& after, std::size_t patch, double fill) {
  const std::size_t size = before.dim(1), g = size / patch;
  std::size_t count = 0;
  for (std::size_t gy = 0; gy < g; ++gy)
    for (std::size_t gx = 0; gx < g; ++gx) {
      bool filled = true, changed = false;
      for (std::size_t y = 0; y < patch; ++y)
        for (std::size_t x = 0; x < patch; ++x) {
          const std::size_t i = (gy * patch + y) * size + gx * patch + x;
          filled = filled && after[i] == fill;
          changed = changed || after[i] != before[i];
        }
      if (filled && changed) ++count;
    }
  return count;
}

double mean_of(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v;
  return s / static_cast<double>(t.numel());
}

}  // namespace

TEST(Augment, MaskCounts) {
  const Tensor x = noise_image(32, 1);
  auto rng = keyed_rng({2});
  EXPECT_TRUE(bitwise_equal(aug::random_mask(x, 4, 0.0, 0.0, rng), x));
  EXPECT_EQ(masked_patches(x, aug::random_mask(x, 4, 0.75, 0.0, rng), 4, 0.0), 48u);
  const Tensor all = aug::random_mask(x, 4, 1.0, 0.25, rng);
  for (double v : all.data()) EXPECT_EQ(v, 0.25);
  // 16 patches at 0.3 -> round(4.8) = 5.
  EXPECT_EQ(masked_patches(noise_image(16, 3), aug::random_mask(noise_image(16, 3), 4, 0.3, 0.0, rng), 4, 0.0), 5u);
}

TEST(Augment, BlurIdentityAndConstant) {
  const Tensor x = noise_image(8, 4);
  EXPECT_TRUE(bitwise_equal(aug::gaussian_blur(x, 0.0), x));
  const Tensor c = Tensor::full({1, 8, 8}, 0.37);
  EXPECT_LT(max_abs_diff(aug::gaussian_blur(c, 1.3), c), 1e-15);
  EXPECT_THROW(aug::gaussian_blur(x, -1.0), Error);
}

TEST(Augment, BlurPreservesMean) {
  // Half-sample symmetric reflection keeps each row's mass, so the mean holds.
  for (double sigma : {0.4, 1.0, 1.5, 2.5}) {
    const Tensor x = noise_image(16, 5);
    EXPECT_NEAR(mean_of(aug::gaussian_blur(x, sigma)), mean_of(x), 1e-9) << sigma;
  }
}

TEST(Augment, BlurMatchesDirectConvolution) {
  const Tensor x = noise_image(6, 6);
  const double sigma = 0.8;
  const int r = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(2 * r + 1);
  double ks = 0.0;
  for (int i = -r; i <= r; ++i) ks += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= ks;
  const auto reflect = [](int i, int n) {
    while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
    return i;
  };
  const Tensor b = aug::gaussian_blur(x, sigma);
  for (int y = 0; y < 6; ++y)
    for (int xx = 0; xx < 6; ++xx) {
      double s = 0.0;
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) s += k[dy + r] * k[dx + r] * x[reflect(y + dy, 6) * 6 + reflect(xx + dx, 6)];
      EXPECT_NEAR(b[y * 6 + xx], s, 1e-12);
    }
}

TEST(Augment, JitterArithmetic) {
  const Tensor x = noise_image(8, 7);
  EXPECT_LT(max_abs_diff(aug::photometric_jitter(x, 0.0, 1.0, 2.0), x), 1e-15);
  const Tensor half = Tensor::full({1, 4, 4}, 0.5);
  const Tensor lifted = aug::photometric_jitter(half, 0.1, 1.0, 2.0);
  for (double v : lifted.data()) EXPECT_NEAR(v, 0.6, 1e-15);
  const Tensor p = Tensor({1, 1, 2}, {0.8, 0.3});
  const Tensor s = aug::photometric_jitter(p, 0.0, 1.0, 0.5);
  EXPECT_NEAR(s[0], 0.2, 1e-15);
  EXPECT_NEAR(s[1], 0.3, 1e-15);
}

TEST(Augment, ConfigValidation) {
  aug::AugmentConfig c;
  EXPECT_NO_THROW(c.validate());
  c.mask_ratio = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.blur_sigma_min = 2.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.p_blur = -0.1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Augment, PipelineIdentityAndDeterminism) {
  const Tensor x = noise_image(16, 8);
  aug::AugmentConfig off;
  off.p_jitter = off.p_blur = off.p_solarize = off.p_mask = 0.0;
  auto rng = keyed_rng({9});
  EXPECT_TRUE(bitwise_equal(aug::augment(x, off, rng), x));
  aug::AugmentConfig on;
  auto r1 = keyed_rng({10}), r2 = keyed_rng({10});
  const Tensor a = aug::augment(x, on, r1), b = aug::augment(x, on, r2);
  EXPECT_TRUE(bitwise_equal(a, b));
  for (double v : a.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  aug::AugmentConfig mask_only = off;
  mask_only.p_mask = 1.0;
  EXPECT_EQ(masked_patches(x, aug::augment(x, mask_only, rng), 4, 0.0), 12u);
}

TEST(Augment, BatchStreamsAreIndependent) {
  const Tensor one = noise_image(16, 11);
  std::vector<double> two(one.data().begin(), one.data().end());
  two.insert(two.end(), one.data().begin(), one.data().end());
  const Tensor batch({2, 1, 16, 16}, two);
  aug::AugmentConfig c;
  const Tensor out = aug::augment_batch(batch, c, 42);
  EXPECT_TRUE(bitwise_equal(out, aug::augment_batch(batch, c, 42)));
  EXPECT_GT(max_abs_diff(slice(out, 0, 0, 1), slice(out, 0, 1, 2)), 0.0);
  EXPECT_GT(max_abs_diff(out, aug::augment_batch(batch, c, 43)), 0.0);
}

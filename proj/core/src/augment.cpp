#include "dsd/augment.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "dsd/error.hpp"
#include "dsd/random.hpp"

namespace dsd::aug {

void AugmentConfig::validate() const {
  auto prob = [](double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string("augment: ") + name + " must lie in [0, 1]");
  };
  prob(mask_ratio, "mask_ratio");
  prob(p_jitter, "p_jitter");
  prob(p_blur, "p_blur");
  prob(p_solarize, "p_solarize");
  prob(p_mask, "p_mask");
  if (mask_patch == 0) throw ConfigError("augment: mask_patch must be >= 1");
  if (!(blur_sigma_min >= 0.0 && blur_sigma_min <= blur_sigma_max))
    throw ConfigError("augment: blur sigma range must satisfy 0 <= min <= max");
  if (!(brightness_min <= brightness_max)) throw ConfigError("augment: brightness range is not ordered");
  if (!(contrast_min >= 0.0 && contrast_min <= contrast_max))
    throw ConfigError("augment: contrast range must satisfy 0 <= min <= max");
}

namespace {

struct ImageDims {
  std::size_t c, h, w;
};

ImageDims image_dims(std::string_view op, const Tensor& image) {
  if (image.rank() != 3) throw ShapeError(std::string(op) + ": expected [channels, h, w], got " + to_string(image.shape()));
  return {image.dim(0), image.dim(1), image.dim(2)};
}

// Index into [0, n) under half-sample symmetric extension (period 2n).
std::size_t reflect(std::ptrdiff_t i, std::size_t n) {
  const auto period = static_cast<std::ptrdiff_t>(2 * n);
  std::ptrdiff_t m = i % period;
  if (m < 0) m += period;
  return static_cast<std::size_t>(m < static_cast<std::ptrdiff_t>(n) ? m : period - 1 - m);
}

}  // namespace

Tensor random_mask(const Tensor& image, std::size_t patch, double ratio, double fill, std::mt19937_64& rng) {
  const auto [c, h, w] = image_dims("random_mask", image);
  if (patch == 0 || h % patch != 0 || w % patch != 0)
    throw ShapeError("random_mask: patch " + std::to_string(patch) + " does not tile " + to_string(image.shape()));
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw Error(ErrorKind::kInvalidArgument, "random_mask: ratio outside [0, 1]");
  const std::size_t gh = h / patch, gw = w / patch, cells = gh * gw;
  const auto count = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(cells)));

  // Partial Fisher-Yates: the first `count` entries are a uniform draw
  // without replacement.
  std::vector<std::size_t> order(cells);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, cells - 1);
    std::swap(order[i], order[pick(rng)]);
  }
  std::vector<double> out(image.data().begin(), image.data().end());
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t gy = order[k] / gw, gx = order[k] % gw;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = gy * patch; y < (gy + 1) * patch; ++y)
        for (std::size_t x = gx * patch; x < (gx + 1) * patch; ++x) out[(ch * h + y) * w + x] = fill;
  }
  return Tensor(image.shape(), std::move(out));
}

Tensor gaussian_blur(const Tensor& image, double sigma) {
  const auto [c, h, w] = image_dims("gaussian_blur", image);
  if (!(sigma >= 0.0)) throw Error(ErrorKind::kInvalidArgument, "gaussian_blur: sigma must be >= 0");
  if (sigma == 0.0) return image.detached();
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(2 * radius + 1);
  for (std::ptrdiff_t k = -radius; k <= radius; ++k)
    kernel[k + radius] = std::exp(-0.5 * static_cast<double>(k * k) / (sigma * sigma));
  const double norm = std::accumulate(kernel.begin(), kernel.end(), 0.0);
  for (auto& v : kernel) v /= norm;

  const auto src = image.data();
  std::vector<double> tmp(src.size()), out(src.size());
  for (std::size_t ch = 0; ch < c; ++ch) {
    const std::size_t base = ch * h * w;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double s = 0.0;
        for (std::ptrdiff_t k = -radius; k <= radius; ++k)
          s += kernel[k + radius] * src[base + y * w + reflect(static_cast<std::ptrdiff_t>(x) + k, w)];
        tmp[base + y * w + x] = s;
      }
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double s = 0.0;
        for (std::ptrdiff_t k = -radius; k <= radius; ++k)
          s += kernel[k + radius] * tmp[base + reflect(static_cast<std::ptrdiff_t>(y) + k, h) * w + x];
        out[base + y * w + x] = std::clamp(s, 0.0, 1.0);
      }
  }
  return Tensor(image.shape(), std::move(out));
}

Tensor photometric_jitter(const Tensor& image, double brightness_delta, double contrast_scale,
                          double solarize_threshold) {
  image_dims("photometric_jitter", image);
  const auto src = image.data();
  const double mean = std::accumulate(src.begin(), src.end(), 0.0) / static_cast<double>(src.size());
  std::vector<double> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    double v = std::clamp(contrast_scale * (src[i] - mean) + mean + brightness_delta, 0.0, 1.0);
    if (v > solarize_threshold) v = 1.0 - v;
    out[i] = v;
  }
  return Tensor(image.shape(), std::move(out));
}

Tensor augment(const Tensor& image, const AugmentConfig& config, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto between = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  // Every draw happens unconditionally so the stream layout is fixed.
  const bool jitter = unit(rng) < config.p_jitter;
  const double delta = between(config.brightness_min, config.brightness_max);
  const double scale = between(config.contrast_min, config.contrast_max);
  const bool solarize = unit(rng) < config.p_solarize;
  const bool blur = unit(rng) < config.p_blur;
  const double sigma = between(config.blur_sigma_min, config.blur_sigma_max);
  const bool mask = unit(rng) < config.p_mask;

  Tensor x = image.detached();
  if (jitter) {
    x = photometric_jitter(x, delta, scale,
                           solarize ? config.solarize_threshold : std::numeric_limits<double>::infinity());
  }
  if (blur) x = gaussian_blur(x, sigma);
  if (mask) x = random_mask(x, config.mask_patch, config.mask_ratio, config.mask_fill, rng);
  return x;
}

Tensor augment_batch(const Tensor& images, const AugmentConfig& config, std::uint64_t stream_seed) {
  if (images.rank() != 4) throw ShapeError("augment_batch: expected [batch, c, h, w], got " + to_string(images.shape()));
  const std::size_t b = images.dim(0), per = images.numel() / std::max<std::size_t>(b, 1);
  const Shape one{images.dim(1), images.dim(2), images.dim(3)};
  std::vector<double> out(images.numel());
  for (std::size_t i = 0; i < b; ++i) {
    auto rng = keyed_rng({stream_seed, static_cast<std::uint64_t>(i), config.seed});
    const auto src = images.data().subspan(i * per, per);
    const Tensor x = augment(Tensor(one, {src.begin(), src.end()}), config, rng);
    std::copy(x.data().begin(), x.data().end(), out.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return Tensor(images.shape(), std::move(out));
}

}  // namespace dsd::aug

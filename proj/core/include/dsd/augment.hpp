#pragma once

// Stochastic views x+ of an image: photometric jitter, blur, patch masking.
// Images here are single samples [channels, size, size] with pixels in [0, 1].

#include <cstddef>
#include <cstdint>
#include <random>

#include "dsd/tensor.hpp"

namespace dsd::aug {

struct AugmentConfig {
  double mask_ratio = 0.75;
  double mask_fill = 0.0;
  // Masking granularity; the trainer sets this to the model patch size.
  std::size_t mask_patch = 4;
  double blur_sigma_min = 0.1;
  double blur_sigma_max = 1.5;
  double brightness_min = -0.2;
  double brightness_max = 0.2;
  double contrast_min = 0.8;
  double contrast_max = 1.2;
  double solarize_threshold = 0.5;
  double p_jitter = 0.8;
  double p_blur = 0.5;
  double p_solarize = 0.2;
  double p_mask = 1.0;
  std::uint64_t seed = 0;

  // Throws ConfigError.
  void validate() const;
};

// Replaces exactly round(ratio * patches) grid cells with `fill`.
Tensor random_mask(const Tensor& image, std::size_t patch, double ratio, double fill, std::mt19937_64& rng);

// Separable Gaussian, radius ceil(3 sigma), half-sample symmetric reflection.
Tensor gaussian_blur(const Tensor& image, double sigma);

// clamp(scale * (x - mean) + mean + delta, 0, 1), then pixels above
// `solarize_threshold` are mapped to 1 - x.
Tensor photometric_jitter(const Tensor& image, double brightness_delta, double contrast_scale,
                          double solarize_threshold);

// jitter -> blur -> mask, each gated by its probability.
Tensor augment(const Tensor& image, const AugmentConfig& config, std::mt19937_64& rng);

// Batch [batch, channels, size, size]; sample i draws from its own stream
// seeded by (stream_seed, i).
Tensor augment_batch(const Tensor& images, const AugmentConfig& config, std::uint64_t stream_seed);

}  // namespace dsd::aug

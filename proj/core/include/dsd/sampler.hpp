#pragma once

// Euler integration of a velocity field from noise (t = 0) to data (t = 1).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "dsd/network.hpp"
#include "dsd/tensor.hpp"

namespace dsd::sample {

enum class VelocitySource { kVelocityHead, kRecoveredFromClean };

struct SampleConfig {
  std::size_t steps = 64;
  double guidance = 1.0;
  std::optional<std::size_t> label;  // nullopt: unconditional
  std::size_t batch = 8;
  std::uint64_t seed = 0;
  VelocitySource source = VelocitySource::kVelocityHead;

  // Throws ConfigError.
  void validate() const;
};

// t_k = k / n for k = 0..n.
std::vector<double> time_grid(std::size_t n);

// v_uncond + s * (v_cond - v_uncond).
Tensor cfg_velocity(const Tensor& v_cond, const Tensor& v_uncond, double s);

using VelocityField = std::function<Tensor(const Tensor& z, double t)>;
using CleanField = std::function<Tensor(const Tensor& z, double t)>;

// Velocity implied by a clean-latent predictor, with t clamped to the
// training range.
VelocityField recovered_velocity(CleanField clean);

// z <- z + (1/n) v(z, t_k) for k = 0..n-1.
Tensor euler_integrate(const Tensor& z0, std::size_t n, const VelocityField& v);

// Field backed by the model for a fixed label row (null_label() when
// unconditional), including guidance.
VelocityField model_velocity(const net::UnifiedBackbone& model, const SampleConfig& config);

struct SampleResult {
  Tensor noise;    // z^0
  Tensor latents;  // z^N
  Tensor images;   // decoded [batch, channels, size, size], clamped to [0, 1]
};

// Throws NumericError when any model parameter is non-finite.
SampleResult euler_sample(const net::UnifiedBackbone& model, const SampleConfig& config);

// Pixel decoding of final latents through the diffusion pass at t = 1.
Tensor decode_latents(const net::UnifiedBackbone& model, const Tensor& latents, std::size_t label);

}  // namespace dsd::sample

#pragma once

// One weight-shared vision transformer trunk with task heads.
//
// encode:          image -> patch embed (2 stages) -> + registers -> trunk -> z
// diffuse_forward: z_t   -> latent in-proj -> + registers -> trunk (t, class
//                  scale-shift conditioned) -> features
// Heads over features: clean latent, detached velocity, pixel decoder.
// The classifier reads z; the alignment projection reads trunk layer outputs.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dsd/tensor.hpp"

namespace dsd::net {

struct ModelConfig {
  std::size_t image_size = 16;
  std::size_t channels = 1;
  std::size_t patch_size = 4;
  std::size_t trunk_layers = 2;
  std::size_t hidden_dim = 32;
  std::size_t heads = 4;
  std::size_t latent_dim = 8;
  std::size_t registers = 4;
  std::size_t classes = 10;
  std::size_t time_embed_dim = 16;
  std::size_t mlp_ratio = 2;
  std::size_t teacher_dim = 16;
  std::size_t align_layer = 1;
  double init_std = 0.02;
  // Projections drawn with std 1/sqrt(fan_in) instead of init_std.
  bool fan_in_init = true;
  // Per-token layer norm on z. Pins the latent scale so the encoder cannot
  // trade variance for magnitude.
  bool normalize_latents = true;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t tokens() const { return grid() * grid(); }
  std::size_t patch_pixels() const { return patch_size * patch_size * channels; }
  std::size_t sequence_length() const { return tokens() + registers; }
  // Row of the class table used for unconditional passes.
  std::size_t null_label() const { return classes; }
  std::size_t mid_layer() const { return (trunk_layers - 1) / 2; }

  // Throws ConfigError on violated invariants.
  void validate() const;
};

// Image batches are [batch, channels, size, size]; token grids are row-major.
Tensor patchify(const Tensor& images, std::size_t patch_size);
Tensor unpatchify(const Tensor& patches, std::size_t channels, std::size_t image_size, std::size_t patch_size);

// Per-layer trunk outputs of one pass, registers included ([batch, seq, hidden]).
struct TrunkTrace {
  std::vector<Tensor> layers;
  std::size_t sequence_length = 0;
};

struct DiffusionFeatures {
  Tensor tokens;  // [batch, tokens, hidden]
  Tensor cond;    // [batch, hidden]
  TrunkTrace trace;
};

// Parameter names belonging to the encoder path (mirrored by the EMA target).
bool is_encoder_path(std::string_view name);

class UnifiedBackbone {
 public:
  UnifiedBackbone(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }
  ParameterSet& params() noexcept { return params_; }
  const ParameterSet& params() const noexcept { return params_; }

  // z = E(x) with the online weights, or with `weights` (same names).
  Tensor encode(const Tensor& images, TrunkTrace* trace = nullptr) const;
  Tensor encode_with(const ParameterSet& weights, const Tensor& images, TrunkTrace* trace = nullptr) const;

  // labels may use null_label() for unconditional passes.
  DiffusionFeatures diffuse_forward(const Tensor& z_t, std::span<const double> t,
                                    std::span<const std::size_t> labels) const;

  Tensor predict_clean(const DiffusionFeatures& features) const;
  // Reads stop-gradiented features; only velocity.* parameters receive gradient.
  Tensor predict_velocity(const DiffusionFeatures& features) const;
  Tensor decode_patches(const DiffusionFeatures& features) const;
  Tensor decode(const DiffusionFeatures& features) const;
  Tensor classify(const Tensor& z) const;

  // -mean cosine(align_proj(layer tokens), teacher) over tokens.
  Tensor align_features(std::size_t layer_index, const TrunkTrace& trace, const Tensor& teacher_features) const;

  std::vector<const Parameter*> parameters_with_prefix(std::string_view prefix) const;

 private:
  Tensor block(const ParameterSet& w, const std::string& prefix, const Tensor& h, const Tensor* cond) const;
  Tensor head(const std::string& prefix, const Tensor& tokens, const Tensor& cond) const;
  Tensor with_registers(const ParameterSet& w, const Tensor& h) const;

  ModelConfig config_;
  ParameterSet params_;
};

// Shadow copy of the encoder path, updated only by EMA.
class TargetEncoder {
 public:
  TargetEncoder(const UnifiedBackbone& online, double decay);

  const ParameterSet& params() const noexcept { return params_; }
  ParameterSet& params() noexcept { return params_; }
  double decay() const noexcept { return decay_; }

  // sg(E_2(x)): computed from shadow weights; carries no tape handle.
  Tensor encode(const UnifiedBackbone& model, const Tensor& images, TrunkTrace* trace = nullptr) const;

 private:
  ParameterSet params_;
  double decay_;
};

// theta_2 <- m * theta_2 + (1 - m) * theta_1 for every shadow parameter.
void ema_update(const UnifiedBackbone& online, TargetEncoder& target, double m);
void ema_update(const UnifiedBackbone& online, TargetEncoder& target);

// Fixed random patch features standing in for a pretrained teacher.
class FrozenTeacher {
 public:
  FrozenTeacher(const ModelConfig& config, std::uint64_t seed);
  Tensor features(const Tensor& images) const;  // [batch, tokens, teacher_dim]

 private:
  std::size_t patch_size_;
  Tensor w1_, w2_;
};

}  // namespace dsd::net

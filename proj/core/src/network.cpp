#include "dsd/network.hpp"


#include <Eigen/Core>
#include <array>
#include <cmath>
#include <random>

#include "dsd/error.hpp"

namespace dsd::net {

void ModelConfig::validate() const {
  auto fail = [](const std::string& why) { throw ConfigError("model: " + why); };
  if (image_size == 0 || patch_size == 0 || image_size % patch_size != 0)
    fail("image_size must be a positive multiple of patch_size");
  if (channels == 0) fail("channels must be >= 1");
  if (trunk_layers == 0) fail("trunk_layers must be >= 1");
  if (hidden_dim == 0 || heads == 0 || hidden_dim % heads != 0) fail("hidden_dim must be divisible by heads");
  if (latent_dim == 0) fail("latent_dim must be >= 1");
  if (classes < 1) fail("classes must be >= 1");
  if (time_embed_dim == 0 || time_embed_dim % 2 != 0) fail("time_embed_dim must be even");
  if (mlp_ratio == 0) fail("mlp_ratio must be >= 1");
  if (teacher_dim == 0) fail("teacher_dim must be >= 1");
  if (align_layer >= trunk_layers) fail("align_layer must be < trunk_layers");
  if (!(init_std > 0.0)) fail("init_std must be > 0");
}

Tensor patchify(const Tensor& images, std::size_t p) {
  if (images.rank() != 4 || images.dim(2) != images.dim(3) || images.dim(2) % p != 0) {
    throw ShapeError("patchify: expected [batch, channels, size, size] divisible by patch " + std::to_string(p) +
                     ", got " + to_string(images.shape()));
  }
  const std::size_t b = images.dim(0), c = images.dim(1), g = images.dim(2) / p;
  Tensor x = reshape(images, {b, c, g, p, g, p});
  x = transpose(x, {0, 2, 4, 3, 5, 1});  // [b, gy, gx, py, px, c]
  return reshape(x, {b, g * g, p * p * c});
}

Tensor unpatchify(const Tensor& patches, std::size_t c, std::size_t size, std::size_t p) {
  const std::size_t g = size / p;
  if (patches.rank() != 3 || patches.dim(1) != g * g || patches.dim(2) != p * p * c) {
    throw ShapeError("unpatchify: patches " + to_string(patches.shape()) + " do not tile a " +
                     std::to_string(size) + "px image");
  }
  const std::size_t b = patches.dim(0);
  Tensor x = reshape(patches, {b, g, g, p, p, c});
  x = transpose(x, {0, 5, 1, 3, 2, 4});  // [b, c, gy, py, gx, px]
  return reshape(x, {b, c, size, size});
}

bool is_encoder_path(std::string_view name) {
  return name.starts_with("patch.") || name == "pos" || name == "registers" || name.starts_with("trunk.") ||
         name.starts_with("latent.out.");
}

namespace {

Tensor linear(const Tensor& x, const Parameter& w, const Parameter& b) { return add(matmul(x, w.var()), b.var()); }

// Multi-head self-attention over [batch, seq, hidden].
Tensor attention(const Tensor& x, const ParameterSet& w, const std::string& prefix, std::size_t heads) {
  const std::size_t b = x.dim(0), s = x.dim(1), h = x.dim(2), dh = h / heads;
  Tensor qkv = linear(x, w.at(prefix + ".qkv.w"), w.at(prefix + ".qkv.b"));
  qkv = transpose(reshape(qkv, {b, s, 3, heads, dh}), {2, 0, 3, 1, 4});  // [3, b, heads, s, dh]
  auto part = [&](std::size_t i) { return reshape(slice(qkv, 0, i, i + 1), {b * heads, s, dh}); };
  const Tensor q = part(0), k = part(1), v = part(2);
  Tensor scores = scalar_mul(matmul(q, transpose(k, 1, 2)), 1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor out = matmul(softmax(scores), v);                                 // [b*heads, s, dh]
  out = reshape(transpose(reshape(out, {b, heads, s, dh}), {0, 2, 1, 3}), {b, s, h});
  return linear(out, w.at(prefix + ".proj.w"), w.at(prefix + ".proj.b"));
}

// Splits per-sample modulation [batch, k*hidden] into k tensors [batch, seq, hidden].
std::vector<Tensor> modulation(const Tensor& cond, const Parameter& w, const Parameter& bias, std::size_t seq,
                               std::size_t parts) {
  const std::size_t b = cond.dim(0);
  const Tensor mod = linear(gelu(cond), w, bias);
  const std::size_t h = mod.dim(1) / parts;
  const Tensor rows = reshape(repeat_rows(mod, seq), {b, seq, parts * h});
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < parts; ++i) out.push_back(slice(rows, 2, i * h, (i + 1) * h));
  return out;
}

Tensor modulate(const Tensor& x, const Tensor& shift, const Tensor& scale) {
  return add(mul(x, add_scalar(scale, 1.0)), shift);
}

}  // namespace

UnifiedBackbone::UnifiedBackbone(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const auto H = config_.hidden_dim, P = config_.patch_pixels(), D = config_.latent_dim;
  const auto M = config_.mlp_ratio * H;
  const double sd = config_.init_std;
  // Fan-in scaling keeps token-specific signal at unit scale through the
  // small trunk; a fixed std of 0.02 leaves it below the shared drift.
  auto proj = [&](const std::string& name, Shape shape) {
    const double std = config_.fan_in_init ? 1.0 / std::sqrt(static_cast<double>(shape[0])) : sd;
    params_.add(name, Tensor::trunc_normal(std::move(shape), rng, std));
  };
  // Embedding tables: rows are looked up, not summed over.
  auto embed = [&](const std::string& name, Shape shape) {
    const double std = config_.fan_in_init ? 1.0 / std::sqrt(static_cast<double>(H)) : sd;
    params_.add(name, Tensor::trunc_normal(std::move(shape), rng, std));
  };
  auto zeros = [&](const std::string& name, Shape shape) { params_.add(name, Tensor::zeros(std::move(shape))); };
  auto block = [&](const std::string& p) {
    proj(p + ".qkv.w", {H, 3 * H});
    zeros(p + ".qkv.b", {3 * H});
    proj(p + ".proj.w", {H, H});
    zeros(p + ".proj.b", {H});
    proj(p + ".fc1.w", {H, M});
    zeros(p + ".fc1.b", {M});
    proj(p + ".fc2.w", {M, H});
    zeros(p + ".fc2.b", {H});
    zeros(p + ".mod.w", {H, 4 * H});
    zeros(p + ".mod.b", {4 * H});
  };

  proj("patch.in.w", {P, H});
  zeros("patch.in.b", {H});
  proj("patch.mix.w", {H, H});
  zeros("patch.mix.b", {H});
  embed("pos", {config_.tokens(), H});
  embed("registers", {config_.registers == 0 ? 1 : config_.registers, H});
  for (std::size_t i = 0; i < config_.trunk_layers; ++i) block("trunk." + std::to_string(i));
  proj("latent.out.w", {H, D});
  zeros("latent.out.b", {D});

  proj("latent.in.w", {D, H});
  zeros("latent.in.b", {H});
  proj("time.fc1.w", {config_.time_embed_dim, H});
  zeros("time.fc1.b", {H});
  proj("time.fc2.w", {H, H});
  zeros("time.fc2.b", {H});
  embed("class.table", {config_.classes + 1, H});

  for (const std::string head : {"clean", "velocity"}) {
    block(head + ".block");
    zeros(head + ".final.mod.w", {H, 2 * H});
    zeros(head + ".final.mod.b", {2 * H});
    proj(head + ".out.w", {H, D});
    zeros(head + ".out.b", {D});
  }

  proj("decode.fc1.w", {H, H});
  zeros("decode.fc1.b", {H});
  proj("decode.fc2.w", {H, P});
  zeros("decode.fc2.b", {P});

  proj("classify.w", {D, config_.classes});
  zeros("classify.b", {config_.classes});

  proj("align.proj.w", {H, config_.teacher_dim});
  zeros("align.proj.b", {config_.teacher_dim});
}

Tensor UnifiedBackbone::block(const ParameterSet& w, const std::string& prefix, const Tensor& h,
                              const Tensor* cond) const {
  const std::size_t seq = h.dim(1);
  std::vector<Tensor> mod;
  if (cond) mod = modulation(*cond, w.at(prefix + ".mod.w"), w.at(prefix + ".mod.b"), seq, 4);

  Tensor x = layer_norm(h);
  if (cond) x = modulate(x, mod[0], mod[1]);
  Tensor out = add(h, attention(x, w, prefix, config_.heads));

  x = layer_norm(out);
  if (cond) x = modulate(x, mod[2], mod[3]);
  x = gelu(linear(x, w.at(prefix + ".fc1.w"), w.at(prefix + ".fc1.b")));
  return add(out, linear(x, w.at(prefix + ".fc2.w"), w.at(prefix + ".fc2.b")));
}

Tensor UnifiedBackbone::with_registers(const ParameterSet& w, const Tensor& h) const {
  if (config_.registers == 0) return h;
  const std::size_t b = h.dim(0), r = config_.registers;
  std::vector<std::size_t> idx(b * r);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i % r;
  const Tensor regs = reshape(embedding_lookup(w.at("registers").var(), idx), {b, r, config_.hidden_dim});
  const std::array<Tensor, 2> parts{h, regs};
  return concat(parts, 1);
}

Tensor UnifiedBackbone::encode(const Tensor& images, TrunkTrace* trace) const {
  return encode_with(params_, images, trace);
}

Tensor UnifiedBackbone::encode_with(const ParameterSet& w, const Tensor& images, TrunkTrace* trace) const {
  const auto& c = config_;
  if (images.rank() != 4 || images.dim(1) != c.channels || images.dim(2) != c.image_size ||
      images.dim(3) != c.image_size) {
    throw ShapeError("encode: expected images [batch, " + std::to_string(c.channels) + ", " +
                     std::to_string(c.image_size) + ", " + std::to_string(c.image_size) + "], got " +
                     to_string(images.shape()));
  }
  Tensor h = patchify(images, c.patch_size);
  h = gelu(linear(h, w.at("patch.in.w"), w.at("patch.in.b")));
  h = linear(h, w.at("patch.mix.w"), w.at("patch.mix.b"));
  h = add(h, w.at("pos").var());
  h = with_registers(w, h);
  if (trace) {
    trace->layers.clear();
    trace->sequence_length = h.dim(1);
  }
  for (std::size_t i = 0; i < c.trunk_layers; ++i) {
    h = block(w, "trunk." + std::to_string(i), h, nullptr);
    if (trace) trace->layers.push_back(h);
  }
  const Tensor tokens = slice(h, 1, 0, c.tokens());
  const Tensor z = linear(layer_norm(tokens), w.at("latent.out.w"), w.at("latent.out.b"));
  // Per-token standardisation. Without it the encoder can cut the joint loss
  // by shrinking z, which effective rank cannot see.
  return config_.normalize_latents ? layer_norm(z) : z;
}

DiffusionFeatures UnifiedBackbone::diffuse_forward(const Tensor& z_t, std::span<const double> t,
                                                   std::span<const std::size_t> labels) const {
  const auto& c = config_;
  if (z_t.rank() != 3 || z_t.dim(1) != c.tokens() || z_t.dim(2) != c.latent_dim) {
    throw ShapeError("diffuse_forward: expected z_t [batch, " + std::to_string(c.tokens()) + ", " +
                     std::to_string(c.latent_dim) + "], got " + to_string(z_t.shape()));
  }
  const std::size_t b = z_t.dim(0);
  if (t.size() != b || labels.size() != b) {
    throw ShapeError("diffuse_forward: need one time and one label per batch row");
  }
  for (auto l : labels) {
    if (l > c.null_label()) {
      throw Error(ErrorKind::kInvalidArgument, "diffuse_forward: label " + std::to_string(l) +
                                                   " outside [0, " + std::to_string(c.null_label()) + "]");
    }
  }
  for (double ti : t) {
    if (!(ti >= 0.0 && ti <= 1.0)) throw Error(ErrorKind::kInvalidArgument, "diffuse_forward: t outside [0, 1]");
  }
  const auto& w = params_;
  Tensor h = linear(z_t, w.at("latent.in.w"), w.at("latent.in.b"));
  h = add(h, w.at("pos").var());
  h = with_registers(w, h);

  Tensor temb = sinusoidal_time_embed(Tensor({b}, {t.begin(), t.end()}), c.time_embed_dim);
  temb = gelu(linear(temb, w.at("time.fc1.w"), w.at("time.fc1.b")));
  temb = linear(temb, w.at("time.fc2.w"), w.at("time.fc2.b"));
  const Tensor cemb = embedding_lookup(w.at("class.table").var(), labels);

  DiffusionFeatures f;
  f.cond = add(temb, cemb);
  f.trace.sequence_length = h.dim(1);
  for (std::size_t i = 0; i < c.trunk_layers; ++i) {
    h = block(w, "trunk." + std::to_string(i), h, &f.cond);
    f.trace.layers.push_back(h);
  }
  f.tokens = slice(h, 1, 0, c.tokens());
  return f;
}

Tensor UnifiedBackbone::head(const std::string& prefix, const Tensor& tokens, const Tensor& cond) const {
  const auto& w = params_;
  Tensor h = block(w, prefix + ".block", tokens, &cond);
  const auto mod = modulation(cond, w.at(prefix + ".final.mod.w"), w.at(prefix + ".final.mod.b"), h.dim(1), 2);
  h = modulate(layer_norm(h), mod[0], mod[1]);
  return linear(h, w.at(prefix + ".out.w"), w.at(prefix + ".out.b"));
}

Tensor UnifiedBackbone::predict_clean(const DiffusionFeatures& f) const { return head("clean", f.tokens, f.cond); }

Tensor UnifiedBackbone::predict_velocity(const DiffusionFeatures& f) const {
  return head("velocity", stop_gradient(f.tokens), stop_gradient(f.cond));
}

Tensor UnifiedBackbone::decode_patches(const DiffusionFeatures& f) const {
  const auto& w = params_;
  Tensor h = gelu(linear(layer_norm(f.tokens), w.at("decode.fc1.w"), w.at("decode.fc1.b")));
  return linear(h, w.at("decode.fc2.w"), w.at("decode.fc2.b"));
}

Tensor UnifiedBackbone::decode(const DiffusionFeatures& f) const {
  return unpatchify(decode_patches(f), config_.channels, config_.image_size, config_.patch_size);
}

Tensor UnifiedBackbone::classify(const Tensor& z) const {
  if (z.rank() != 3 || z.dim(2) != config_.latent_dim) {
    throw ShapeError("classify: expected [batch, tokens, latent_dim], got " + to_string(z.shape()));
  }
  return linear(mean(z, 1), params_.at("classify.w"), params_.at("classify.b"));
}

Tensor UnifiedBackbone::align_features(std::size_t layer_index, const TrunkTrace& trace,
                                       const Tensor& teacher) const {
  if (layer_index >= trace.layers.size()) {
    throw Error(ErrorKind::kInvalidArgument, "align_features: layer " + std::to_string(layer_index) +
                                                 " not in a trace of " + std::to_string(trace.layers.size()));
  }
  const Tensor tokens = slice(trace.layers[layer_index], 1, 0, config_.tokens());
  const Tensor projected = linear(tokens, params_.at("align.proj.w"), params_.at("align.proj.b"));
  if (projected.shape() != teacher.shape()) {
    throw ShapeError("align_features: projected " + to_string(projected.shape()) + " vs teacher " +
                     to_string(teacher.shape()));
  }
  return scalar_mul(mean(cosine_similarity(projected, teacher)), -1.0);
}

std::vector<const Parameter*> UnifiedBackbone::parameters_with_prefix(std::string_view prefix) const {
  std::vector<const Parameter*> out;
  for (const auto& p : params_)
    if (p.name().starts_with(prefix)) out.push_back(&p);
  return out;
}

// ---------------------------------------------------------------------------

TargetEncoder::TargetEncoder(const UnifiedBackbone& online, double decay) : decay_(decay) {
  if (!(decay >= 0.0 && decay < 1.0)) throw ConfigError("ema decay must lie in [0, 1)");
  for (const auto& p : online.params()) {
    if (is_encoder_path(p.name())) params_.add(p.name(), p.value(), /*trainable=*/false);
  }
}

Tensor TargetEncoder::encode(const UnifiedBackbone& model, const Tensor& images, TrunkTrace* trace) const {
  return stop_gradient(model.encode_with(params_, images, trace));
}

void ema_update(const UnifiedBackbone& online, TargetEncoder& target, double m) {
  if (!(m >= 0.0 && m < 1.0)) throw Error(ErrorKind::kInvalidArgument, "ema_update: m must lie in [0, 1)");
  for (auto& shadow : target.params()) {
    const Tensor& src = online.params().at(shadow.name()).value();
    if (src.shape() != shadow.value().shape()) {
      throw ShapeError("ema_update: " + shadow.name() + " has shape " + to_string(shadow.value().shape()) +
                       " but online is " + to_string(src.shape()));
    }
    std::vector<double> v(src.numel());
    const auto old = shadow.value().data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = m * old[i] + (1.0 - m) * src[i];
    shadow.set_value(Tensor(src.shape(), std::move(v)));
  }
}

void ema_update(const UnifiedBackbone& online, TargetEncoder& target) { ema_update(online, target, target.decay()); }

// ---------------------------------------------------------------------------

FrozenTeacher::FrozenTeacher(const ModelConfig& config, std::uint64_t seed) : patch_size_(config.patch_size) {
  std::mt19937_64 rng(seed);
  const std::size_t p = config.patch_pixels(), hid = 2 * config.teacher_dim;
  w1_ = Tensor::randn({p, hid}, rng, 1.0 / std::sqrt(static_cast<double>(p)));
  w2_ = Tensor::randn({hid, config.teacher_dim}, rng, 1.0 / std::sqrt(static_cast<double>(hid)));
}

Tensor FrozenTeacher::features(const Tensor& images) const {
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Tensor patches = patchify(images.detached(), patch_size_);
  const std::size_t rows = patches.dim(0) * patches.dim(1);
  Eigen::Map<const RowMat> x(patches.data().data(), rows, patches.dim(2));
  Eigen::Map<const RowMat> a(w1_.data().data(), w1_.dim(0), w1_.dim(1));
  Eigen::Map<const RowMat> b(w2_.data().data(), w2_.dim(0), w2_.dim(1));
  const RowMat out = (x * a).array().tanh().matrix() * b;
  return Tensor({patches.dim(0), patches.dim(1), w2_.dim(1)}, {out.data(), out.data() + out.size()});
}

}  // namespace dsd::net

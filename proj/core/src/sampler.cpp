#include "dsd/sampler.hpp"

#include <algorithm>
#include <cmath>

#include "dsd/error.hpp"
#include "dsd/flow.hpp"
#include "dsd/random.hpp"

namespace dsd::sample {

void SampleConfig::validate() const {
  if (steps < 1) throw ConfigError("sample: steps must be >= 1");
  if (!(guidance >= 0.0)) throw ConfigError("sample: guidance must be >= 0");
  if (batch < 1) throw ConfigError("sample: batch must be >= 1");
}

std::vector<double> time_grid(std::size_t n) {
  if (n < 1) throw Error(ErrorKind::kInvalidArgument, "time_grid: n must be >= 1");
  std::vector<double> t(n + 1);
  for (std::size_t k = 0; k <= n; ++k) t[k] = static_cast<double>(k) / static_cast<double>(n);
  return t;
}

Tensor cfg_velocity(const Tensor& v_cond, const Tensor& v_uncond, double s) {
  if (v_cond.shape() != v_uncond.shape())
    throw ShapeError("cfg_velocity: " + to_string(v_cond.shape()) + " vs " + to_string(v_uncond.shape()));
  std::vector<double> out(v_cond.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v_uncond[i] + s * (v_cond[i] - v_uncond[i]);
  return Tensor(v_cond.shape(), std::move(out));
}

VelocityField recovered_velocity(CleanField clean) {
  return [clean = std::move(clean)](const Tensor& z, double t) {
    const double tc = std::min(t, flow::kTimeMax);
    return flow::velocity_from_clean(clean(z, tc), z, tc);
  };
}

Tensor euler_integrate(const Tensor& z0, std::size_t n, const VelocityField& v) {
  const auto grid = time_grid(n);
  const double h = 1.0 / static_cast<double>(n);
  std::vector<double> z(z0.data().begin(), z0.data().end());
  for (std::size_t k = 0; k < n; ++k) {
    const Tensor vk = v(Tensor(z0.shape(), z), grid[k]);
    if (vk.shape() != z0.shape()) throw ShapeError("euler_integrate: field returned " + to_string(vk.shape()));
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += h * vk[i];
  }
  return Tensor(z0.shape(), std::move(z));
}

namespace {

Tensor raw_velocity(const net::UnifiedBackbone& model, VelocitySource source, const Tensor& z, double t,
                    std::size_t label) {
  const std::size_t b = z.dim(0);
  const std::vector<std::size_t> labels(b, label);
  if (source == VelocitySource::kVelocityHead) {
    const std::vector<double> ts(b, t);
    return model.predict_velocity(model.diffuse_forward(z, ts, labels)).detached();
  }
  const double tc = std::min(t, flow::kTimeMax);
  const std::vector<double> ts(b, tc);
  return flow::velocity_from_clean(model.predict_clean(model.diffuse_forward(z, ts, labels)), z, tc).detached();
}

}  // namespace

VelocityField model_velocity(const net::UnifiedBackbone& model, const SampleConfig& config) {
  const std::size_t null = model.config().null_label();
  const std::size_t label = config.label.value_or(null);
  if (label > null) throw ConfigError("sample: label " + std::to_string(label) + " outside the class range");
  const bool guided = config.guidance != 1.0 && label != null;
  return [&model, source = config.source, label, null, guided, s = config.guidance](const Tensor& z, double t) {
    const Tensor vc = raw_velocity(model, source, z, t, label);
    if (!guided) return vc;
    return cfg_velocity(vc, raw_velocity(model, source, z, t, null), s);
  };
}

Tensor decode_latents(const net::UnifiedBackbone& model, const Tensor& latents, std::size_t label) {
  const std::size_t b = latents.dim(0);
  const std::vector<double> ones(b, 1.0);
  const std::vector<std::size_t> labels(b, label);
  const Tensor x = model.decode(model.diffuse_forward(latents, ones, labels)).detached();
  std::vector<double> v(x.data().begin(), x.data().end());
  for (auto& p : v) p = std::clamp(p, 0.0, 1.0);
  return Tensor(x.shape(), std::move(v));
}

SampleResult euler_sample(const net::UnifiedBackbone& model, const SampleConfig& config) {
  config.validate();
  for (const auto& p : model.params())
    if (!all_finite(p.value())) throw NumericError("sample: parameter " + p.name() + " holds non-finite values");
  const auto& mc = model.config();
  auto rng = keyed_rng({config.seed, 0x53414D50});  // "SAMP"
  SampleResult r;
  r.noise = Tensor::randn({config.batch, mc.tokens(), mc.latent_dim}, rng);
  r.latents = euler_integrate(r.noise, config.steps, model_velocity(model, config));
  r.images = decode_latents(model, r.latents, config.label.value_or(mc.null_label()));
  return r;
}

}  // namespace dsd::sample

#include "dsd/optim.hpp"

#include <cmath>

#include "dsd/error.hpp"

namespace dsd::optim {

double global_grad_norm(const ParameterSet& params, const Gradients& grads) {
  double s = 0.0;
  for (const auto& p : params) {
    if (!p.trainable()) continue;
    auto it = grads.by_param().find(p.id());
    if (it == grads.by_param().end()) continue;
    for (double g : it->second.data()) s += g * g;
  }
  return std::sqrt(s);
}

double clip_factor(double norm, double max_norm) {
  if (!std::isfinite(norm)) throw NumericError("gradient norm is not finite");
  return norm > max_norm ? max_norm / norm : 1.0;
}

AdamW::AdamW(const ParameterSet& params, AdamWConfig config) : config_(config) {
  if (!(config.learning_rate > 0.0)) throw ConfigError("optimizer: learning rate must be > 0");
  if (!(config.beta1 >= 0.0 && config.beta1 < 1.0 && config.beta2 >= 0.0 && config.beta2 < 1.0))
    throw ConfigError("optimizer: betas must lie in [0, 1)");
  if (!(config.weight_decay >= 0.0)) throw ConfigError("optimizer: weight decay must be >= 0");
  for (const auto& p : params) {
    if (!p.trainable()) continue;
    m_.emplace(p.name(), std::vector<double>(p.value().numel(), 0.0));
    v_.emplace(p.name(), std::vector<double>(p.value().numel(), 0.0));
  }
}

void AdamW::step(ParameterSet& params, const Gradients& grads, double grad_scale) {
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double c1 = 1.0 - std::pow(config_.beta1, t);
  const double c2 = 1.0 - std::pow(config_.beta2, t);
  const double lr = config_.learning_rate, wd = config_.weight_decay;
  for (auto& p : params) {
    if (!p.trainable()) continue;
    auto& m = m_.at(p.name());
    auto& v = v_.at(p.name());
    const Tensor g = grads.of(p);
    const auto theta = p.value().data();
    std::vector<double> next(theta.begin(), theta.end());
    for (std::size_t i = 0; i < next.size(); ++i) {
      const double gi = g[i] * grad_scale;
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * gi;
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi;
      const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.eps);
      next[i] -= lr * (update + wd * theta[i]);
    }
    p.set_value(Tensor(p.value().shape(), std::move(next)));
  }
}

}  // namespace dsd::optim

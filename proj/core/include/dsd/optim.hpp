#pragma once

// Decoupled-weight-decay adaptive-moment optimizer with global-norm clipping.

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "dsd/tensor.hpp"

namespace dsd::optim {

struct AdamWConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

// sqrt of the summed squares of every trainable parameter's gradient.
double global_grad_norm(const ParameterSet& params, const Gradients& grads);

// Factor that brings `norm` down to `max_norm`; 1 when already within it.
double clip_factor(double norm, double max_norm);

class AdamW {
 public:
  AdamW(const ParameterSet& params, AdamWConfig config);

  // theta <- theta - lr * (mhat / (sqrt(vhat) + eps) + wd * theta), with the
  // gradient multiplied by grad_scale first.
  void step(ParameterSet& params, const Gradients& grads, double grad_scale = 1.0);

  const AdamWConfig& config() const noexcept { return config_; }
  std::size_t steps() const noexcept { return steps_; }
  void set_steps(std::size_t steps) noexcept { steps_ = steps; }
  // Moment buffers keyed by parameter name.
  std::map<std::string, std::vector<double>>& first_moments() noexcept { return m_; }
  std::map<std::string, std::vector<double>>& second_moments() noexcept { return v_; }
  const std::map<std::string, std::vector<double>>& first_moments() const noexcept { return m_; }
  const std::map<std::string, std::vector<double>>& second_moments() const noexcept { return v_; }

 private:
  AdamWConfig config_;
  std::size_t steps_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

}  // namespace dsd::optim

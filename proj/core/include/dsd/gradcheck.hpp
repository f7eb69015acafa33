#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "dsd/tensor.hpp"

namespace dsd {

struct GradCheckOptions {
  double step = 1e-5;
  // 0 checks every element; otherwise a deterministic subset per tensor.
  std::size_t max_elements_per_tensor = 0;
  // Hold stop_gradient outputs at their unperturbed values.
  bool freeze_stop_gradients = true;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  // Per checked tensor: ||analytic - numeric||_inf / (||numeric||_inf + 1e-12).
  std::vector<double> per_tensor;
};

using TensorFunction = std::function<Tensor(std::span<const Tensor>)>;

// Central-difference check of a scalar function of free tensors.
GradCheckResult finite_diff_check(const TensorFunction& f, std::span<const Tensor> inputs,
                                  const GradCheckOptions& options = {});

// Same check over parameters read through Parameter::var(); each parameter is
// perturbed in place and restored.
GradCheckResult finite_diff_check(const std::function<Tensor()>& f, std::span<Parameter* const> params,
                                  const GradCheckOptions& options = {});

}  // namespace dsd

#pragma once

// The self-check battery behind `dsd verify`.

#include <cstddef>
#include <functional>
#include <cstdint>
#include <string>
#include <vector>

#include "dsd/tensor.hpp"

namespace dsd::verify {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct Report {
  std::vector<CheckResult> checks;
  std::size_t passed() const;
  std::size_t failed() const;
};

// Worst relative gradient error of one op on small random operands.
double op_gradient_error(OpKind kind, std::uint64_t seed);

// Gradient checks of every op and a minimal full model, the loss
// transformation identity, bias-variance decomposition, effective-rank
// battery and stop-gradient isolation. `progress` sees each result.
Report run_property_suite(const std::function<void(const CheckResult&)>& progress = {});

}  // namespace dsd::verify

#include "dsd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

#include "dsd/error.hpp"

namespace dsd {

namespace {

constexpr double kDenominatorFloor = 1e-12;

std::vector<std::size_t> checked_elements(std::size_t n, std::size_t limit) {
  std::vector<std::size_t> idx;
  if (limit == 0 || limit >= n) {
    idx.resize(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    return idx;
  }
  // Evenly strided subset; always includes the first and last element.
  for (std::size_t k = 0; k < limit; ++k) idx.push_back(k * (n - 1) / (limit - 1));
  idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
  return idx;
}

double scalar_value(const Tensor& t, std::size_t which) {
  if (t.numel() != 1) throw ShapeError("finite_diff_check: function must return a scalar");
  const double v = t.item();
  if (!std::isfinite(v)) {
    throw NumericError("finite_diff_check: non-finite value while perturbing parameter " +
                       std::to_string(which));
  }
  return v;
}

double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max(scale, std::abs(numeric[i]));
  }
  return diff / (scale + kDenominatorFloor);
}

void record(GradCheckResult& result, double err) {
  if (result.per_tensor.empty() || err > result.max_relative_error) {
    result.max_relative_error = err;
    result.worst_index = result.per_tensor.size();
  }
  result.per_tensor.push_back(err);
}

}  // namespace

GradCheckResult finite_diff_check(const TensorFunction& f, std::span<const Tensor> inputs,
                                  const GradCheckOptions& options) {
  if (!(options.step > 0.0)) throw Error(ErrorKind::kInvalidArgument, "finite_diff_check: step must be > 0");
  std::optional<FrozenStopGradients> freeze;
  if (options.freeze_stop_gradients) freeze.emplace();
  auto eval = [&](std::span<const Tensor> in) {
    if (freeze) freeze->rewind();
    return f(in);
  };
  std::vector<Tensor> analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    std::vector<Tensor> watched;
    for (const auto& x : inputs) watched.push_back(tape.watch(x));
    const Tensor loss = eval(watched);
    scalar_value(loss, 0);
    const Gradients grads = tape.backward(loss);
    for (const auto& w : watched) analytic.push_back(grads.wrt(w));
  }

  GradCheckResult result;
  std::vector<Tensor> work(inputs.begin(), inputs.end());
  for (std::size_t p = 0; p < inputs.size(); ++p) {
    const auto idx = checked_elements(inputs[p].numel(), options.max_elements_per_tensor);
    std::vector<double> a, n;
    for (auto j : idx) {
      std::vector<double> buf(inputs[p].data().begin(), inputs[p].data().end());
      const double x0 = buf[j];
      buf[j] = x0 + options.step;
      work[p] = Tensor(inputs[p].shape(), buf);
      const double fp = scalar_value(eval(work), p);
      buf[j] = x0 - options.step;
      work[p] = Tensor(inputs[p].shape(), buf);
      const double fm = scalar_value(eval(work), p);
      work[p] = inputs[p];
      n.push_back((fp - fm) / (2.0 * options.step));
      a.push_back(analytic[p][j]);
    }
    record(result, relative_error(a, n));
  }
  return result;
}

GradCheckResult finite_diff_check(const std::function<Tensor()>& f, std::span<Parameter* const> params,
                                  const GradCheckOptions& options) {
  if (!(options.step > 0.0)) throw Error(ErrorKind::kInvalidArgument, "finite_diff_check: step must be > 0");
  std::optional<FrozenStopGradients> freeze;
  if (options.freeze_stop_gradients) freeze.emplace();
  auto eval = [&]() {
    if (freeze) freeze->rewind();
    return f();
  };
  std::vector<Tensor> analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    const Tensor loss = eval();
    scalar_value(loss, 0);
    const Gradients grads = tape.backward(loss);
    for (const auto* p : params) analytic.push_back(grads.of(*p));
  }

  GradCheckResult result;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Parameter& param = *params[p];
    const Tensor original = param.value();
    const auto idx = checked_elements(original.numel(), options.max_elements_per_tensor);
    std::vector<double> a, n;
    for (auto j : idx) {
      std::vector<double> buf(original.data().begin(), original.data().end());
      const double x0 = buf[j];
      buf[j] = x0 + options.step;
      param.set_value(Tensor(original.shape(), buf));
      const double fp = scalar_value(eval(), p);
      buf[j] = x0 - options.step;
      param.set_value(Tensor(original.shape(), buf));
      const double fm = scalar_value(eval(), p);
      param.set_value(original);
      n.push_back((fp - fm) / (2.0 * options.step));
      a.push_back(analytic[p][j]);
    }
    record(result, relative_error(a, n));
  }
  return result;
}

}  // namespace dsd

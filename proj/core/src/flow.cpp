#include "dsd/flow.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dsd/error.hpp"

namespace dsd::flow {

namespace {

void check_same(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
}

void check_unit_time(std::string_view op, double t) {
  if (!(t >= 0.0 && t <= 1.0)) {
    throw Error(ErrorKind::kInvalidArgument, std::string(op) + ": t = " + std::to_string(t) + " outside [0, 1]");
  }
}

// Constant tensor shaped like `like` whose row i holds value(t[i]).
template <typename F>
Tensor per_row(std::string_view op, const Tensor& like, std::span<const double> t, F&& value) {
  if (like.rank() == 0 || like.dim(0) != t.size()) {
    throw ShapeError(std::string(op) + ": " + std::to_string(t.size()) + " times for shape " +
                     to_string(like.shape()));
  }
  const std::size_t row = like.numel() / t.size();
  std::vector<double> v(like.numel());
  for (std::size_t i = 0; i < t.size(); ++i) std::fill_n(v.begin() + i * row, row, value(t[i]));
  return Tensor(like.shape(), std::move(v));
}

double squared_norm(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

}  // namespace

double sample_time(std::mt19937_64& rng) {
  return std::uniform_real_distribution<double>(0.0, kTimeMax)(rng);
}

NoisySample make_noisy_sample(const Tensor& z, std::mt19937_64& rng) {
  if (z.rank() == 0) throw ShapeError("make_noisy_sample: z needs a batch axis");
  NoisySample s;
  s.z = z;
  s.t.resize(z.dim(0));
  for (auto& t : s.t) t = sample_time(rng);
  s.eps = Tensor::randn(z.shape(), rng);
  s.z_t = interpolate(z, s.eps, s.t);
  return s;
}

Tensor interpolate(const Tensor& z, const Tensor& eps, double t) {
  check_same("interpolate", z, eps);
  check_unit_time("interpolate", t);
  return add(scalar_mul(z, t), scalar_mul(eps, 1.0 - t));
}

Tensor interpolate(const Tensor& z, const Tensor& eps, std::span<const double> t) {
  check_same("interpolate", z, eps);
  for (double ti : t) check_unit_time("interpolate", ti);
  const Tensor tz = per_row("interpolate", z, t, [](double x) { return x; });
  const Tensor te = per_row("interpolate", z, t, [](double x) { return 1.0 - x; });
  return add(mul(z, tz), mul(eps, te));
}

Tensor loss_velocity(const Tensor& vhat, const Tensor& z, const Tensor& eps) {
  check_same("loss_velocity", vhat, z);
  check_same("loss_velocity", z, eps);
  return squared_error(vhat, sub(z, eps));
}

Tensor loss_velocity_decoupled(const Tensor& vhat, const Tensor& z_target, const Tensor& eps) {
  check_same("loss_velocity_decoupled", vhat, z_target);
  check_same("loss_velocity_decoupled", z_target, eps);
  return squared_error(vhat, sub(stop_gradient(z_target), eps));
}

Tensor loss_detached_velocity(const Tensor& vhat, const Tensor& z_target, const Tensor& eps) {
  check_same("loss_detached_velocity", vhat, z_target);
  check_same("loss_detached_velocity", z_target, eps);
  return squared_error(vhat, stop_gradient(sub(z_target, eps)));
}

Tensor loss_clean(const Tensor& zhat, const Tensor& z_target, double t, bool weighted) {
  check_same("loss_clean", zhat, z_target);
  if (!(t >= 0.0 && t <= kTimeMax)) {
    if (weighted && t >= 1.0) {
      throw Error(ErrorKind::kInvalidArgument, "loss_clean: weight (1-t)^-2 is singular at t = " + std::to_string(t));
    }
    throw Error(ErrorKind::kInvalidArgument, "loss_clean: t = " + std::to_string(t) + " outside [0, t_max]");
  }
  const Tensor err = squared_error(zhat, stop_gradient(z_target));
  if (!weighted) return err;
  return scalar_mul(err, 1.0 / ((1.0 - t) * (1.0 - t)));
}

Tensor loss_clean(const Tensor& zhat, const Tensor& z_target, std::span<const double> t, bool weighted) {
  check_same("loss_clean", zhat, z_target);
  for (double ti : t) {
    if (weighted && ti >= 1.0) {
      throw Error(ErrorKind::kInvalidArgument, "loss_clean: weight (1-t)^-2 is singular at t = " + std::to_string(ti));
    }
    if (!(ti >= 0.0 && ti <= kTimeMax)) {
      throw Error(ErrorKind::kInvalidArgument, "loss_clean: t = " + std::to_string(ti) + " outside [0, t_max]");
    }
  }
  const Tensor d = sub(zhat, stop_gradient(z_target));
  if (!weighted) return mean(mul(d, d));
  const Tensor w = per_row("loss_clean", zhat, t, [](double x) { return 1.0 / ((1.0 - x) * (1.0 - x)); });
  return mean(mul(mul(d, d), w));
}

Tensor velocity_from_clean(const Tensor& zhat, const Tensor& z_t, double t) {
  check_same("velocity_from_clean", zhat, z_t);
  if (!(t >= 0.0 && t <= kTimeMax)) {
    throw Error(ErrorKind::kInvalidArgument,
                "velocity_from_clean: t = " + std::to_string(t) + " exceeds t_max (1/(1-t) guard)");
  }
  return scalar_mul(sub(zhat, z_t), 1.0 / (1.0 - t));
}

Tensor velocity_from_clean(const Tensor& zhat, const Tensor& z_t, std::span<const double> t) {
  check_same("velocity_from_clean", zhat, z_t);
  for (double ti : t) {
    if (!(ti >= 0.0 && ti <= kTimeMax)) {
      throw Error(ErrorKind::kInvalidArgument,
                  "velocity_from_clean: t = " + std::to_string(ti) + " exceeds t_max (1/(1-t) guard)");
    }
  }
  const Tensor inv = per_row("velocity_from_clean", zhat, t, [](double x) { return 1.0 / (1.0 - x); });
  return mul(sub(zhat, z_t), inv);
}

Tensor clean_from_velocity(const Tensor& vhat, const Tensor& z_t, double t) {
  check_same("clean_from_velocity", vhat, z_t);
  check_unit_time("clean_from_velocity", t);
  return add(z_t, scalar_mul(vhat, 1.0 - t));
}

Tensor clean_from_velocity(const Tensor& vhat, const Tensor& z_t, std::span<const double> t) {
  check_same("clean_from_velocity", vhat, z_t);
  for (double ti : t) check_unit_time("clean_from_velocity", ti);
  const Tensor w = per_row("clean_from_velocity", vhat, t, [](double x) { return 1.0 - x; });
  return add(z_t, mul(vhat, w));
}

double equivalence_check(const Tensor& vhat, const Tensor& z, const Tensor& eps, double t) {
  check_same("equivalence_check", vhat, z);
  check_same("equivalence_check", z, eps);
  if (!(t >= 0.0 && t <= kTimeMax)) {
    throw Error(ErrorKind::kInvalidArgument, "equivalence_check: t outside [0, t_max]");
  }
  const Tensor v = sub(z, eps);
  const double lhs = squared_norm(vhat.data(), v.data());
  const Tensor z_t = interpolate(z.detached(), eps.detached(), t);
  const Tensor zhat = clean_from_velocity(vhat.detached(), z_t, t);
  const double rhs = squared_norm(zhat.data(), z.data()) / ((1.0 - t) * (1.0 - t));
  return std::abs(lhs - rhs);
}

PosteriorMoments posterior_moments(const Tensor& dataset, std::span<const double> z_t, double t) {
  if (dataset.rank() != 2 || dataset.dim(0) == 0) {
    throw ShapeError("posterior_moments: dataset must be a non-empty [points, dim] matrix");
  }
  const std::size_t n = dataset.dim(0), d = dataset.dim(1);
  if (z_t.size() != d) throw ShapeError("posterior_moments: z_t has the wrong dimension");
  if (!(t >= 0.0 && t < 1.0)) {
    throw Error(ErrorKind::kInvalidArgument, "posterior_moments: t must lie in [0, 1)");
  }
  const double s2 = 2.0 * (1.0 - t) * (1.0 - t);
  std::vector<double> logw(n);
  double max_log = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    double r = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      const double diff = z_t[k] - t * dataset[i * d + k];
      r += diff * diff;
    }
    logw[i] = -r / s2;
    max_log = std::max(max_log, logw[i]);
  }
  if (!std::isfinite(max_log)) {
    throw NumericError("posterior_moments: all weights underflow (max log-weight " + std::to_string(max_log) + ")");
  }
  PosteriorMoments pm;
  pm.support_size = n;
  pm.weights.resize(n);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    pm.weights[i] = std::exp(logw[i] - max_log);
    z += pm.weights[i];
  }
  for (auto& w : pm.weights) w /= z;
  pm.mean.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) pm.mean[k] += pm.weights[i] * dataset[i * d + k];
  for (std::size_t i = 0; i < n; ++i) {
    pm.variance += pm.weights[i] * squared_norm(dataset.data().subspan(i * d, d), pm.mean);
  }
  return pm;
}

namespace {
double expected_sq_error(std::span<const double> f, const Tensor& dataset, const PosteriorMoments& pm) {
  const std::size_t d = dataset.dim(1);
  double total = 0.0;
  for (std::size_t i = 0; i < pm.weights.size(); ++i) {
    total += pm.weights[i] * squared_norm(f, dataset.data().subspan(i * d, d));
  }
  return total;
}
}  // namespace

BiasVarianceReport bias_variance_check(std::span<const double> f, const Tensor& dataset,
                                       std::span<const double> z_t, double t) {
  const PosteriorMoments pm = posterior_moments(dataset, z_t, t);
  if (f.size() != pm.mean.size()) throw ShapeError("bias_variance_check: f has the wrong dimension");
  BiasVarianceReport r;
  r.fit = squared_norm(f, pm.mean);
  r.variance = pm.variance;
  r.total = expected_sq_error(f, dataset, pm);
  r.discrepancy = std::abs(r.total - (r.fit + r.variance));

  // The posterior mean should beat f and every small axis perturbation of itself.
  const double at_mean = expected_sq_error(pm.mean, dataset, pm);
  bool ok = at_mean <= r.total + 1e-12;
  constexpr double kProbe = 1e-3;
  std::vector<double> probe = pm.mean;
  for (std::size_t k = 0; k < probe.size() && ok; ++k) {
    for (double sign : {-1.0, 1.0}) {
      probe[k] = pm.mean[k] + sign * kProbe;
      ok = ok && expected_sq_error(probe, dataset, pm) > at_mean;
    }
    probe[k] = pm.mean[k];
  }
  r.minimizer_is_mean = ok;
  return r;
}

std::vector<double> posterior_velocity(const Tensor& dataset, std::span<const double> z_t, double t) {
  const PosteriorMoments pm = posterior_moments(dataset, z_t, t);
  std::vector<double> v(z_t.size());
  for (std::size_t k = 0; k < v.size(); ++k) v[k] = (pm.mean[k] - z_t[k]) / (1.0 - t);
  return v;
}

}  // namespace dsd::flow

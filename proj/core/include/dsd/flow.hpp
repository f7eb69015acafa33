#pragma once

// Diffusion-family objectives on the linear path z_t = t*z + (1-t)*eps.
//
// Tensors passed with per-row times carry the batch on axis 0; `t[i]` applies
// to every element of row i. All losses reduce by the mean over elements.

#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "dsd/tensor.hpp"

namespace dsd::flow {

// Upper end of time sampling; keeps 1/(1-t) bounded.
inline constexpr double kTimeMax = 1.0 - 1e-3;

struct NoisySample {
  Tensor z;
  Tensor eps;
  std::vector<double> t;  // one per row of z
  Tensor z_t;
};

double sample_time(std::mt19937_64& rng);

// Draws eps ~ N(0, I) and t ~ U[0, kTimeMax] per row, then interpolates.
NoisySample make_noisy_sample(const Tensor& z, std::mt19937_64& rng);

Tensor interpolate(const Tensor& z, const Tensor& eps, double t);
Tensor interpolate(const Tensor& z, const Tensor& eps, std::span<const double> t);

// mean((vhat - (z - eps))^2); gradients reach z.
Tensor loss_velocity(const Tensor& vhat, const Tensor& z, const Tensor& eps);
// mean((vhat - (sg(z_target) - eps))^2).
Tensor loss_velocity_decoupled(const Tensor& vhat, const Tensor& z_target, const Tensor& eps);
// mean((vhat - sg(z_target - eps))^2); trains the sampling head only.
Tensor loss_detached_velocity(const Tensor& vhat, const Tensor& z_target, const Tensor& eps);
// mean(w_t * (zhat - sg(z_target))^2), w_t = (1-t)^-2 if weighted else 1.
Tensor loss_clean(const Tensor& zhat, const Tensor& z_target, double t, bool weighted);
Tensor loss_clean(const Tensor& zhat, const Tensor& z_target, std::span<const double> t, bool weighted);

// (zhat - z_t) / (1 - t); requires t <= kTimeMax.
Tensor velocity_from_clean(const Tensor& zhat, const Tensor& z_t, double t);
Tensor velocity_from_clean(const Tensor& zhat, const Tensor& z_t, std::span<const double> t);
// z_t + (1 - t) * vhat.
Tensor clean_from_velocity(const Tensor& vhat, const Tensor& z_t, double t);
Tensor clean_from_velocity(const Tensor& vhat, const Tensor& z_t, std::span<const double> t);

// | ||vhat - (z - eps)||^2 - (1-t)^-2 ||clean_from_velocity(vhat, z_t, t) - z||^2 |
// with unreduced squared norms.
double equivalence_check(const Tensor& vhat, const Tensor& z, const Tensor& eps, double t);

// Posterior over a finite dataset (rows of `dataset`) under a uniform prior
// and p(z_t | z) = N(t z, (1-t)^2 I).
struct PosteriorMoments {
  std::vector<double> mean;
  double variance = 0.0;  // trace of the posterior covariance
  std::size_t support_size = 0;
  std::vector<double> weights;
};

PosteriorMoments posterior_moments(const Tensor& dataset, std::span<const double> z_t, double t);

struct BiasVarianceReport {
  double fit = 0.0;       // ||f - E[z | z_t]||^2
  double variance = 0.0;  // Var[z | z_t]
  double total = 0.0;     // E ||f - z||^2 by direct summation
  double discrepancy = 0.0;
  bool minimizer_is_mean = false;
};

BiasVarianceReport bias_variance_check(std::span<const double> f, const Tensor& dataset,
                                       std::span<const double> z_t, double t);

// Exact posterior-mean velocity (E[z | z_t] - z_t) / (1 - t) of a finite dataset.
std::vector<double> posterior_velocity(const Tensor& dataset, std::span<const double> z_t, double t);

}  // namespace dsd::flow

#include "dsd/rank.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "dsd/error.hpp"

namespace dsd::rank {

std::vector<double> symmetric_eigenvalues(std::vector<double> a, std::size_t n, double tolerance) {
  if (a.size() != n * n) throw ShapeError("symmetric_eigenvalues: buffer is not n x n");
  auto at = [&](std::size_t i, std::size_t j) -> double& { return a[i * n + j]; };

  double total = 0.0;
  for (double x : a) total += x * x;
  const double limit = tolerance * tolerance * total;

  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) off += at(i, j) * at(i, j);
    if (off <= limit) break;

    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = at(p, q);
        if (apq == 0.0) continue;
        const double theta = (at(q, q) - at(p, p)) / (2.0 * apq);
        const double t = std::copysign(1.0, theta) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = at(k, p), akq = at(k, q);
          at(k, p) = c * akp - s * akq;
          at(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = at(p, k), aqk = at(q, k);
          at(p, k) = c * apk - s * aqk;
          at(q, k) = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> eig(n);
  for (std::size_t i = 0; i < n; ++i) eig[i] = at(i, i);
  std::sort(eig.begin(), eig.end(), std::greater<>());
  return eig;
}

std::vector<double> singular_values(const Tensor& m) {
  if (m.rank() != 2 || m.dim(0) == 0 || m.dim(1) == 0) {
    throw ShapeError("singular_values: expected a non-empty matrix, got " + to_string(m.shape()));
  }
  if (!all_finite(m)) throw NumericError("singular_values: matrix has non-finite entries");
  using ColMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic>;
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const RowMat> M(m.data().data(), m.dim(0), m.dim(1));
  // One-sided Jacobi: the same rotations as cyclic Jacobi on the smaller Gram
  // matrix, applied to the columns directly. Forming the Gram matrix squares
  // the condition number and leaves ~1e-8 relative noise where sigma is zero.
  ColMat a = m.dim(0) >= m.dim(1) ? ColMat(M) : ColMat(M.transpose());
  const Eigen::Index k = a.cols();
  for (int sweep = 0; sweep < 100; ++sweep) {
    bool rotated = false;
    for (Eigen::Index p = 0; p + 1 < k; ++p) {
      for (Eigen::Index q = p + 1; q < k; ++q) {
        const double alpha = a.col(p).squaredNorm(), beta = a.col(q).squaredNorm();
        const double gamma = a.col(p).dot(a.col(q));
        if (gamma == 0.0 || std::abs(gamma) <= kJacobiTolerance * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double theta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, theta) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        const Eigen::VectorXd ap = a.col(p);
        a.col(p) = c * ap - s * a.col(q);
        a.col(q) = s * ap + c * a.col(q);
      }
    }
    if (!rotated) break;
  }
  std::vector<double> sv(static_cast<std::size_t>(k));
  for (Eigen::Index j = 0; j < k; ++j) sv[static_cast<std::size_t>(j)] = a.col(j).norm();
  std::sort(sv.begin(), sv.end(), std::greater<>());
  return sv;
}

double effective_rank_of_spectrum(std::span<const double> sv, double cutoff) {
  const double smax = sv.empty() ? 0.0 : *std::max_element(sv.begin(), sv.end());
  if (!(smax > 0.0)) throw NumericError("erank undefined for the zero matrix");
  double total = 0.0;
  std::size_t kept = 0;
  for (double s : sv) {
    if (s > cutoff * smax) {
      total += s;
      ++kept;
    }
  }
  double entropy = 0.0;
  for (double s : sv) {
    if (!(s > cutoff * smax)) continue;
    const double p = s / total;
    if (p > 0.0) entropy -= p * std::log(p);
  }
  return std::clamp(std::exp(entropy), 1.0, static_cast<double>(kept));
}

double effective_rank(const Tensor& m) { return effective_rank_of_spectrum(singular_values(m)); }

SpectrumReport spectrum(const Tensor& m) {
  SpectrumReport r;
  r.singular_values = singular_values(m);
  r.erank = effective_rank_of_spectrum(r.singular_values);
  r.rows = m.dim(0);
  r.cols = m.dim(1);
  return r;
}

Tensor batch_latent_matrix(const Tensor& latents) {
  if (latents.rank() == 2) return latents.detached();
  if (latents.rank() != 3) {
    throw ShapeError("batch_latent_matrix: expected [batch, tokens, dim], got " + to_string(latents.shape()));
  }
  const std::size_t rows = latents.dim(0) * latents.dim(1);
  return Tensor({rows, latents.dim(2)}, {latents.data().begin(), latents.data().end()});
}

double rank_gap(const Tensor& target, const Tensor& predicted) {
  return effective_rank(batch_latent_matrix(target)) - effective_rank(batch_latent_matrix(predicted));
}

}  // namespace dsd::rank

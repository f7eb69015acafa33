#pragma once

// Singular spectra and effective rank of representation batches.

#include <cstddef>
#include <span>
#include <vector>

#include "dsd/tensor.hpp"

namespace dsd::rank {

// Singular values at or below this fraction of the largest are treated as zero.
inline constexpr double kRelativeCutoff = 1e-12;
// Eigenvalue Jacobi stops when the off-diagonal Frobenius mass falls to this
// fraction of the full norm; one-sided Jacobi when every column pair has
// |cos| at or below it.
inline constexpr double kJacobiTolerance = 1e-12;

struct SpectrumReport {
  std::vector<double> singular_values;  // descending, >= 0
  double erank = 1.0;
  double threshold = kRelativeCutoff;
  std::size_t rows = 0;
  std::size_t cols = 0;
};

// Eigenvalues (descending) of a symmetric n x n row-major matrix by cyclic
// Jacobi rotations.
std::vector<double> symmetric_eigenvalues(std::vector<double> a, std::size_t n,
                                          double tolerance = kJacobiTolerance);

// One-sided Jacobi over the columns of the thinner orientation. `m` must be
// rank-2 with finite entries.
std::vector<double> singular_values(const Tensor& m);

// exp of the entropy of the normalized retained spectrum.
double effective_rank_of_spectrum(std::span<const double> singular_values,
                                  double cutoff = kRelativeCutoff);
double effective_rank(const Tensor& m);
SpectrumReport spectrum(const Tensor& m);

// [batch, tokens, dim] -> [batch * tokens, dim]; rank-2 input passes through.
Tensor batch_latent_matrix(const Tensor& latents);

// erank(target) - erank(predicted); positive when the target is richer.
double rank_gap(const Tensor& target, const Tensor& predicted);

}  // namespace dsd::rank

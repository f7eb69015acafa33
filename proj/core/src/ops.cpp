#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "dsd/error.hpp"
#include "dsd/tensor.hpp"

namespace dsd {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

[[noreturn]] void shape_fail(std::string_view op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " +
                   to_string(b));
}

[[noreturn]] void shape_fail(std::string_view op, const std::string& why, const Shape& a) {
  throw ShapeError(std::string(op) + ": " + why + " (shape " + to_string(a) + ")");
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Output shape of a broadcasting binary op.
Shape broadcast_shape(std::string_view op, const Shape& a, const Shape& b) {
  if (a == b) return a;
  const auto na = numel(a);
  const auto nb = numel(b);
  if (nb == 1 && nb <= na) return a;
  if (na == 1) return b;
  if (is_suffix(b, a)) return a;
  if (is_suffix(a, b)) return b;
  shape_fail(op, a, b);
}

// Visits (i, i mod na, i mod nb) for the broadcast pair; blocks keep the inner
// loop free of modulo arithmetic.
template <typename F>
void for_each_broadcast(std::size_t n, std::size_t na, std::size_t nb, F&& f) {
  if (na == n && nb == n) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
  } else if (na == n) {
    for (std::size_t base = 0; base < n; base += nb)
      for (std::size_t j = 0; j < nb; ++j) f(base + j, base + j, j);
  } else {
    for (std::size_t base = 0; base < n; base += na)
      for (std::size_t j = 0; j < na; ++j) f(base + j, j, base + j);
  }
}

std::vector<double> copy_data(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

std::array<Tensor, 1> ops1(const Tensor& a) { return {a}; }
std::array<Tensor, 2> ops2(const Tensor& a, const Tensor& b) { return {a, b}; }

// Row view for last-axis ops.
struct Rows {
  std::size_t count;
  std::size_t width;
};

Rows last_axis_rows(std::string_view op, const Tensor& a) {
  if (a.rank() == 0 || a.shape().back() == 0) shape_fail(op, "needs a non-empty last axis", a.shape());
  return {a.numel() / a.shape().back(), a.shape().back()};
}

}  // namespace

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kMatmul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kScalarMul: return "scalar-mul";
    case OpKind::kMean: return "mean";
    case OpKind::kSum: return "sum";
    case OpKind::kReshape: return "reshape";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kConcat: return "concat";
    case OpKind::kSlice: return "slice";
    case OpKind::kGelu: return "gelu";
    case OpKind::kLayerNorm: return "layer-norm";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kSquaredError: return "squared-error";
    case OpKind::kCrossEntropyWithLogits: return "cross-entropy-with-logits";
    case OpKind::kCosineSimilarity: return "cosine-similarity";
    case OpKind::kEmbeddingLookup: return "embedding-lookup";
    case OpKind::kSinusoidalTimeEmbed: return "sinusoidal-time-embed";
  }
  return "unknown";
}

const std::vector<OpKind>& all_op_kinds() {
  static const std::vector<OpKind> kinds = {
      OpKind::kMatmul,       OpKind::kAdd,
      OpKind::kSub,          OpKind::kMul,
      OpKind::kScalarMul,    OpKind::kMean,
      OpKind::kSum,          OpKind::kReshape,
      OpKind::kTranspose,    OpKind::kConcat,
      OpKind::kSlice,        OpKind::kGelu,
      OpKind::kLayerNorm,    OpKind::kSoftmax,
      OpKind::kSquaredError, OpKind::kCrossEntropyWithLogits,
      OpKind::kCosineSimilarity, OpKind::kEmbeddingLookup,
      OpKind::kSinusoidalTimeEmbed,
  };
  return kinds;
}

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() >= 1 && b.rank() == 2) {
    const std::size_t k = a.shape().back();
    if (k != b.dim(0)) shape_fail("matmul", a.shape(), b.shape());
    const std::size_t m = a.numel() / k;
    const std::size_t n = b.dim(1);
    Shape out_shape = a.shape();
    out_shape.back() = n;
    std::vector<double> out(m * n);
    MutMap(out.data(), m, n).noalias() = ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
    return Tape::make_result(
        "matmul", std::move(out_shape), std::move(out), ops2(a, b),
        [a = a.detached(), b = b.detached(), m, k, n](std::span<const double> g,
                                                      std::span<std::span<double>> gin) {
          ConstMap G(g.data(), m, n);
          if (!gin[0].empty())
            MutMap(gin[0].data(), m, k).noalias() += G * ConstMap(b.data().data(), k, n).transpose();
          if (!gin[1].empty())
            MutMap(gin[1].data(), k, n).noalias() += ConstMap(a.data().data(), m, k).transpose() * G;
        });
  }
  if (a.rank() == 3 && b.rank() == 3) {
    const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    if (b.dim(0) != batch || b.dim(1) != k) shape_fail("matmul", a.shape(), b.shape());
    std::vector<double> out(batch * m * n);
    for (std::size_t i = 0; i < batch; ++i) {
      MutMap(out.data() + i * m * n, m, n).noalias() =
          ConstMap(a.data().data() + i * m * k, m, k) * ConstMap(b.data().data() + i * k * n, k, n);
    }
    return Tape::make_result(
        "matmul", {batch, m, n}, std::move(out), ops2(a, b),
        [a = a.detached(), b = b.detached(), batch, m, k, n](std::span<const double> g,
                                                             std::span<std::span<double>> gin) {
          for (std::size_t i = 0; i < batch; ++i) {
            ConstMap G(g.data() + i * m * n, m, n);
            if (!gin[0].empty())
              MutMap(gin[0].data() + i * m * k, m, k).noalias() +=
                  G * ConstMap(b.data().data() + i * k * n, k, n).transpose();
            if (!gin[1].empty())
              MutMap(gin[1].data() + i * k * n, k, n).noalias() +=
                  ConstMap(a.data().data() + i * m * k, m, k).transpose() * G;
          }
        });
  }
  shape_fail("matmul", a.shape(), b.shape());
}

Tensor add(const Tensor& a, const Tensor& b) {
  Shape shape = broadcast_shape("add", a.shape(), b.shape());
  const std::size_t n = numel(shape), na = a.numel(), nb = b.numel();
  std::vector<double> out(n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for_each_broadcast(n, na, nb, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = pa[ia] + pb[ib]; });
  return Tape::make_result("add", std::move(shape), std::move(out), ops2(a, b),
                           [n, na, nb](std::span<const double> g, std::span<std::span<double>> gin) {
                             if (!gin[0].empty())
                               for_each_broadcast(n, na, nb, [&](std::size_t i, std::size_t ia, std::size_t) { gin[0][ia] += g[i]; });
                             if (!gin[1].empty())
                               for_each_broadcast(n, na, nb, [&](std::size_t i, std::size_t, std::size_t ib) { gin[1][ib] += g[i]; });
                           });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Shape shape = broadcast_shape("sub", a.shape(), b.shape());
  const std::size_t n = numel(shape), na = a.numel(), nb = b.numel();
  std::vector<double> out(n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for_each_broadcast(n, na, nb, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = pa[ia] - pb[ib]; });
  return Tape::make_result("sub", std::move(shape), std::move(out), ops2(a, b),
                           [n, na, nb](std::span<const double> g, std::span<std::span<double>> gin) {
                             if (!gin[0].empty())
                               for_each_broadcast(n, na, nb, [&](std::size_t i, std::size_t ia, std::size_t) { gin[0][ia] += g[i]; });
                             if (!gin[1].empty())
                               for_each_broadcast(n, na, nb, [&](std::size_t i, std::size_t, std::size_t ib) { gin[1][ib] -= g[i]; });
                           });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Shape shape = broadcast_shape("mul", a.shape(), b.shape());
  const std::size_t n = numel(shape), na = a.numel(), nb = b.numel();
  std::vector<double> out(n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for_each_broadcast(n, na, nb, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = pa[ia] * pb[ib]; });
  return Tape::make_result(
      "mul", std::move(shape), std::move(out), ops2(a, b),
      [a = a.detached(), b = b.detached(), n, na, nb](std::span<const double> g,
                                                      std::span<std::span<double>> gin) {
        const double* pa = a.data().data();
        const double* pb = b.data().data();
        if (!gin[0].empty())
          for_each_broadcast(n, na, nb, [&](std::size_t i, std::size_t ia, std::size_t ib) { gin[0][ia] += g[i] * pb[ib]; });
        if (!gin[1].empty())
          for_each_broadcast(n, na, nb, [&](std::size_t i, std::size_t ia, std::size_t ib) { gin[1][ib] += g[i] * pa[ia]; });
      });
}

Tensor scalar_mul(const Tensor& a, double c) {
  std::vector<double> out = copy_data(a);
  for (auto& x : out) x *= c;
  return Tape::make_result("scalar-mul", a.shape(), std::move(out), ops1(a),
                           [c](std::span<const double> g, std::span<std::span<double>> gin) {
                             for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += c * g[i];
                           });
}

Tensor add_scalar(const Tensor& a, double c) { return add(a, Tensor::scalar(c)); }

Tensor sum(const Tensor& a) {
  const double s = std::accumulate(a.data().begin(), a.data().end(), 0.0);
  return Tape::make_result("sum", {}, {s}, ops1(a),
                           [](std::span<const double> g, std::span<std::span<double>> gin) {
                             for (auto& x : gin[0]) x += g[0];
                           });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) shape_fail("mean", "empty tensor", a.shape());
  const double inv = 1.0 / static_cast<double>(a.numel());
  const double s = std::accumulate(a.data().begin(), a.data().end(), 0.0) * inv;
  return Tape::make_result("mean", {}, {s}, ops1(a),
                           [inv](std::span<const double> g, std::span<std::span<double>> gin) {
                             for (auto& x : gin[0]) x += g[0] * inv;
                           });
}

namespace {

Tensor reduce_axis(std::string_view op, const Tensor& a, std::size_t axis, double scale_by_count) {
  if (axis >= a.rank()) shape_fail(op, "axis " + std::to_string(axis) + " out of range", a.shape());
  const auto& s = a.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t d = s[axis];
  const double scale = scale_by_count > 0 ? 1.0 / static_cast<double>(d) : 1.0;
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out_shape.push_back(s[i]);
  std::vector<double> out(outer * inner, 0.0);
  const double* pa = a.data().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += pa[(o * d + j) * inner + i];
  for (auto& x : out) x *= scale;
  return Tape::make_result(op, std::move(out_shape), std::move(out), ops1(a),
                           [outer, d, inner, scale](std::span<const double> g,
                                                    std::span<std::span<double>> gin) {
                             for (std::size_t o = 0; o < outer; ++o)
                               for (std::size_t j = 0; j < d; ++j)
                                 for (std::size_t i = 0; i < inner; ++i)
                                   gin[0][(o * d + j) * inner + i] += scale * g[o * inner + i];
                           });
}

}  // namespace

Tensor sum(const Tensor& a, std::size_t axis) { return reduce_axis("sum", a, axis, 0.0); }
Tensor mean(const Tensor& a, std::size_t axis) { return reduce_axis("mean", a, axis, 1.0); }

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel()) shape_fail("reshape", a.shape(), shape);
  return Tape::make_result("reshape", std::move(shape), copy_data(a), ops1(a),
                           [](std::span<const double> g, std::span<std::span<double>> gin) {
                             for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
                           });
}

namespace {

// For each output linear index, calls f(out_index, in_index).
template <typename F>
void for_each_permuted(const Shape& in_shape, const std::vector<std::size_t>& perm, F&& f) {
  const std::size_t r = in_shape.size();
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
  Shape out_shape(r);
  std::vector<std::size_t> stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in_shape[perm[i]];
    stride[i] = in_strides[perm[i]];
  }
  const std::size_t n = numel(in_shape);
  if (n == 0) return;
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  // Innermost output axis advances in a tight loop.
  const std::size_t last = r ? out_shape[r - 1] : 1;
  const std::size_t last_stride = r ? stride[r - 1] : 0;
  for (std::size_t o = 0; o < n; o += last) {
    for (std::size_t j = 0; j < last; ++j) f(o + j, src + j * last_stride);
    // Increment the multi-index over axes [0, r-1).
    for (std::size_t ax = r - 1; ax-- > 0;) {
      ++idx[ax];
      src += stride[ax];
      if (idx[ax] < out_shape[ax]) break;
      src -= stride[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
}

}  // namespace

Tensor transpose(const Tensor& a, const std::vector<std::size_t>& perm) {
  const std::size_t r = a.rank();
  if (perm.size() != r) shape_fail("transpose", "permutation rank mismatch", a.shape());
  std::vector<bool> seen(r, false);
  for (auto p : perm) {
    if (p >= r || seen[p]) shape_fail("transpose", "invalid permutation", a.shape());
    seen[p] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = a.shape()[perm[i]];
  std::vector<double> out(a.numel());
  const double* pa = a.data().data();
  for_each_permuted(a.shape(), perm, [&](std::size_t o, std::size_t i) { out[o] = pa[i]; });
  return Tape::make_result("transpose", std::move(out_shape), std::move(out), ops1(a),
                           [in_shape = a.shape(), perm](std::span<const double> g,
                                                        std::span<std::span<double>> gin) {
                             for_each_permuted(in_shape, perm,
                                               [&](std::size_t o, std::size_t i) { gin[0][i] += g[o]; });
                           });
}

Tensor transpose(const Tensor& a, std::size_t axis0, std::size_t axis1) {
  if (axis0 >= a.rank() || axis1 >= a.rank()) shape_fail("transpose", "axis out of range", a.shape());
  std::vector<std::size_t> perm(a.rank());
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[axis0], perm[axis1]);
  return transpose(a, perm);
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) shape_fail("concat", "axis out of range", s0);
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  std::vector<std::size_t> widths;
  std::size_t total_axis = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if (s.size() != s0.size()) shape_fail("concat", s0, s);
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != s0[i]) shape_fail("concat", s0, s);
    widths.push_back(s[axis] * inner);
    total_axis += s[axis];
  }
  Shape out_shape = s0;
  out_shape[axis] = total_axis;
  const std::size_t row = total_axis * inner;
  std::vector<double> out(outer * row);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const double* src = parts[k].data().data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(src + o * widths[k], widths[k], out.data() + o * row + offset);
    offset += widths[k];
  }
  return Tape::make_result("concat", std::move(out_shape), std::move(out), parts,
                           [outer, row, widths](std::span<const double> g,
                                                std::span<std::span<double>> gin) {
                             std::size_t off = 0;
                             for (std::size_t k = 0; k < widths.size(); ++k) {
                               if (!gin[k].empty()) {
                                 for (std::size_t o = 0; o < outer; ++o)
                                   for (std::size_t j = 0; j < widths[k]; ++j)
                                     gin[k][o * widths[k] + j] += g[o * row + off + j];
                               }
                               off += widths[k];
                             }
                           });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= a.rank()) shape_fail("slice", "axis out of range", a.shape());
  if (begin > end || end > a.dim(axis)) {
    shape_fail("slice", "range [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid",
               a.shape());
  }
  const auto& s = a.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t in_row = s[axis] * inner;
  const std::size_t out_row = (end - begin) * inner;
  const std::size_t off = begin * inner;
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  std::vector<double> out(outer * out_row);
  const double* pa = a.data().data();
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(pa + o * in_row + off, out_row, out.data() + o * out_row);
  return Tape::make_result("slice", std::move(out_shape), std::move(out), ops1(a),
                           [outer, in_row, out_row, off](std::span<const double> g,
                                                         std::span<std::span<double>> gin) {
                             for (std::size_t o = 0; o < outer; ++o)
                               for (std::size_t j = 0; j < out_row; ++j)
                                 gin[0][o * in_row + off + j] += g[o * out_row + j];
                           });
}

Tensor gelu(const Tensor& a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  std::vector<double> out(a.numel());
  const double* pa = a.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * pa[i] * (1.0 + std::erf(pa[i] * kInvSqrt2));
  return Tape::make_result("gelu", a.shape(), std::move(out), ops1(a),
                           [a = a.detached()](std::span<const double> g, std::span<std::span<double>> gin) {
                             constexpr double kInvSqrt2Pi = 0.39894228040143267794;
                             const double* pa = a.data().data();
                             for (std::size_t i = 0; i < g.size(); ++i) {
                               const double x = pa[i];
                               const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                               const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                               gin[0][i] += g[i] * (cdf + x * pdf);
                             }
                           });
}

Tensor layer_norm(const Tensor& a, double eps) {
  const auto [rows, w] = last_axis_rows("layer-norm", a);
  std::vector<double> out(a.numel());
  std::vector<double> inv_std(rows);
  const double* pa = a.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = pa + r * w;
    double mu = 0.0;
    for (std::size_t j = 0; j < w; ++j) mu += x[j];
    mu /= static_cast<double>(w);
    double var = 0.0;
    for (std::size_t j = 0; j < w; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<double>(w);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < w; ++j) out[r * w + j] = (x[j] - mu) * is;
  }
  Tensor result_values(a.shape(), out);
  return Tape::make_result(
      "layer-norm", a.shape(), std::move(out), ops1(a),
      [xhat = result_values, inv_std = std::move(inv_std), rows, w](std::span<const double> g,
                                                                    std::span<std::span<double>> gin) {
        const double* xh = xhat.data().data();
        const double inv_w = 1.0 / static_cast<double>(w);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = g.data() + r * w;
          const double* xr = xh + r * w;
          double mg = 0.0, mgx = 0.0;
          for (std::size_t j = 0; j < w; ++j) {
            mg += gr[j];
            mgx += gr[j] * xr[j];
          }
          mg *= inv_w;
          mgx *= inv_w;
          for (std::size_t j = 0; j < w; ++j) gin[0][r * w + j] += inv_std[r] * (gr[j] - mg - xr[j] * mgx);
        }
      });
}

Tensor softmax(const Tensor& a) {
  const auto [rows, w] = last_axis_rows("softmax", a);
  std::vector<double> out(a.numel());
  const double* pa = a.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = pa + r * w;
    double* y = out.data() + r * w;
    const double mx = *std::max_element(x, x + w);
    double z = 0.0;
    for (std::size_t j = 0; j < w; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    for (std::size_t j = 0; j < w; ++j) y[j] /= z;
  }
  Tensor y_values(a.shape(), out);
  return Tape::make_result("softmax", a.shape(), std::move(out), ops1(a),
                           [y = y_values, rows, w](std::span<const double> g, std::span<std::span<double>> gin) {
                             const double* py = y.data().data();
                             for (std::size_t r = 0; r < rows; ++r) {
                               double dot = 0.0;
                               for (std::size_t j = 0; j < w; ++j) dot += g[r * w + j] * py[r * w + j];
                               for (std::size_t j = 0; j < w; ++j)
                                 gin[0][r * w + j] += py[r * w + j] * (g[r * w + j] - dot);
                             }
                           });
}

Tensor squared_error(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail("squared-error", a.shape(), b.shape());
  if (a.numel() == 0) shape_fail("squared-error", "empty tensor", a.shape());
  const std::size_t n = a.numel();
  std::vector<double> diff(n);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    diff[i] = a[i] - b[i];
    s += diff[i] * diff[i];
  }
  const double inv = 1.0 / static_cast<double>(n);
  return Tape::make_result("squared-error", {}, {s * inv}, ops2(a, b),
                           [diff = std::move(diff), inv](std::span<const double> g,
                                                         std::span<std::span<double>> gin) {
                             const double c = 2.0 * inv * g[0];
                             for (std::size_t i = 0; i < diff.size(); ++i) {
                               if (!gin[0].empty()) gin[0][i] += c * diff[i];
                               if (!gin[1].empty()) gin[1][i] -= c * diff[i];
                             }
                           });
}

Tensor cross_entropy_with_logits(const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2) shape_fail("cross-entropy-with-logits", "logits must be [batch, classes]", logits.shape());
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  if (labels.size() != b) {
    throw ShapeError("cross-entropy-with-logits: " + std::to_string(labels.size()) +
                     " labels for logits " + to_string(logits.shape()));
  }
  std::vector<double> probs(b * c);
  double loss = 0.0;
  const double* pl = logits.data().data();
  for (std::size_t r = 0; r < b; ++r) {
    if (labels[r] >= c) {
      throw ShapeError("cross-entropy-with-logits: label " + std::to_string(labels[r]) +
                       " out of range for " + std::to_string(c) + " classes");
    }
    const double* x = pl + r * c;
    const double mx = *std::max_element(x, x + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      probs[r * c + j] = std::exp(x[j] - mx);
      z += probs[r * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] /= z;
    loss += (mx + std::log(z)) - x[labels[r]];
  }
  const double inv_b = 1.0 / static_cast<double>(b);
  return Tape::make_result(
      "cross-entropy-with-logits", {}, {loss * inv_b}, ops1(logits),
      [probs = std::move(probs), lab = std::vector<std::size_t>(labels.begin(), labels.end()), b, c,
       inv_b](std::span<const double> g, std::span<std::span<double>> gin) {
        for (std::size_t r = 0; r < b; ++r)
          for (std::size_t j = 0; j < c; ++j) {
            const double target = j == lab[r] ? 1.0 : 0.0;
            gin[0][r * c + j] += g[0] * inv_b * (probs[r * c + j] - target);
          }
      });
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail("cosine-similarity", a.shape(), b.shape());
  const auto [rows, w] = last_axis_rows("cosine-similarity", a);
  constexpr double kTiny = 1e-12;
  std::vector<double> out(rows), na(rows), nb(rows);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    double dot = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t j = 0; j < w; ++j) {
      dot += pa[r * w + j] * pb[r * w + j];
      aa += pa[r * w + j] * pa[r * w + j];
      bb += pb[r * w + j] * pb[r * w + j];
    }
    na[r] = std::max(std::sqrt(aa), kTiny);
    nb[r] = std::max(std::sqrt(bb), kTiny);
    out[r] = dot / (na[r] * nb[r]);
  }
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  Tensor cosines(out_shape, out);
  return Tape::make_result(
      "cosine-similarity", std::move(out_shape), std::move(out), ops2(a, b),
      [a = a.detached(), b = b.detached(), cosines, na = std::move(na), nb = std::move(nb), rows,
       w](std::span<const double> g, std::span<std::span<double>> gin) {
        const double* pa = a.data().data();
        const double* pb = b.data().data();
        for (std::size_t r = 0; r < rows; ++r) {
          const double cs = cosines[r];
          const double inv = 1.0 / (na[r] * nb[r]);
          for (std::size_t j = 0; j < w; ++j) {
            const double x = pa[r * w + j], y = pb[r * w + j];
            if (!gin[0].empty()) gin[0][r * w + j] += g[r] * (y * inv - cs * x / (na[r] * na[r]));
            if (!gin[1].empty()) gin[1][r * w + j] += g[r] * (x * inv - cs * y / (nb[r] * nb[r]));
          }
        }
      });
}

Tensor embedding_lookup(const Tensor& table, std::span<const std::size_t> indices) {
  if (table.rank() != 2) shape_fail("embedding-lookup", "table must be [rows, width]", table.shape());
  const std::size_t rows = table.dim(0), w = table.dim(1);
  std::vector<double> out(indices.size() * w);
  const double* pt = table.data().data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows) {
      throw ShapeError("embedding-lookup: index " + std::to_string(indices[i]) +
                       " out of range for table " + to_string(table.shape()));
    }
    std::copy_n(pt + indices[i] * w, w, out.data() + i * w);
  }
  return Tape::make_result("embedding-lookup", {indices.size(), w}, std::move(out), ops1(table),
                           [idx = std::vector<std::size_t>(indices.begin(), indices.end()), w](
                               std::span<const double> g, std::span<std::span<double>> gin) {
                             for (std::size_t i = 0; i < idx.size(); ++i)
                               for (std::size_t j = 0; j < w; ++j) gin[0][idx[i] * w + j] += g[i * w + j];
                           });
}

namespace {
// Times in [0, 1] are stretched so the fastest frequency covers ~100 radians.
constexpr double kTimeScale = 100.0;
constexpr double kMaxPeriod = 10000.0;

std::vector<double> time_frequencies(std::size_t half) {
  std::vector<double> f(half);
  for (std::size_t i = 0; i < half; ++i)
    f[i] = kTimeScale * std::exp(-std::log(kMaxPeriod) * static_cast<double>(i) / static_cast<double>(half));
  return f;
}
}  // namespace

Tensor sinusoidal_time_embed(const Tensor& t, std::size_t dim) {
  if (dim == 0 || dim % 2 != 0) {
    throw ShapeError("sinusoidal-time-embed: dim must be even and positive, got " + std::to_string(dim));
  }
  const std::size_t rows = t.numel(), half = dim / 2;
  const auto freq = time_frequencies(half);
  std::vector<double> out(rows * dim);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < half; ++i) {
      const double arg = t[r] * freq[i];
      out[r * dim + i] = std::sin(arg);
      out[r * dim + half + i] = std::cos(arg);
    }
  return Tape::make_result("sinusoidal-time-embed", {rows, dim}, std::move(out), ops1(t),
                           [t = t.detached(), freq, rows, half, dim](std::span<const double> g,
                                                                     std::span<std::span<double>> gin) {
                             for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t i = 0; i < half; ++i) {
                                 const double arg = t[r] * freq[i];
                                 gin[0][r] += g[r * dim + i] * freq[i] * std::cos(arg) -
                                              g[r * dim + half + i] * freq[i] * std::sin(arg);
                               }
                           });
}

namespace {
thread_local FrozenStopGradients* active_freeze = nullptr;
}

FrozenStopGradients::FrozenStopGradients() : previous_(active_freeze) { active_freeze = this; }
FrozenStopGradients::~FrozenStopGradients() { active_freeze = previous_; }

Tensor FrozenStopGradients::next(const Tensor& t) {
  if (cursor_ == values_.size()) {
    values_.push_back(t.detached());
  } else if (values_[cursor_].shape() != t.shape()) {
    throw ShapeError("stop-gradient replay: call " + std::to_string(cursor_) + " recorded " +
                     to_string(values_[cursor_].shape()) + ", now " + to_string(t.shape()));
  }
  return values_[cursor_++];
}

Tensor stop_gradient(const Tensor& t) { return active_freeze ? active_freeze->next(t) : t.detached(); }

Tensor repeat_rows(const Tensor& a, std::size_t repeats) {
  if (a.rank() != 2) shape_fail("repeat-rows", "expects [rows, width]", a.shape());
  std::vector<std::size_t> idx(a.dim(0) * repeats);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i / repeats;
  return embedding_lookup(a, idx);
}

Tensor apply(OpKind kind, std::span<const Tensor> x, const OpAttributes& at) {
  auto need = [&](std::size_t n) {
    if (x.size() != n) {
      throw ShapeError(std::string(op_name(kind)) + ": expected " + std::to_string(n) + " operands, got " +
                       std::to_string(x.size()));
    }
  };
  switch (kind) {
    case OpKind::kMatmul: need(2); return matmul(x[0], x[1]);
    case OpKind::kAdd: need(2); return add(x[0], x[1]);
    case OpKind::kSub: need(2); return sub(x[0], x[1]);
    case OpKind::kMul: need(2); return mul(x[0], x[1]);
    case OpKind::kScalarMul: need(1); return scalar_mul(x[0], at.scalar);
    case OpKind::kMean: need(1); return at.axis ? mean(x[0], *at.axis) : mean(x[0]);
    case OpKind::kSum: need(1); return at.axis ? sum(x[0], *at.axis) : sum(x[0]);
    case OpKind::kReshape: need(1); return reshape(x[0], at.shape);
    case OpKind::kTranspose: need(1); return transpose(x[0], at.perm);
    case OpKind::kConcat: return concat(x, at.axis.value_or(0));
    case OpKind::kSlice: need(1); return slice(x[0], at.axis.value_or(0), at.begin, at.end);
    case OpKind::kGelu: need(1); return gelu(x[0]);
    case OpKind::kLayerNorm: need(1); return layer_norm(x[0]);
    case OpKind::kSoftmax: need(1); return softmax(x[0]);
    case OpKind::kSquaredError: need(2); return squared_error(x[0], x[1]);
    case OpKind::kCrossEntropyWithLogits: need(1); return cross_entropy_with_logits(x[0], at.indices);
    case OpKind::kCosineSimilarity: need(2); return cosine_similarity(x[0], x[1]);
    case OpKind::kEmbeddingLookup: need(1); return embedding_lookup(x[0], at.indices);
    case OpKind::kSinusoidalTimeEmbed: need(1); return sinusoidal_time_embed(x[0], at.dim);
  }
  throw ShapeError("apply: unknown op kind");
}

}  // namespace dsd

#pragma once

// Dense float64 tensors on a define-by-run gradient tape.
//
// A Tensor is an immutable value: a shape plus a shared, row-major buffer.
// Tensors that participate in differentiation additionally carry a handle
// into the Tape that produced them. Ops record onto the tape of their
// handle-bearing operands; tensors without a handle are constants.

#include <compare>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace dsd {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class Tape;
class Parameter;

class Tensor {
 public:
  // Scalar zero.
  Tensor();
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor vector(std::initializer_list<double> values);
  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0);
  // Normal samples redrawn outside two standard deviations.
  static Tensor trunc_normal(Shape shape, std::mt19937_64& rng, double stddev);
  static Tensor uniform(Shape shape, std::mt19937_64& rng, double lo, double hi);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const noexcept { return data_->size(); }
  std::span<const double> data() const noexcept { return *data_; }
  double operator[](std::size_t i) const { return (*data_)[i]; }
  double item() const;

  bool requires_grad() const noexcept { return tape_ != nullptr; }
  std::optional<std::uint32_t> tape_handle() const;
  const Tape* tape() const noexcept { return tape_; }

  // Copy of the values with no tape handle.
  Tensor detached() const;
  bool same_storage(const Tensor& other) const noexcept { return data_ == other.data_; }

 private:
  friend class Tape;

  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  Tape* tape_ = nullptr;
  std::uint32_t node_ = 0;
};

struct ParamId {
  std::uint64_t value = 0;
  auto operator<=>(const ParamId&) const = default;
};

// A named, mutable slot holding a tensor value. Trainable parameters become
// tape leaves when read through var() under an active tape.
class Parameter {
 public:
  Parameter(std::string name, Tensor value, bool trainable = true);

  const std::string& name() const noexcept { return name_; }
  ParamId id() const noexcept { return id_; }
  const Tensor& value() const noexcept { return value_; }
  void set_value(Tensor value);
  bool trainable() const noexcept { return trainable_; }

  Tensor var() const;

 private:
  std::string name_;
  ParamId id_;
  Tensor value_;
  bool trainable_;
};

// Insertion-ordered collection of parameters with stable addresses.
class ParameterSet {
 public:
  Parameter& add(std::string name, Tensor value, bool trainable = true);
  const Parameter& at(std::string_view name) const;
  Parameter& at(std::string_view name);
  bool contains(std::string_view name) const;
  std::size_t size() const noexcept { return params_.size(); }
  std::size_t total_elements() const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::deque<Parameter> params_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

// Result of a backward pass.
class Gradients {
 public:
  // Gradient for a parameter; zeros of the parameter's shape if it was never
  // reached from the loss.
  Tensor of(const Parameter& p) const;
  // Gradient for a tensor obtained from Tape::watch.
  Tensor wrt(const Tensor& watched) const;
  const std::map<ParamId, Tensor>& by_param() const noexcept { return params_; }

 private:
  friend class Tape;
  std::map<ParamId, Tensor> params_;
  std::unordered_map<std::uint32_t, Tensor> leaves_;
  const Tape* tape_ = nullptr;
};

// The op record list for one define-by-run graph. Records are appended in
// creation order, which is a topological order; backward replays them in
// reverse, each exactly once.
class Tape {
 public:
  // Receives the output gradient and one span per operand; spans of operands
  // that do not require grad are empty. Implementations accumulate (+=).
  using BackwardFn =
      std::function<void(std::span<const double> grad_out, std::span<std::span<double>> grad_in)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor watch(const Tensor& t);
  Tensor bind(const Parameter& p);

  Gradients backward(const Tensor& loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  std::size_t op_count() const noexcept { return op_records_; }
  // Parameters bound so far, in binding order.
  std::vector<ParamId> bound_parameters() const;

  // Builds the forward result and, when any operand carries a handle on this
  // tape, appends an op record. Operands from a different tape are rejected.
  static Tensor make_result(std::string_view op, Shape shape, std::vector<double> data,
                            std::span<const Tensor> operands, BackwardFn fn);

 private:
  struct Node {
    Shape shape;
    std::vector<std::optional<std::uint32_t>> inputs;
    BackwardFn fn;
    std::vector<double> grad;
    std::optional<ParamId> param;
  };

  Tensor add_leaf(const Tensor& t, std::optional<ParamId> param);

  std::vector<Node> nodes_;
  std::unordered_map<std::uint64_t, std::uint32_t> param_nodes_;
  std::vector<ParamId> param_order_;
  std::size_t op_records_ = 0;
  bool consumed_ = false;
};

// The tape Parameter::var() binds to on this thread, if any.
Tape* active_tape() noexcept;

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// ---------------------------------------------------------------------------
// Op set. Broadcasting: for add/sub/mul the smaller operand's shape must be
// a suffix of the larger's, or the smaller must hold one element.

enum class OpKind {
  kMatmul,
  kAdd,
  kSub,
  kMul,
  kScalarMul,
  kMean,
  kSum,
  kReshape,
  kTranspose,
  kConcat,
  kSlice,
  kGelu,
  kLayerNorm,
  kSoftmax,
  kSquaredError,
  kCrossEntropyWithLogits,
  kCosineSimilarity,
  kEmbeddingLookup,
  kSinusoidalTimeEmbed,
};

std::string_view op_name(OpKind kind);
const std::vector<OpKind>& all_op_kinds();

// [..., k] x [k, n] -> [..., n], or batched [b, m, k] x [b, k, n] -> [b, m, n].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
// Full reductions to a scalar.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Reduction over one axis (the axis is removed).
Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a, std::size_t axis);
Tensor reshape(const Tensor& a, Shape shape);
// General axis permutation: out.shape[i] = a.shape[perm[i]].
Tensor transpose(const Tensor& a, const std::vector<std::size_t>& perm);
Tensor transpose(const Tensor& a, std::size_t axis0, std::size_t axis1);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);
// Exact erf form.
Tensor gelu(const Tensor& a);
// Normalizes the last axis; no affine terms.
Tensor layer_norm(const Tensor& a, double eps = 1e-6);
Tensor softmax(const Tensor& a);
// mean((a - b)^2) over all elements.
Tensor squared_error(const Tensor& a, const Tensor& b);
// logits [batch, classes]; mean over the batch.
Tensor cross_entropy_with_logits(const Tensor& logits, std::span<const std::size_t> labels);
// Cosine along the last axis; result drops that axis.
Tensor cosine_similarity(const Tensor& a, const Tensor& b);
// table [rows, width]; result [indices.size(), width].
Tensor embedding_lookup(const Tensor& table, std::span<const std::size_t> indices);
// t holds one time per row; result [t.numel(), dim] of [sin | cos] features.
Tensor sinusoidal_time_embed(const Tensor& t, std::size_t dim);

Tensor stop_gradient(const Tensor& t);

// While alive on this thread, stop_gradient outputs are recorded in call
// order on the first pass and replayed on every pass after rewind(). A
// finite-difference probe then sees the detached values as constants, which
// is what the analytic gradient assumes.
class FrozenStopGradients {
 public:
  FrozenStopGradients();
  ~FrozenStopGradients();
  FrozenStopGradients(const FrozenStopGradients&) = delete;
  FrozenStopGradients& operator=(const FrozenStopGradients&) = delete;

  void rewind() noexcept { cursor_ = 0; }
  std::size_t recorded() const noexcept { return values_.size(); }
  Tensor next(const Tensor& t);

 private:
  std::vector<Tensor> values_;
  std::size_t cursor_ = 0;
  FrozenStopGradients* previous_;
};

// Row repetition: [rows, width] -> [rows * repeats, width], each row repeated
// `repeats` times consecutively. Expressed through embedding_lookup.
Tensor repeat_rows(const Tensor& a, std::size_t repeats);

struct OpAttributes {
  double scalar = 0.0;
  Shape shape;
  std::vector<std::size_t> perm;
  std::optional<std::size_t> axis;
  std::size_t begin = 0;
  std::size_t end = 0;
  std::vector<std::size_t> indices;
  std::size_t dim = 0;
};

// Dispatches by kind; used by generic gradient batteries.
Tensor apply(OpKind kind, std::span<const Tensor> operands, const OpAttributes& attrs = {});

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double c, const Tensor& a) { return scalar_mul(a, c); }
inline Tensor operator*(const Tensor& a, double c) { return scalar_mul(a, c); }

bool all_finite(const Tensor& t);
double max_abs_diff(const Tensor& a, const Tensor& b);
bool bitwise_equal(const Tensor& a, const Tensor& b);

}  // namespace dsd

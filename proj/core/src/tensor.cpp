#include "dsd/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>

#include "dsd/error.hpp"

namespace dsd {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor() : data_(std::make_shared<const std::vector<double>>(1, 0.0)) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
  if (dsd::numel(shape_) != data.size()) {
    throw ShapeError("tensor: shape " + to_string(shape_) + " holds " +
                     std::to_string(dsd::numel(shape_)) + " elements but data has " +
                     std::to_string(data.size()));
  }
  data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const auto n = dsd::numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(dsd::numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

Tensor Tensor::trunc_normal(Shape shape, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(dsd::numel(shape));
  for (auto& x : v) {
    double s = dist(rng);
    while (std::abs(s) > 2.0) s = dist(rng);
    x = s * stddev;
  }
  return Tensor(std::move(shape), std::move(v));
}

Tensor Tensor::uniform(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(dsd::numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for shape " +
                     to_string(shape_));
  }
  return shape_[axis];
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item: tensor of shape " + to_string(shape_) + " is not a scalar");
  }
  return (*data_)[0];
}

std::optional<std::uint32_t> Tensor::tape_handle() const {
  if (!tape_) return std::nullopt;
  return node_;
}

Tensor Tensor::detached() const {
  Tensor t;
  t.shape_ = shape_;
  t.data_ = data_;
  return t;
}

// ---------------------------------------------------------------------------
// Parameters

namespace {
std::atomic<std::uint64_t> next_param_id{1};
thread_local Tape* current_tape = nullptr;
}  // namespace

Parameter::Parameter(std::string name, Tensor value, bool trainable)
    : name_(std::move(name)),
      id_{next_param_id.fetch_add(1)},
      value_(value.detached()),
      trainable_(trainable) {}

void Parameter::set_value(Tensor value) {
  if (value.shape() != value_.shape()) {
    throw ShapeError("parameter " + name_ + ": cannot assign shape " + to_string(value.shape()) +
                     " to " + to_string(value_.shape()));
  }
  value_ = value.detached();
}

Tensor Parameter::var() const {
  if (trainable_ && current_tape) return current_tape->bind(*this);
  return value_;
}

Parameter& ParameterSet::add(std::string name, Tensor value, bool trainable) {
  if (index_.contains(name)) {
    throw Error(ErrorKind::kInvalidArgument, "parameter set: duplicate name " + name);
  }
  index_.emplace(name, params_.size());
  params_.emplace_back(std::move(name), std::move(value), trainable);
  return params_.back();
}

const Parameter& ParameterSet::at(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) {
    throw Error(ErrorKind::kInvalidArgument, "parameter set: no parameter named " + std::string(name));
  }
  return params_[it->second];
}

Parameter& ParameterSet::at(std::string_view name) {
  return const_cast<Parameter&>(std::as_const(*this).at(name));
}

bool ParameterSet::contains(std::string_view name) const { return index_.find(name) != index_.end(); }

std::size_t ParameterSet::total_elements() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value().numel();
  return n;
}

// ---------------------------------------------------------------------------
// Gradients

Tensor Gradients::of(const Parameter& p) const {
  auto it = params_.find(p.id());
  if (it == params_.end()) return Tensor::zeros(p.value().shape());
  return it->second;
}

Tensor Gradients::wrt(const Tensor& watched) const {
  if (watched.tape() != tape_ || !watched.tape_handle()) {
    throw Error(ErrorKind::kInvalidArgument, "gradients: tensor was not watched on this tape");
  }
  auto it = leaves_.find(*watched.tape_handle());
  if (it == leaves_.end()) return Tensor::zeros(watched.shape());
  return it->second;
}

// ---------------------------------------------------------------------------
// Tape

Tensor Tape::add_leaf(const Tensor& t, std::optional<ParamId> param) {
  Node node;
  node.shape = t.shape();
  node.param = param;
  nodes_.push_back(std::move(node));
  Tensor out = t.detached();
  out.tape_ = this;
  out.node_ = static_cast<std::uint32_t>(nodes_.size() - 1);
  return out;
}

Tensor Tape::watch(const Tensor& t) { return add_leaf(t, std::nullopt); }

Tensor Tape::bind(const Parameter& p) {
  auto it = param_nodes_.find(p.id().value);
  if (it != param_nodes_.end()) {
    Tensor out = p.value();
    out.tape_ = this;
    out.node_ = it->second;
    return out;
  }
  Tensor out = add_leaf(p.value(), p.id());
  param_nodes_.emplace(p.id().value, out.node_);
  param_order_.push_back(p.id());
  return out;
}

std::vector<ParamId> Tape::bound_parameters() const { return param_order_; }

Tensor Tape::make_result(std::string_view op, Shape shape, std::vector<double> data,
                         std::span<const Tensor> operands, BackwardFn fn) {
  Tape* tape = nullptr;
  for (const auto& x : operands) {
    if (!x.tape_) continue;
    if (tape && tape != x.tape_) {
      throw Error(ErrorKind::kInvalidArgument,
                  std::string(op) + ": operands belong to different tapes");
    }
    tape = x.tape_;
  }
  Tensor out(std::move(shape), std::move(data));
  if (!tape) return out;

  Node node;
  node.shape = out.shape();
  node.inputs.reserve(operands.size());
  for (const auto& x : operands) {
    node.inputs.push_back(x.tape_ ? std::optional<std::uint32_t>(x.node_) : std::nullopt);
  }
  node.fn = std::move(fn);
  tape->nodes_.push_back(std::move(node));
  ++tape->op_records_;
  out.tape_ = tape;
  out.node_ = static_cast<std::uint32_t>(tape->nodes_.size() - 1);
  return out;
}

Gradients Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + to_string(loss.shape()));
  }
  Gradients out;
  out.tape_ = this;
  if (loss.tape_ == nullptr) {
    // Loss does not depend on anything watched: every gradient is zero.
    for (const auto& id : param_order_) {
      const auto& node = nodes_[param_nodes_.at(id.value)];
      out.params_.emplace(id, Tensor::zeros(node.shape));
    }
    return out;
  }
  if (loss.tape_ != this) {
    throw Error(ErrorKind::kInvalidArgument, "backward: loss belongs to a different tape");
  }
  if (consumed_) {
    throw Error(ErrorKind::kInvalidArgument, "backward: tape already replayed");
  }
  consumed_ = true;

  nodes_[loss.node_].grad.assign(1, 1.0);
  std::vector<std::span<double>> grad_in;
  for (std::int64_t i = loss.node_; i >= 0; --i) {
    Node& node = nodes_[static_cast<std::size_t>(i)];
    if (node.grad.empty() || !node.fn) continue;
    grad_in.assign(node.inputs.size(), {});
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      if (!node.inputs[k]) continue;
      Node& in = nodes_[*node.inputs[k]];
      if (in.grad.empty()) in.grad.assign(numel(in.shape), 0.0);
      grad_in[k] = in.grad;
    }
    node.fn(node.grad, grad_in);
    // Interior gradients are no longer needed once propagated.
    std::vector<double>().swap(node.grad);
  }

  for (std::uint32_t i = 0; i < nodes_.size(); ++i) {
    Node& node = nodes_[i];
    if (node.fn) continue;
    std::vector<double> g = node.grad.empty() ? std::vector<double>(numel(node.shape), 0.0)
                                              : std::move(node.grad);
    Tensor gt(node.shape, std::move(g));
    if (node.param) {
      out.params_.emplace(*node.param, gt);
    } else {
      out.leaves_.emplace(i, gt);
    }
  }
  return out;
}

Tape* active_tape() noexcept { return current_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(current_tape) { current_tape = &tape; }
TapeScope::~TapeScope() { current_tape = previous_; }

// ---------------------------------------------------------------------------

bool all_finite(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](double x) { return std::isfinite(x); });
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff: shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

}  // namespace dsd

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "lmlab/error.hpp"

namespace lmlab {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

// Shared storage node. A rank-0 shape holds exactly one value (a scalar).
template <typename S>
struct TensorNode {
  Shape shape;
  std::vector<S> values;
  std::vector<S> grad;  // empty until backward (or an optimizer) touches it
  bool requires_grad = false;
};

// Value-semantic handle onto a shared node; copies alias the same storage,
// which is what lets the tape and the optimizer see one set of parameters.
template <typename S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() : node_(std::make_shared<TensorNode<S>>()) {
    node_->values.assign(1, S{0});  // rank-0 zero
  }

  explicit Tensor(Shape shape, S fill = S{0})
      : node_(std::make_shared<TensorNode<S>>()) {
    node_->shape = std::move(shape);
    node_->values.assign(shape_numel(node_->shape), fill);
  }

  Tensor(Shape shape, std::vector<S> values)
      : node_(std::make_shared<TensorNode<S>>()) {
    if (shape_numel(shape) != values.size())
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    node_->shape = std::move(shape);
    node_->values = std::move(values);
  }

  static Tensor scalar(S v) {
    Tensor t;
    t.node_->values[0] = v;
    return t;
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, S v) { return Tensor(std::move(shape), v); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->values.size(); }
  std::size_t extent(std::size_t axis) const { return node_->shape.at(axis); }

  S* data() { return node_->values.data(); }
  const S* data() const { return node_->values.data(); }
  std::vector<S>& values() { return node_->values; }
  const std::vector<S>& values() const { return node_->values; }

  S item() const {
    if (numel() != 1)
      throw ContractError("item() on tensor with " + std::to_string(numel()) +
                          " elements");
    return node_->values[0];
  }

  S& at(std::initializer_list<std::size_t> idx) {
    return node_->values[flat_index(idx)];
  }
  S at(std::initializer_list<std::size_t> idx) const {
    return node_->values[flat_index(idx)];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    node_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<S>& grad() const {
    if (node_->grad.empty())
      throw ContractError("grad accessed before backward populated it");
    return node_->grad;
  }
  std::vector<S>& mutable_grad() { return ensure_grad(); }
  void zero_grad() { node_->grad.assign(node_->values.size(), S{0}); }
  void drop_grad() { node_->grad.clear(); }

  std::vector<S>& ensure_grad() {
    if (node_->grad.empty()) node_->grad.assign(node_->values.size(), S{0});
    return node_->grad;
  }

  bool all_finite() const {
    for (S v : node_->values)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  std::shared_ptr<TensorNode<S>> node() const { return node_; }

 private:
  std::size_t flat_index(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != node_->shape.size())
      throw ShapeError("index rank mismatch");
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (std::size_t i : idx) {
      if (i >= node_->shape[axis]) throw IndexError("tensor index out of range");
      flat = flat * node_->shape[axis] + i;
      ++axis;
    }
    return flat;
  }

  std::shared_ptr<TensorNode<S>> node_;
};

// Define-by-run tape. Constructing a Tape makes it the active recorder for
// the current thread; it is rebuilt every training step. Ops append entries
// in execution order, which is already topological, and backward() walks the
// entries exactly once in reverse.
template <typename S>
class Tape {
 public:
  Tape() : prev_(current_) { current_ = this; }
  ~Tape() { current_ = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() { return current_; }

  static Tape* exchange(Tape* next) {
    Tape* prev = current_;
    current_ = next;
    return prev;
  }

  struct Entry {
    std::vector<std::shared_ptr<TensorNode<S>>> inputs;
    std::shared_ptr<TensorNode<S>> output;
    std::function<void()> pull;  // accumulates output grad into input grads
  };

  void record(std::vector<std::shared_ptr<TensorNode<S>>> inputs,
              std::shared_ptr<TensorNode<S>> output,
              std::function<void()> pull) {
    entries_.push_back(
        Entry{std::move(inputs), std::move(output), std::move(pull)});
  }

  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

  void reset() {
    entries_.clear();
    consumed_ = false;
  }

  void backward(const Tensor<S>& loss) {
    if (consumed_)
      throw ContractError("backward called twice on one tape without reset");
    if (loss.numel() != 1)
      throw ContractError("backward requires a scalar loss, got shape " +
                          shape_str(loss.shape()));
    bool on_tape = false;
    for (const Entry& e : entries_)
      if (e.output == loss.node()) {
        on_tape = true;
        break;
      }
    if (!on_tape) throw ContractError("loss tensor is not on the active tape");

    loss.node()->grad.assign(1, S{1});
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (it->output->grad.empty()) continue;  // branch not reaching the loss
      it->pull();
    }
    consumed_ = true;
  }

 private:
  std::vector<Entry> entries_;
  Tape* prev_ = nullptr;
  bool consumed_ = false;
  static inline thread_local Tape* current_ = nullptr;
};

// Suspends recording for the current thread while alive. Inference and
// metric passes run under this so they never land on a training tape.
template <typename S>
class TapeSuspend {
 public:
  TapeSuspend() : saved_(Tape<S>::exchange(nullptr)) {}
  ~TapeSuspend() { Tape<S>::exchange(saved_); }
  TapeSuspend(const TapeSuspend&) = delete;
  TapeSuspend& operator=(const TapeSuspend&) = delete;

 private:
  Tape<S>* saved_;
};

// Free-function form used throughout losses: runs on the active tape.
template <typename S>
void backward(const Tensor<S>& loss) {
  Tape<S>* t = Tape<S>::current();
  if (!t) throw ContractError("backward called with no active tape");
  t->backward(loss);
}

namespace detail {

template <typename S>
std::vector<S>& pull_grad(const std::shared_ptr<TensorNode<S>>& n) {
  if (n->grad.empty()) n->grad.assign(n->values.size(), S{0});
  return n->grad;
}

// Record an op result if a tape is active and any input participates in
// gradients. `pull` must only capture shared_ptrs to nodes.
template <typename S>
Tensor<S> finish_op(std::initializer_list<Tensor<S>> inputs, Tensor<S> out,
                    std::function<void()> pull) {
  bool any_grad = false;
  for (const Tensor<S>& t : inputs) any_grad = any_grad || t.requires_grad();
  if (any_grad && Tape<S>::current()) {
    std::vector<std::shared_ptr<TensorNode<S>>> in_nodes;
    in_nodes.reserve(inputs.size());
    for (const Tensor<S>& t : inputs) in_nodes.push_back(t.node());
    out.set_requires_grad(true);
    Tape<S>::current()->record(std::move(in_nodes), out.node(),
                               std::move(pull));
  }
  return out;
}

}  // namespace detail

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace lmlab

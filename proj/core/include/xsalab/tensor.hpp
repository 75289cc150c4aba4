#pragma once

#include <cstring>
#include <functional>
#include <initializer_list>
#include <utility>

#include "xsalab/common.hpp"

namespace xsalab {

template <class S>
class TapeT;

/// Dense row-major tensor. Copies are shallow: they share the data and grad
/// buffers. Values are immutable once an op has consumed them; only grad
/// buffers accumulate.
template <class S>
struct TensorT {
  using Scalar = S;

  Shape shape;
  std::shared_ptr<std::vector<S>> data;
  std::shared_ptr<std::vector<S>> grad;     // allocated when the tensor joins a tape
  bool requires_grad = false;
  TapeT<S>* tape = nullptr;                 // recording scope that produced it, if any
  int64_t node = -1;                        // index into the tape

  TensorT() = default;

  static TensorT zeros(Shape s) {
    TensorT t;
    t.shape = std::move(s);
    t.data = make_buffer<S>(numel_of(t.shape));
    return t;
  }

  static TensorT full(Shape s, S value) {
    TensorT t = zeros(std::move(s));
    for (S& x : *t.data) x = value;
    return t;
  }

  static TensorT from_data(Shape s, std::vector<S> values) {
    if (numel_of(s) != static_cast<int64_t>(values.size()))
      throw std::invalid_argument("from_data: " + shape_str(s) + " does not hold " +
                                  std::to_string(values.size()) + " values");
    TensorT t = zeros(std::move(s));
    std::copy(values.begin(), values.end(), t.data->begin());
    return t;
  }

  static TensorT scalar(S value) { return from_data({}, {value}); }

  int64_t numel() const { return data ? static_cast<int64_t>(data->size()) : 0; }
  int rank() const { return static_cast<int>(shape.size()); }

  // extent, with negative indices counting from the back
  int64_t dim(int i) const {
    int r = rank();
    if (i < 0) i += r;
    if (i < 0 || i >= r) throw std::invalid_argument("dim index out of range");
    return shape[static_cast<size_t>(i)];
  }

  S* ptr() { return data->data(); }
  const S* ptr() const { return data->data(); }
  S* grad_ptr() { return grad ? grad->data() : nullptr; }
  const S* grad_ptr() const { return grad ? grad->data() : nullptr; }

  S item() const {
    if (numel() != 1) throw std::invalid_argument("item: tensor is not scalar");
    return (*data)[0];
  }

  // requires_grad tensors always carry an allocated grad buffer, so shallow
  // copies taken later share it
  TensorT& set_requires_grad(bool rg = true) {
    requires_grad = rg;
    if (rg) ensure_grad();
    return *this;
  }

  void ensure_grad() {
    if (!grad) grad = make_buffer<S>(numel());
  }

  void zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), S(0));
  }

  /// Deep copy of the values only; drops tape membership and grads.
  TensorT detached_copy() const {
    TensorT t;
    t.shape = shape;
    t.data = make_buffer<S>(numel());
    std::copy(data->begin(), data->end(), t.data->begin());
    return t;
  }
};

/// Gradient tape: ops append themselves in execution order, which is already
/// a topological order. backward_from replays the prefix in reverse exactly
/// once. One tape per thread of execution.
template <class S>
class TapeT {
 public:
  int64_t record(std::shared_ptr<std::vector<S>> out_grad, std::function<void()> backward) {
    nodes_.push_back(Node{std::move(out_grad), std::move(backward)});
    return static_cast<int64_t>(nodes_.size()) - 1;
  }

  /// Runs the backward pass for the op at `node` and everything before it.
  /// Grads of op outputs are reset first, so leaf grads accumulate exactly
  /// once per call.
  void backward_from(int64_t node, std::vector<S>& seed_grad) {
    if (node < 0 || node >= static_cast<int64_t>(nodes_.size()))
      throw std::runtime_error("backward: node handle out of range");
    for (int64_t i = 0; i <= node; ++i)
      std::fill(nodes_[i].out_grad->begin(), nodes_[i].out_grad->end(), S(0));
    for (size_t i = 0; i < seed_grad.size(); ++i) seed_grad[i] += S(1);
    for (int64_t i = node; i >= 0; --i) nodes_[static_cast<size_t>(i)].backward();
  }

  size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    std::shared_ptr<std::vector<S>> out_grad;
    std::function<void()> backward;
  };
  std::vector<Node> nodes_;
};

template <class S>
inline TapeT<S>*& active_tape() {
  static thread_local TapeT<S>* t = nullptr;
  return t;
}

/// RAII recording scope. Ops record onto the tape while one is alive.
template <class S>
class RecordScope {
 public:
  explicit RecordScope(TapeT<S>& tape) : prev_(active_tape<S>()) { active_tape<S>() = &tape; }
  ~RecordScope() { active_tape<S>() = prev_; }
  RecordScope(const RecordScope&) = delete;
  RecordScope& operator=(const RecordScope&) = delete;

 private:
  TapeT<S>* prev_;
};

/// Temporarily disables recording (e.g. evaluation passes inside a training
/// scope).
template <class S>
class NoGradScope {
 public:
  NoGradScope() : prev_(active_tape<S>()) { active_tape<S>() = nullptr; }
  ~NoGradScope() { active_tape<S>() = prev_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  TapeT<S>* prev_;
};

/// Populates grads of every recorded requires_grad tensor with d loss / d t.
/// Repeated calls accumulate into leaf grads.
template <class S>
void backward(TensorT<S>& loss) {
  if (loss.numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
  if (loss.tape == nullptr || loss.node < 0)
    throw std::runtime_error("backward: loss is detached from any tape");
  loss.ensure_grad();
  loss.tape->backward_from(loss.node, *loss.grad);
}

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

}  // namespace xsalab

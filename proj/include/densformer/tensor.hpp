#ifndef DENSFORMER_TENSOR_HPP
#define DENSFORMER_TENSOR_HPP

// Dense row-major tensors and the reverse-mode differentiation tape.
//
// Every op records a node on the thread's active Tape<T> when gradient mode is
// on and at least one input requires a gradient. Node ids increase with
// creation, so reverse creation order is a valid reverse topological order.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace densformer {

/// Tensor storage. Every buffer starts on a SIMD boundary so vectorized
/// kernels split work identically from run to run.
template <class T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <class T>
struct Node {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  std::uint64_t id = 0;          // 0 for leaves, creation index otherwise
  std::uint64_t generation = 0;  // tape generation the node was recorded on
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(const Node&)> backward_fn;

  Buffer<T>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};

namespace detail {
inline thread_local bool grad_mode_enabled = true;
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_enabled; }

/// Disables tape recording for its lifetime (inference, validation).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_enabled) { detail::grad_mode_enabled = false; }
  ~NoGradGuard() { detail::grad_mode_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
class Tensor;

template <class T>
class Tape {
 public:
  static Tape& active() {
    thread_local Tape tape;
    return tape;
  }

  void record(const std::shared_ptr<Node<T>>& node) {
    node->id = next_id_++;
    node->generation = generation_;
    nodes_.push_back(node);
  }

  /// Drops every recorded node (and the activations it saved).
  void reset() {
    nodes_.clear();
    consumed_ = false;
    ++generation_;
  }

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }
  std::uint64_t generation() const { return generation_; }

  void backward(const Tensor<T>& loss);

 private:
  std::vector<std::shared_ptr<Node<T>>> nodes_;
  std::uint64_t next_id_ = 1;
  std::uint64_t generation_ = 1;
  bool consumed_ = false;
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<Node<T>>()) {
    node_->data.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::initializer_list<T> values) : Tensor(std::move(shape), Buffer<T>(values)) {}
  Tensor(Shape shape, const std::vector<T>& values)
      : Tensor(std::move(shape), Buffer<T>(values.begin(), values.end())) {}

  Tensor(Shape shape, Buffer<T> values) : node_(std::make_shared<Node<T>>()) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " +
                       shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(values);
  }

  static Tensor scalar(T value) { return Tensor(Shape{}, Buffer<T>{value}); }

  static Tensor from_node(std::shared_ptr<Node<T>> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::ptrdiff_t axis) const {
    const auto r = static_cast<std::ptrdiff_t>(rank());
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ShapeError("dim: axis out of range");
    return node_->shape[static_cast<std::size_t>(axis)];
  }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  const T& operator[](std::size_t i) const { return node_->data[i]; }

  /// Write access for leaves only; recorded results are immutable.
  std::span<T> mutable_data() {
    if (node_->backward_fn) throw TapeError("mutable_data: tensor is not a leaf");
    return node_->data;
  }

  T item() const {
    if (numel() != 1) throw ShapeError("item: tensor has " + std::to_string(numel()) + " elements");
    return node_->data[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return node_ && node_->grad.size() == node_->data.size() && !node_->data.empty(); }
  std::span<const T> grad() const {
    if (!has_grad()) throw TapeError("grad: tensor has no gradient");
    return node_->grad;
  }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  /// Copy of the values with no tape history.
  Tensor detach() const { return Tensor(shape(), node_->data); }

  bool all_finite() const {
    return std::all_of(node_->data.begin(), node_->data.end(), [](T v) { return std::isfinite(v); });
  }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <class T>
Tensor<T> zeros_like(const Tensor<T>& t) {
  return Tensor<T>(t.shape(), T(0));
}

template <class T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw TapeError("backward: loss must be a scalar");
  }
  if (consumed_) throw TapeError("backward: tape already consumed; call reset() first");
  if (!loss.requires_grad()) throw TapeError("backward: loss does not depend on any tensor requiring grad");
  const auto& root = loss.node();
  if (root->backward_fn && root->generation != generation_) {
    throw TapeError("backward: loss was recorded on a stale tape");
  }
  consumed_ = true;
  root->grad_buffer()[0] += T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node<T>& node = **it;
    if (node.grad.empty() || !node.backward_fn) continue;
    node.backward_fn(node);
  }
}

template <class T>
void backward(const Tensor<T>& loss) {
  Tape<T>::active().backward(loss);
}

namespace detail {

/// Grad buffer of an input when it participates in differentiation, else null.
template <class T>
T* grad_of(const std::shared_ptr<Node<T>>& node) {
  return node->requires_grad ? node->grad_buffer().data() : nullptr;
}

/// Wraps a computed result as a tensor, recording `backward` on the tape when
/// any input requires a gradient. `backward(const Node&)` receives the output.
template <class T, class Backward>
Tensor<T> make_result(Shape shape, Buffer<T> data, std::initializer_list<Tensor<T>> inputs,
                      Backward&& backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs = needs || (in.defined() && in.requires_grad());
  }
  if (needs) {
    node->requires_grad = true;
    for (const auto& in : inputs) {
      if (in.defined()) node->inputs.push_back(in.node());
    }
    node->backward_fn = std::forward<Backward>(backward);
    Tape<T>::active().record(node);
  }
  return Tensor<T>::from_node(std::move(node));
}

/// Same as make_result but for a variable-length input list.
template <class T, class Backward>
Tensor<T> make_result_n(Shape shape, Buffer<T> data, const std::vector<Tensor<T>>& inputs,
                        Backward&& backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->inputs.push_back(in.node());
    node->backward_fn = std::forward<Backward>(backward);
    Tape<T>::active().record(node);
  }
  return Tensor<T>::from_node(std::move(node));
}

}  // namespace detail

/// Converts a tensor to another scalar type, without history.
template <class U, class T>
Tensor<U> cast(const Tensor<T>& t) {
  Buffer<U> out(t.data().begin(), t.data().end());
  return Tensor<U>(t.shape(), std::move(out));
}

}  // namespace densformer

#endif  // DENSFORMER_TENSOR_HPP

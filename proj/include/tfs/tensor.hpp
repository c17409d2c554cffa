#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tfs/error.hpp"

namespace tfs {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace detail {

template <typename T>
struct Node;
template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

// Receives the output node (its grad is populated) and accumulates into the
// parents that require grad.
template <typename T>
using BackwardFn = std::function<void(Node<T>& self)>;

inline std::atomic<std::uint64_t>& node_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

inline bool& grad_mode_enabled() {
  thread_local bool enabled = true;
  return enabled;
}

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something writes to it
  bool requires_grad = false;
  std::uint64_t seq = node_counter().fetch_add(1, std::memory_order_relaxed);
  std::vector<NodePtr<T>> parents;
  BackwardFn<T> backward;

  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T{0});
    return grad;
  }
};

}  // namespace detail

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_enabled()) {
    detail::grad_mode_enabled() = false;
  }
  ~NoGradGuard() { detail::grad_mode_enabled() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Dense row-major tensor with an optional reverse-mode graph. Production
// code uses the float instantiation (Tensor); the double instantiation exists
// for numerical verification. Copies share the underlying node; use clone()
// for a deep copy.
template <typename T>
class BasicTensor {
 public:
  BasicTensor() = default;

  static BasicTensor from(Shape shape, std::vector<T> values,
                     bool requires_grad = false) {
    for (const std::size_t d : shape) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive");
    }
    if (shape.empty()) shape = {1};
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("shape " + shape_str(shape) + " does not match " +
                           std::to_string(values.size()) + " values");
    }
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    return BasicTensor(std::move(node));
  }

  static BasicTensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<T>(n, T{0}), requires_grad);
  }

  static BasicTensor full(Shape shape, T value, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static BasicTensor scalar(T value, bool requires_grad = false) {
    return from({1}, {value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  // Direct writes are meant for leaves (parameters, inputs).
  std::span<T> mutable_data() { return node_->data; }
  T item() const {
    if (numel() != 1) throw DimensionError("item() on non-scalar tensor");
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  BasicTensor& set_requires_grad(bool value) {
    node_->requires_grad = value;
    return *this;
  }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.assign(node_->data.size(), T{0}); }
  void clear_grad() { node_->grad.clear(); }

  bool is_leaf() const { return !node_->backward; }
  std::uint64_t sequence() const { return node_->seq; }

  // Fresh leaf holding a copy of the data (and no grad).
  BasicTensor clone(bool requires_grad = false) const {
    return from(node_->shape, node_->data, requires_grad);
  }
  // Shares nothing with the graph; same values.
  BasicTensor detach() const { return clone(false); }

  // Reverse-mode sweep from a scalar. Nodes are visited once each, in
  // reverse creation order; gradients accumulate into existing buffers.
  // If `trace` is given it receives the sequence numbers visited.
  void backward(std::vector<std::uint64_t>* trace = nullptr) const {
    if (numel() != 1) {
      throw DimensionError("backward() requires a scalar, got shape " +
                           shape_str(shape()));
    }
    if (!node_->requires_grad) {
      throw DimensionError("backward() on a tensor that does not require grad");
    }
    std::vector<detail::Node<T>*> order;
    std::unordered_set<detail::Node<T>*> seen;
    std::vector<detail::Node<T>*> stack{node_.get()};
    seen.insert(node_.get());
    while (!stack.empty()) {
      detail::Node<T>* n = stack.back();
      stack.pop_back();
      order.push_back(n);
      for (const auto& p : n->parents) {
        if (p->requires_grad && seen.insert(p.get()).second) {
          stack.push_back(p.get());
        }
      }
    }
    std::sort(order.begin(), order.end(),
              [](const detail::Node<T>* a, const detail::Node<T>* b) {
                return a->seq > b->seq;
              });
    node_->grad_buffer()[0] += T{1};
    for (detail::Node<T>* n : order) {
      if (trace != nullptr) trace->push_back(n->seq);
      if (n->backward && !n->grad.empty()) n->backward(*n);
    }
  }

  const detail::NodePtr<T>& node() const { return node_; }

 private:
  explicit BasicTensor(detail::NodePtr<T> node) : node_(std::move(node)) {}

  template <typename U>
  friend BasicTensor<U> make_op_result(Shape, std::vector<U>,
                                       std::vector<BasicTensor<U>>,
                                       detail::BackwardFn<U>, const char*);

  detail::NodePtr<T> node_;
};

using Tensor = BasicTensor<float>;

template <typename T>
inline void check_finite(std::span<const T> values, const char* op) {
  for (const T v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + " produced a non-finite value");
    }
  }
}

// Builds the output of a differentiable op. Records the parents only when
// grad mode is on and at least one parent requires grad.
template <typename T>
BasicTensor<T> make_op_result(Shape shape, std::vector<T> values,
                              std::vector<BasicTensor<T>> parents,
                              detail::BackwardFn<T> backward, const char* op) {
  check_finite<T>(values, op);
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  bool needs_grad = false;
  if (detail::grad_mode_enabled()) {
    for (const BasicTensor<T>& p : parents) needs_grad = needs_grad || p.requires_grad();
  }
  if (needs_grad) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (BasicTensor<T>& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(backward);
  }
  return BasicTensor<T>(std::move(node));
}

namespace detail {
// Gradient buffer of parent `i`, or an empty span if it does not need one.
template <typename T>
inline std::span<T> parent_grad(Node<T>& self, std::size_t i) {
  Node<T>& p = *self.parents[i];
  if (!p.requires_grad) return {};
  return p.grad_buffer();
}
}  // namespace detail

}  // namespace tfs

// Reverse-mode automatic differentiation over dense N-d tensors.
//
// A Tensor is a shared handle to a graph node holding values, an optional
// gradient buffer and a closure that pushes the node's gradient into its
// inputs. Leaves (parameters, inputs) accumulate gradients across backward
// calls; interior nodes are reset at the start of every backward.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "iidnet/errors.hpp"

namespace iidnet::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Disables graph recording in the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void()> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.node_ = std::make_shared<Node<T>>();
    t.node_->value.assign(ad::numel(shape), T(0));
    t.node_->shape = std::move(shape);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(Shape shape, T fill, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.node_->value.begin(), t.node_->value.end(), fill);
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (values.size() != ad::numel(shape))
      throw StructuralError("tensor value count " + std::to_string(values.size()) +
                            " does not match shape " + to_string(shape));
    Tensor t;
    t.node_ = std::make_shared<Node<T>>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(values);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(T v, bool requires_grad = false) { return from({}, {v}, requires_grad); }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> value() const { return node_->value; }
  std::span<T> mutable_value() { return node_->value; }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }

  void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }

  T item() const {
    if (numel() != 1) throw StructuralError("item() on non-scalar tensor " + to_string(shape()));
    return node_->value[0];
  }

  /// Value-only copy with no graph linkage.
  Tensor detach() const { return from(shape(), node_->value, false); }

  Node<T>* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

/// Creates the output node of an op. The backward closure is attached only
/// when recording is on and some input needs a gradient.
template <class T>
Tensor<T> make_result(Shape shape, std::initializer_list<const Tensor<T>*> inputs) {
  Tensor<T> out = Tensor<T>::zeros(std::move(shape));
  bool needs = false;
  if (grad_enabled())
    for (const Tensor<T>* in : inputs) needs = needs || in->requires_grad();
  Node<T>* n = out.node();
  n->requires_grad = needs;
  n->leaf = !needs;
  if (needs)
    for (const Tensor<T>* in : inputs) n->inputs.push_back(in->node_ptr());
  return out;
}

}  // namespace detail

/// Backpropagates from a scalar loss. Leaf gradients accumulate across calls.
template <class T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1)
    throw StructuralError("backward() requires a scalar root, got shape " + to_string(loss.shape()));
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node(), 0}};
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node<T>* n : order) {
    if (n->leaf)
      n->ensure_grad();
    else
      n->grad.assign(n->value.size(), T(0));
  }
  loss.node()->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if (!(*it)->leaf && (*it)->backward_fn) (*it)->backward_fn();
}

}  // namespace iidnet::ad

#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "semiseg/tensor.hpp"

namespace semiseg {

namespace detail {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated lazily on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(const Tensor<T>&)> backprop;

  Tensor<T>& grad_buffer() {
    if (grad.empty() && value.numel() > 0) grad = Tensor<T>(value.shape());
    return grad;
  }
};

}  // namespace detail

// Handle to a value in a reverse-mode autodiff graph. Copies share the node.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<detail::Node<T>> node) : node_(std::move(node)) {}

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::int64_t dim(std::size_t i) const { return node_->value.dim(i); }
  std::int64_t numel() const { return node_->value.numel(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& grad_buffer() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad = Tensor<T>(); }

  // Adds g into this node's gradient if it participates in differentiation.
  void accumulate(const Tensor<T>& g) const {
    if (!requires_grad()) return;
    node_->grad_buffer() += g;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const std::shared_ptr<detail::Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

template <typename T>
Var<T> constant(Tensor<T> value) {
  auto n = std::make_shared<detail::Node<T>>();
  n->value = std::move(value);
  return Var<T>(std::move(n));
}

// Leaf that accumulates gradients across backward passes until zero_grad().
template <typename T>
Var<T> parameter(Tensor<T> value) {
  auto n = std::make_shared<detail::Node<T>>();
  n->value = std::move(value);
  n->requires_grad = true;
  return Var<T>(std::move(n));
}

// Same value, cut from the graph.
template <typename T>
Var<T> detach(const Var<T>& v) {
  return constant(v.value());
}

// Creates the output node of an operation. When no input requires a gradient
// the backprop closure is dropped so inference builds no graph.
template <typename T, typename Fn>
Var<T> record(Tensor<T> value, std::vector<Var<T>> inputs, Fn&& backprop) {
  auto n = std::make_shared<detail::Node<T>>();
  n->value = std::move(value);
  for (const auto& in : inputs) {
    if (in.requires_grad()) {
      n->requires_grad = true;
      break;
    }
  }
  if (n->requires_grad) {
    for (auto& in : inputs) n->inputs.push_back(in.node());
    n->backprop = std::forward<Fn>(backprop);
  }
  return Var<T>(std::move(n));
}

// Runs reverse accumulation from a scalar root with seed gradient 1.
template <typename T>
void backward(const Var<T>& root) {
  if (!root.requires_grad()) return;
  if (root.numel() != 1) throw ShapeError("backward() needs a scalar root, got " + shape_str(root.shape()));

  using NodePtr = detail::Node<T>*;
  std::vector<NodePtr> order;
  std::unordered_set<NodePtr> seen;
  std::vector<std::pair<NodePtr, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      NodePtr child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodePtr node = *it;
    if (node->backprop && !node->grad.empty()) node->backprop(node->grad);
  }
}

}  // namespace semiseg

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "depthmaster/tensor.hpp"

namespace depthmaster {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Tensor<T>&)> backward;

  Tensor<T>& grad_buffer() {
    if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

/// Handle to a value in a dynamically recorded computation graph.
///
/// Leaves created with `parameter()` persist across graphs and accumulate
/// gradients until `zero_grad()`. Intermediate nodes keep their parents
/// alive through the backward closure, so dropping the root releases the
/// whole graph. Nodes are only recorded when some input requires a
/// gradient; pure inference never stores closures or saved activations.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Var parameter(Tensor<T> value) { return Var(std::move(value), true); }
  static Var constant(Tensor<T> value) { return Var(std::move(value), false); }

  explicit operator bool() const noexcept { return static_cast<bool>(node_); }

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return node_->grad.shape() == node_->value.shape(); }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& grad_buffer() const { return node_->grad_buffer(); }
  void zero_grad() { node_->grad = Tensor<T>(); }

  Node<T>* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Build the output of a differentiable op. `backward` receives the
/// upstream gradient and accumulates into the inputs it captured.
template <typename T, typename Backward>
Var<T> make_op(Tensor<T> value, const std::vector<Var<T>>& inputs,
               Backward&& backward) {
  Var<T> out(std::move(value), false);
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  Node<T>* node = out.node();
  node->requires_grad = true;
  for (const auto& in : inputs) {
    if (in.requires_grad()) node->parents.push_back(in.shared());
  }
  node->backward = std::forward<Backward>(backward);
  return out;
}

/// Reverse-mode sweep from a scalar root. Gradients accumulate into every
/// reachable node that requires them; call `zero_grad` on parameters between
/// optimizer steps.
template <typename T>
void backward(const Var<T>& root, T seed = T{1}) {
  if (root.value().size() != 1) {
    throw ShapeError("backward: root must be a scalar, got " +
                     to_string(root.shape()));
  }
  if (!root.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Intermediate gradients are local to this sweep; leaves keep theirs.
  for (Node<T>* n : order) {
    if (n->backward) n->grad = Tensor<T>();
  }
  root.node()->grad_buffer()[0] += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && n->grad.shape() == n->value.shape()) {
      n->backward(n->grad);
    }
  }
  for (Node<T>* n : order) {
    if (n->backward) n->grad = Tensor<T>();
  }
}

}  // namespace depthmaster

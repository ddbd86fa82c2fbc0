#pragma once

// Minimal reverse-mode tape. Every op produces a Var whose node remembers its
// parents and a closure that pushes the node's gradient back into them.

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "refgen/core/tensor.hpp"

namespace refgen::nn {

template <class T>
struct Node;
template <class T>
using NodePtr = std::shared_ptr<Node<T>>;

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<NodePtr<T>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor<T>& grad_buf() {
    if (grad.size() != value.size()) grad = Tensor<T>(value.shape);
    return grad;
  }
  bool has_grad() const { return !grad.empty(); }
};

inline thread_local int g_no_grad_depth = 0;

/// Disables graph construction in scope (inference, sampling, metric passes).
struct NoGradGuard {
  NoGradGuard() { ++g_no_grad_depth; }
  ~NoGradGuard() { --g_no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return g_no_grad_depth == 0; }

template <class T>
class Var {
public:
  Var() = default;
  explicit Var(Tensor<T> v, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(v);
    node_->requires_grad = requires_grad;
  }
  explicit Var(NodePtr<T> n) : node_(std::move(n)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& mutable_grad() { return node_->grad_buf(); }
  const Shape& shape() const { return node_->value.shape; }
  int dim(int i) const { return node_->value.dim(i); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }
  void zero_grad() {
    if (node_->has_grad()) node_->grad.fill(T(0));
  }
  const NodePtr<T>& node() const { return node_; }

  // Scalar access for losses.
  T item() const { return node_->value.data.at(0); }

private:
  NodePtr<T> node_;
};

template <class T>
Var<T> constant(Tensor<T> v) {
  return Var<T>(std::move(v), false);
}

/// Builds the result node; the closure is only kept if some parent needs a gradient.
template <class T, class F>
Var<T> make_result(Tensor<T> value, std::initializer_list<Var<T>> parents, F&& backward) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  if (grad_enabled()) {
    for (const auto& p : parents) {
      if (p.defined() && p.requires_grad()) {
        n->requires_grad = true;
        break;
      }
    }
  }
  if (n->requires_grad) {
    for (const auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::forward<F>(backward);
  }
  return Var<T>(std::move(n));
}

/// Reverse sweep from a scalar root.
template <class T>
void backward(const Var<T>& root) {
  REFGEN_CHECK(root.size() == 1, "backward() needs a scalar root, got " + shape_str(root.shape()));
  if (!root.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node<T>* p = node->parents[idx++].get();
      if (p && p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->grad_buf().data[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
  }
  // Interior gradients are no longer needed; leaves keep theirs.
  for (Node<T>* n : order) {
    if (n->backward_fn) {
      n->grad = Tensor<T>();
    }
  }
}

// Helper for closures: gradient buffer of parent i, or nullptr when it is frozen.
template <class T>
Tensor<T>* parent_grad(Node<T>& self, std::size_t i) {
  auto& p = self.parents[i];
  if (!p || !p->requires_grad) return nullptr;
  return &p->grad_buf();
}

template <class T>
const Tensor<T>& parent_value(Node<T>& self, std::size_t i) {
  return self.parents[i]->value;
}

}  // namespace refgen::nn

#pragma once

// Dense row-major tensor with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle onto a shared graph node. Operations in ops.hpp
// create new nodes that remember their parents and a backward closure; calling
// backward() on a scalar result walks the graph once in reverse topological
// order and accumulates gradients into every node that requires them.

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "hieratok/errors.hpp"

namespace hieratok {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // leaves: sized like value iff requires_grad; op results: filled by backward
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  const char* op = "leaf";

  void enable_grad() {
    requires_grad = true;
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

inline bool& grad_disabled_flag() {
  thread_local bool disabled = false;
  return disabled;
}

}  // namespace detail

/// While alive, newly created tensors on this thread do not record history.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_disabled_flag()) { detail::grad_disabled_flag() = true; }
  ~NoGradGuard() { detail::grad_disabled_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return !detail::grad_disabled_flag(); }

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodeT = detail::Node<T>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<NodeT>()) {
    for (std::size_t d : shape) {
      if (d == 0) throw DimensionError("tensor: zero-sized dimension in shape " + to_string(shape));
    }
    if (hieratok::numel(shape) != data.size()) {
      throw DimensionError("tensor: shape " + to_string(shape) + " needs " +
                           std::to_string(hieratok::numel(shape)) + " values, got " +
                           std::to_string(data.size()));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    if (requires_grad) node_->enable_grad();
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }

  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    std::vector<T> data(hieratok::numel(shape), v);
    return Tensor(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }

  /// Result of an operation. History is kept only if some parent needs a gradient.
  static Tensor from_op(const char* op, Shape shape, std::vector<T> data,
                        std::vector<Tensor> inputs, std::function<void(NodeT&)> backward) {
    Tensor out(std::move(shape), std::move(data));
    out.node_->op = op;
    bool needs = false;
    if (grad_enabled()) {
      for (const auto& in : inputs) needs = needs || in.requires_grad();
    }
    if (needs) {
      out.node_->requires_grad = true;
      out.node_->parents.reserve(inputs.size());
      for (auto& in : inputs) out.node_->parents.push_back(in.node_);
      out.node_->backward = std::move(backward);
    }
    return out;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  /// Direct write access; intended for initialisation and optimiser updates.
  std::span<T> mutable_data() { return node_->value; }
  const T& operator[](std::size_t i) const { return node_->value[i]; }

  T item() const {
    if (numel() != 1) throw DimensionError("item: tensor has shape " + hieratok::to_string(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }

  void set_requires_grad(bool on) {
    if (on) {
      node_->enable_grad();
    } else {
      node_->requires_grad = false;
      node_->grad.clear();
    }
  }

  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad; }

  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

  /// Copy of the values with no history.
  Tensor detach() const { return Tensor(shape(), node_->value); }

  /// Backpropagate from this scalar. Leaf gradients accumulate across calls.
  void backward() const {
    if (numel() != 1) {
      throw DimensionError("backward: root must be a scalar, got shape " + hieratok::to_string(shape()));
    }
    if (!requires_grad()) return;
    std::vector<NodeT*> order = topological_order();
    for (NodeT* n : order) {
      if (n->backward) n->grad.assign(n->value.size(), T(0));
    }
    node_->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if ((*it)->backward) (*it)->backward(**it);
    }
  }

  const std::shared_ptr<NodeT>& node() const { return node_; }

 private:
  // Post-order DFS so every node precedes its consumers.
  std::vector<NodeT*> topological_order() const {
    std::vector<NodeT*> order;
    std::unordered_set<NodeT*> seen;
    std::vector<std::pair<NodeT*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        NodeT* p = n->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    return order;
  }

  std::shared_ptr<NodeT> node_;
};

}  // namespace hieratok

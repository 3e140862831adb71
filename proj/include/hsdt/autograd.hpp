// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "hsdt/tensor.hpp"

namespace hsdt {

/// A named, owned tensor. Trainable parameters receive gradients and optimizer updates;
/// non-trainable ones (batch-norm running statistics) are persisted but never differentiated.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v, bool train = true)
      : name(std::move(n)), value(std::move(v)), trainable(train) {}
};

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
  const Parameter<T>* param = nullptr;
  bool requires_grad = false;

  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>::zeros(value.shape());
    return grad;
  }
};

template <typename T>
class Tape;

/// Handle to a value produced by (or fed into) a tape. Without a tape, a Var is a plain
/// immutable value and no history is kept.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(std::shared_ptr<Node<T>> node, Tape<T>* tape) : node_(std::move(node)), tape_(tape) {}

  /// Untracked value.
  static Var constant(Tensor<T> value) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    return Var(std::move(node), nullptr);
  }

  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(int axis) const { return node_->value.dim(axis); }
  std::size_t rank() const { return node_->value.rank(); }

  /// Gradient accumulated by the last backward pass (zeros if the value did not
  /// influence the loss).
  Tensor<T> grad() const {
    if (node_->grad.empty()) return Tensor<T>::zeros(node_->value.shape());
    return node_->grad;
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tape<T>* tape() const { return tape_; }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
  Tape<T>* tape_ = nullptr;
};

template <typename T>
using GradientMap = std::unordered_map<const Parameter<T>*, Tensor<T>>;

/// Records differentiable operations in creation order (which is a topological order)
/// and runs the reverse sweep.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that is differentiated but is not a model parameter (e.g. a network input
  /// under a gradient check).
  Var<T> variable(Tensor<T> value) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    node->requires_grad = true;
    nodes_.push_back(node);
    return Var<T>(node, this);
  }

  Var<T> constant(Tensor<T> value) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    return Var<T>(node, this);
  }

  /// Leaf bound to a parameter. Repeated calls for the same parameter return the same
  /// node so its gradient is accumulated once.
  Var<T> parameter(const Parameter<T>& p) {
    if (auto it = params_.find(&p); it != params_.end()) return Var<T>(it->second, this);
    auto node = std::make_shared<Node<T>>();
    node->value = p.value;
    node->param = &p;
    node->requires_grad = p.trainable;
    nodes_.push_back(node);
    params_.emplace(&p, node);
    return Var<T>(node, this);
  }

  void record(const std::shared_ptr<Node<T>>& node) { nodes_.push_back(node); }

  /// Reverse sweep from a scalar loss. Returns the gradient of every parameter leaf
  /// recorded on this tape; leaf variables expose theirs through Var::grad().
  GradientMap<T> backward(const Var<T>& loss) {
    if (loss.value().numel() != 1) {
      throw ShapeError("backward() requires a scalar loss, got shape " +
                       shape_str(loss.shape()));
    }
    for (auto& n : nodes_) n->grad = Tensor<T>();
    loss.node()->grad = Tensor<T>::ones(loss.shape());
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<T>& n = **it;
      if (n.backward && !n.grad.empty()) n.backward(n);
    }
    GradientMap<T> grads;
    for (auto& [param, node] : params_) {
      if (!param->trainable) continue;
      grads.emplace(param, node->grad.empty() ? Tensor<T>::zeros(node->value.shape())
                                              : node->grad);
    }
    return grads;
  }

  std::size_t size() const { return nodes_.size(); }

  void clear() {
    nodes_.clear();
    params_.clear();
  }

 private:
  std::vector<std::shared_ptr<Node<T>>> nodes_;
  std::unordered_map<const Parameter<T>*, std::shared_ptr<Node<T>>> params_;
};

/// Parameter as a Var: tracked when a tape is supplied, an untracked constant otherwise.
template <typename T>
Var<T> bind(Tape<T>* tape, const Parameter<T>& p) {
  return tape ? tape->parameter(p) : Var<T>::constant(p.value);
}

namespace detail {

/// Wraps an op result. History is recorded only when some input requires a gradient.
template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> inputs,
                   std::function<void(Node<T>&)> backward) {
  Tape<T>* tape = nullptr;
  bool needs = false;
  for (const auto& in : inputs) {
    if (in.requires_grad()) {
      needs = true;
      if (!tape) tape = in.tape();
    }
  }
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  if (needs && tape) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const auto& in : inputs) node->inputs.push_back(in.node());
    node->backward = std::move(backward);
    tape->record(node);
  }
  return Var<T>(std::move(node), tape);
}

/// Gradient buffer of input `i`, or nullptr when that input is not differentiated.
template <typename T>
Tensor<T>* input_grad(Node<T>& self, std::size_t i) {
  auto& in = self.inputs[i];
  return in->requires_grad ? &in->grad_buffer() : nullptr;
}

}  // namespace detail
}  // namespace hsdt

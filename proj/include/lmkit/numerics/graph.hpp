// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "lmkit/numerics/tensor.hpp"

namespace lmkit {

template <typename T>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; only valid while its graph lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* g, std::size_t id) : graph_(g), id_(id) {}

  Graph<T>& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  const Tensor<T>& value() const { return graph_->value(*this); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return graph_->requires_grad(*this); }

 private:
  Graph<T>* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Append-only tape for reverse-mode differentiation. Nodes are recorded in
/// creation order, which is already a topological order, so backward() is a
/// single reverse sweep. A graph belongs to one thread.
template <typename T>
class Graph {
 public:
  /// Called during backward with the node itself and its output gradient; it
  /// accumulates into the parents through accumulate().
  using Backward =
      std::function<void(Graph&, Var<T> self, const Tensor<T>& out_grad)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), {}, {}, requires_grad});
    return Var<T>(this, nodes_.size() - 1);
  }
  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  /// Records an operation result. The backward closure is dropped when no
  /// parent needs a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> parents,
                Backward backward) {
    return record(std::move(value), std::span<const Var<T>>(parents.begin(), parents.size()),
                  std::move(backward));
  }
  Var<T> record(Tensor<T> value, std::span<const Var<T>> parents, Backward backward) {
    bool needs = false;
    for (const auto& p : parents) needs = needs || requires_grad(p);
    Node n{std::move(value), {}, needs ? std::move(backward) : Backward{}, needs};
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  const Tensor<T>& value(Var<T> v) const { return nodes_[v.id()].value; }
  bool requires_grad(Var<T> v) const { return nodes_[v.id()].requires_grad; }

  /// Gradient of the last backward() target w.r.t. v; zeros if v was not reached.
  Tensor<T> grad(Var<T> v) const {
    const Node& n = nodes_[v.id()];
    if (n.grad.empty() && n.value.size() != 0) return Tensor<T>(n.value.shape());
    return n.grad;
  }

  /// Adds g into v's gradient buffer. No-op for nodes that do not need one.
  void accumulate(Var<T> v, const Tensor<T>& g) {
    Node& n = nodes_[v.id()];
    if (!n.requires_grad) return;
    if (n.grad.empty()) {
      n.grad = Tensor<T>(n.value.shape());
    }
    T* dst = n.grad.data();
    const T* src = g.data();
    for (std::size_t i = 0, e = n.grad.size(); i < e; ++i) dst[i] += src[i];
  }
  /// In-place access for ops that scatter into a parent gradient.
  Tensor<T>& grad_buffer(Var<T> v) {
    Node& n = nodes_[v.id()];
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  /// Reverse sweep from a single-element node, seeded with d(target)/d(target) = 1.
  void backward(Var<T> target) {
    if (value(target).size() != 1) {
      throw Error("backward: target must hold one element, has shape " +
                  shape_str(value(target).shape()));
    }
    for (auto& n : nodes_) n.grad = Tensor<T>();
    grad_buffer(target)[0] = T{1};
    for (std::size_t i = target.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      // The closure may grow grad buffers of earlier nodes but never touches
      // nodes_ itself, so the reference stays valid.
      n.backward(*this, Var<T>(this, i), n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    Backward backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

}  // namespace lmkit

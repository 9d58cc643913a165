#pragma once

#include <deque>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "advseg/tensor.hpp"

namespace advseg {

/// A named trainable tensor with a persistent gradient buffer.
///
/// Gradients accumulate across backward passes until `zero_grad` is called on
/// the owning set; one training step relies on this to combine the adversarial
/// and segmentation terms.
template <typename Scalar>
struct Parameter {
  std::string name;
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
};

/// Owns parameters with stable addresses, in registration order.
template <typename Scalar>
class ParameterSet {
 public:
  Parameter<Scalar>& add(std::string name, Tensor<Scalar> init) {
    Tensor<Scalar> grad(init.shape());
    params_.push_back({std::move(name), std::move(init), std::move(grad)});
    return params_.back();
  }

  void zero_grad() {
    for (auto& p : params_) p.grad.array().setZero();
  }
  void scale_grad(Scalar s) {
    for (auto& p : params_) p.grad.array() *= s;
  }

  /// Total number of scalar parameters.
  Index count() const {
    Index n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  const Parameter<Scalar>* find(std::string_view name) const {
    for (const auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }
  Parameter<Scalar>* find(std::string_view name) {
    for (auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  std::size_t size() const { return params_.size(); }
  Parameter<Scalar>& operator[](std::size_t i) { return params_[i]; }
  const Parameter<Scalar>& operator[](std::size_t i) const { return params_[i]; }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::deque<Parameter<Scalar>> params_;
};

template <typename Scalar>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
template <typename Scalar>
class Var {
 public:
  Var() = default;

  const Tensor<Scalar>& value() const { return graph_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  Graph<Scalar>* graph() const noexcept { return graph_; }
  Index id() const noexcept { return id_; }
  bool valid() const noexcept { return graph_ != nullptr; }

 private:
  friend class Graph<Scalar>;
  Var(Graph<Scalar>* g, Index id) : graph_(g), id_(id) {}

  Graph<Scalar>* graph_ = nullptr;
  Index id_ = -1;
};

/// Tape of executed ops. Nodes are appended in execution order, which is a
/// topological order by construction; backward walks it once in reverse.
template <typename Scalar>
class Graph {
 public:
  using Backward = std::function<void(Graph&, Index self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf that never receives a gradient.
  Var<Scalar> constant(Tensor<Scalar> value) { return push("constant", std::move(value), {}, nullptr, nullptr, false); }

  /// Leaf whose gradient is readable through `grad()` after backward.
  Var<Scalar> input(Tensor<Scalar> value) { return push("input", std::move(value), {}, nullptr, nullptr, true); }

  /// Leaf bound to a parameter; backward accumulates into `p.grad`. With
  /// `trainable == false` the value is used as a constant.
  Var<Scalar> parameter(Parameter<Scalar>& p, bool trainable = true) {
    if (!trainable) return push("constant", p.value, {}, nullptr, nullptr, false);
    return push("parameter", p.value, {}, nullptr, &p, true);
  }

  /// Records an op output. `backward` is kept only if some input needs a
  /// gradient. Throws NonFiniteError naming `op` if the value is not finite.
  Var<Scalar> record(std::string_view op, Tensor<Scalar> value, std::vector<Index> inputs, Backward backward) {
    if (!value.all_finite()) throw NonFiniteError(std::string(op));
    bool needs = false;
    for (Index i : inputs) needs = needs || nodes_.at(static_cast<std::size_t>(i)).requires_grad;
    return push(op, std::move(value), std::move(inputs), needs ? std::move(backward) : nullptr, nullptr, needs);
  }

  /// Reverse-mode sweep from a scalar root. Node gradients are reset at the
  /// start of every call; parameter gradients accumulate.
  void backward(const Var<Scalar>& root) {
    if (root.graph() != this || root.id() < 0 || root.id() >= size()) {
      throw Error("backward: root is not a node of this graph");
    }
    if (value(root.id()).size() != 1) {
      throw ShapeError("backward: root must be a scalar, got shape " + to_string(root.shape()));
    }
    grads_.assign(nodes_.size(), Tensor<Scalar>());
    grads_[static_cast<std::size_t>(root.id())] = Tensor<Scalar>::constant(root.shape(), Scalar(1));
    for (Index i = root.id(); i >= 0; --i) {
      auto& node = nodes_[static_cast<std::size_t>(i)];
      auto& g = grads_[static_cast<std::size_t>(i)];
      if (g.empty() || !node.requires_grad) continue;
      if (node.param != nullptr) {
        node.param->grad.array() += g.array();
      } else if (node.backward) {
        node.backward(*this, i);
      }
    }
  }

  /// Gradient of the last backward root w.r.t. `v`; zeros if `v` was not on a path.
  Tensor<Scalar> grad(const Var<Scalar>& v) const {
    auto i = static_cast<std::size_t>(v.id());
    if (i < grads_.size() && !grads_[i].empty()) return grads_[i];
    return Tensor<Scalar>(v.shape());
  }

  // Accessors for op implementations.
  const Tensor<Scalar>& value(Index id) const { return nodes_.at(static_cast<std::size_t>(id)).value; }
  const std::vector<Index>& inputs(Index id) const { return nodes_.at(static_cast<std::size_t>(id)).inputs; }
  bool requires_grad(Index id) const { return nodes_.at(static_cast<std::size_t>(id)).requires_grad; }
  const Tensor<Scalar>& out_grad(Index id) const { return grads_.at(static_cast<std::size_t>(id)); }

  /// Gradient accumulator for `id`, zero-initialized on first touch.
  Tensor<Scalar>& grad_buffer(Index id) {
    auto& g = grads_.at(static_cast<std::size_t>(id));
    if (g.empty()) g = Tensor<Scalar>(value(id).shape());
    return g;
  }

  Index size() const noexcept { return static_cast<Index>(nodes_.size()); }
  std::string_view op_name(Index id) const { return nodes_.at(static_cast<std::size_t>(id)).op; }

 private:
  struct Node {
    std::string op;
    Tensor<Scalar> value;
    std::vector<Index> inputs;
    Backward backward;
    Parameter<Scalar>* param = nullptr;
    bool requires_grad = false;
  };

  Var<Scalar> push(std::string_view op, Tensor<Scalar> value, std::vector<Index> inputs, Backward backward,
                   Parameter<Scalar>* param, bool requires_grad) {
    nodes_.push_back({std::string(op), std::move(value), std::move(inputs), std::move(backward), param, requires_grad});
    return Var<Scalar>(this, size() - 1);
  }

  std::vector<Node> nodes_;
  std::vector<Tensor<Scalar>> grads_;
};

}  // namespace advseg

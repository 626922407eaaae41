#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <string>
#include <vector>

#include "tpr/tensor.hpp"

namespace tpr {

/// A trainable tensor together with its accumulated gradient.
template <typename S>
struct Parameter {
  std::string name;
  Tensor<S> value;
  Tensor<S> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<S> v) : name(std::move(n)), value(std::move(v)), grad(Tensor<S>::zeros(value.shape())) {}

  void zero_grad() { grad = Tensor<S>::zeros(value.shape()); }
};

template <typename S>
class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; only valid while
/// the tape generation it was created in is alive.
template <typename S>
class Var {
 public:
  Var() = default;

  const Tensor<S>& value() const;
  const Shape& shape() const { return value().shape(); }
  Index dim(Index axis) const { return value().dim(axis); }
  Index rank() const { return value().rank(); }
  Index numel() const { return value().numel(); }
  bool requires_grad() const;

  Tape<S>& tape() const;
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape<S>;
  Var(Tape<S>* tape, std::size_t id, std::uint64_t generation) : tape_(tape), id_(id), generation_(generation) {}

  Tape<S>* tape_ = nullptr;
  std::size_t id_ = 0;
  std::uint64_t generation_ = 0;
};

/// Reverse-mode autodiff tape. Nodes are appended in evaluation order, so
/// walking ids backwards from the root is a valid topological order and
/// visits each node exactly once.
template <typename S>
class Tape {
 public:
  /// Propagates `grad_out` (same shape as the node value) into the parents.
  using BackwardFn = std::function<void(Tape&, const Tensor<S>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<S> constant(Tensor<S> value);
  /// Differentiable input that is not a Parameter (used by gradient checks).
  Var<S> input(Tensor<S> value);
  /// Leaf bound to `p`; backward() adds its gradient into `p.grad`.
  Var<S> param(Parameter<S>& p);

  Var<S> record(const char* op, Tensor<S> value, std::initializer_list<Var<S>> parents, BackwardFn fn);
  Var<S> record(const char* op, Tensor<S> value, const std::vector<Var<S>>& parents, BackwardFn fn);

  /// Runs reverse accumulation from a scalar root. Parameter leaves have their
  /// gradient added to Parameter::grad. The tape is released afterwards.
  void backward(const Var<S>& root);

  /// Gradient of the last backward() w.r.t. `v`; zeros if none reached it.
  Tensor<S> grad(const Var<S>& v) const;

  const Tensor<S>& value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  /// Gradient buffer of node `id`, zero-initialized on first access.
  Tensor<S>& grad_slot(std::size_t id);

  /// Frees every node. Vars created before clear() become invalid.
  void clear();

  void set_check_finite(bool on) { check_finite_ = on; }
  std::size_t size() const noexcept { return nodes_.size(); }

  void check(const Var<S>& v) const;

 private:
  struct Node {
    Tensor<S> value;
    Tensor<S> grad;
    bool has_grad = false;
    bool requires_grad = false;
    const char* op = "";
    BackwardFn backward;
    Parameter<S>* param = nullptr;
  };

  Var<S> push(Node node);

  std::deque<Node> nodes_;
  std::uint64_t generation_ = 1;
  bool released_ = false;
  bool check_finite_ = false;
};

template <typename S>
const Tensor<S>& Var<S>::value() const {
  tape().check(*this);
  return tape_->value(id_);
}

template <typename S>
bool Var<S>::requires_grad() const {
  tape().check(*this);
  return tape_->needs_grad(id_);
}

template <typename S>
Tape<S>& Var<S>::tape() const {
  if (tape_ == nullptr) throw Error("Var: uninitialized handle");
  return *tape_;
}

}  // namespace tpr

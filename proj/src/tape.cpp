#include "tpr/tape.hpp"

#include <cmath>

namespace tpr {

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Index normalize_axis(Index axis, Index rank, const char* op) {
  const Index a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  }
  return a;
}

template <typename S>
void Tape<S>::check(const Var<S>& v) const {
  if (v.tape_ != this) throw Error("Var belongs to a different tape");
  if (v.generation_ != generation_ || v.id_ >= nodes_.size()) throw Error("Var refers to a freed tape");
}

template <typename S>
Var<S> Tape<S>::push(Node node) {
  if (released_) throw Error("tape already consumed by backward(); clear() it before recording");
  if (check_finite_) {
    for (S x : node.value.values()) {
      if (!std::isfinite(x)) throw NumericError(std::string(node.op) + ": non-finite value in output");
    }
  }
  nodes_.push_back(std::move(node));
  return Var<S>(this, nodes_.size() - 1, generation_);
}

template <typename S>
Var<S> Tape<S>::constant(Tensor<S> value) {
  Node n;
  n.value = std::move(value);
  n.op = "constant";
  return push(std::move(n));
}

template <typename S>
Var<S> Tape<S>::input(Tensor<S> value) {
  Node n;
  n.value = std::move(value);
  n.op = "input";
  n.requires_grad = true;
  return push(std::move(n));
}

template <typename S>
Var<S> Tape<S>::param(Parameter<S>& p) {
  Node n;
  n.value = p.value;
  n.op = "param";
  n.requires_grad = true;
  n.param = &p;
  return push(std::move(n));
}

template <typename S>
Var<S> Tape<S>::record(const char* op, Tensor<S> value, std::initializer_list<Var<S>> parents, BackwardFn fn) {
  return record(op, std::move(value), std::vector<Var<S>>(parents), std::move(fn));
}

template <typename S>
Var<S> Tape<S>::record(const char* op, Tensor<S> value, const std::vector<Var<S>>& parents, BackwardFn fn) {
  bool req = false;
  for (const auto& p : parents) {
    check(p);
    req = req || nodes_[p.id_].requires_grad;
  }
  Node n;
  n.value = std::move(value);
  n.op = op;
  n.requires_grad = req;
  if (req) n.backward = std::move(fn);
  return push(std::move(n));
}

template <typename S>
Tensor<S>& Tape<S>::grad_slot(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor<S>::zeros(n.value.shape());
    n.has_grad = true;
  }
  return n.grad;
}

template <typename S>
void Tape<S>::backward(const Var<S>& root) {
  if (released_) throw Error("backward: tape already consumed by a previous backward()");
  check(root);
  if (nodes_[root.id_].value.numel() != 1) {
    throw ShapeError("backward: root must be scalar, got shape " + shape_str(nodes_[root.id_].value.shape()));
  }
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor<S>();
  }
  grad_slot(root.id_)[0] = S(1);
  for (std::size_t i = root.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.requires_grad) continue;
    if (n.backward) {
      n.backward(*this, n.grad);
    } else if (n.param != nullptr) {
      if (n.param->grad.shape() != n.value.shape()) n.param->grad = Tensor<S>::zeros(n.value.shape());
      auto dst = n.param->grad.vector();
      dst += n.grad.vector();
    }
  }
  for (auto& n : nodes_) n.backward = nullptr;
  released_ = true;
}

template <typename S>
Tensor<S> Tape<S>::grad(const Var<S>& v) const {
  check(v);
  const Node& n = nodes_[v.id_];
  return n.has_grad ? n.grad : Tensor<S>::zeros(n.value.shape());
}

template <typename S>
void Tape<S>::clear() {
  nodes_.clear();
  ++generation_;
  released_ = false;
}

template class Tape<float>;
template class Tape<double>;

}  // namespace tpr

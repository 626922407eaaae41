#pragma once

#include <optional>
#include <span>
#include <vector>

#include "tpr/tape.hpp"

// Differentiable primitives over Var<S>. Every function records one node on
// the tape of its (first) argument and throws ShapeError naming the op and
// the offending shapes when inputs are incompatible.
//
// Elementwise binaries follow numpy broadcasting. Reductions accumulate in
// double regardless of S.

namespace tpr {

// Elementwise arithmetic.
template <typename S> Var<S> add(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> sub(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> mul(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> scale(const Var<S>& x, S c);
template <typename S> Var<S> add_scalar(const Var<S>& x, S c);
template <typename S> Var<S> power(const Var<S>& x, S exponent);
template <typename S> Var<S> sqrt(const Var<S>& x);
template <typename S> Var<S> exp(const Var<S>& x);
template <typename S> Var<S> log(const Var<S>& x);
/// max(x, floor); gradient is zero where the floor is active.
template <typename S> Var<S> clamp_min(const Var<S>& x, S floor);

// Activations.
template <typename S> Var<S> relu(const Var<S>& x);
/// Exact (erf) GELU.
template <typename S> Var<S> gelu(const Var<S>& x);
template <typename S> Var<S> sigmoid(const Var<S>& x);
template <typename S> Var<S> tanh(const Var<S>& x);

/// [M,K]x[K,N] or batched [B,M,K]x[B,K,N].
template <typename S> Var<S> matmul(const Var<S>& a, const Var<S>& b);

// Reductions.
template <typename S> Var<S> sum(const Var<S>& x, Index axis, bool keepdim = false);
template <typename S> Var<S> mean(const Var<S>& x, Index axis, bool keepdim = false);
template <typename S> Var<S> sum(const Var<S>& x);
template <typename S> Var<S> mean(const Var<S>& x);

/// Softmax over the last axis of x + mask. `mask`, when given, is a
/// non-differentiable additive term whose shape is a suffix of x's shape;
/// -inf entries give exactly zero probability.
template <typename S> Var<S> softmax(const Var<S>& x, const Tensor<S>* mask = nullptr);
template <typename S> Var<S> log_softmax(const Var<S>& x);

/// Normalizes over the last axis, then applies gamma * x + beta.
template <typename S> Var<S> layer_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, S eps = S(1e-5));

/// Running statistics owned by a batch-norm layer.
template <typename S>
struct BatchNormStats {
  Tensor<S> running_mean;
  Tensor<S> running_var;
  S momentum = S(0.9);
  S eps = S(1e-5);
};

/// Batch norm over the rows of x [M, C]. In training mode normalizes with
/// batch statistics (biased variance) and updates `stats` as
/// running = momentum * running + (1 - momentum) * batch (unbiased variance);
/// in evaluation mode uses the running statistics.
template <typename S>
Var<S> batch_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, BatchNormStats<S>& stats, bool training);

enum class PadMode { Zero, Replicate };

struct Conv2dOptions {
  Index stride = 1;
  Index padding = 0;
  PadMode pad_mode = PadMode::Zero;
};

/// x [B,C,H,W], weight [O,C,kh,kw], bias [O] -> [B,O,Ho,Wo].
template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& weight, const std::optional<Var<S>>& bias, const Conv2dOptions& opt);

// Shape manipulation.
template <typename S> Var<S> reshape(const Var<S>& x, Shape shape);
template <typename S> Var<S> permute(const Var<S>& x, const std::vector<Index>& perm);
template <typename S> Var<S> transpose(const Var<S>& x, Index axis0, Index axis1);
template <typename S> Var<S> concat(const std::vector<Var<S>>& xs, Index axis);
/// Elements start, start+step, ... < stop along `axis`.
template <typename S> Var<S> slice(const Var<S>& x, Index axis, Index start, Index stop, Index step = 1);

/// Rows of table [V, d] gathered by `indices`; output shape is prefix + [d].
template <typename S> Var<S> embedding(const Var<S>& table, std::span<const int> indices, Shape prefix);

/// Identity on values; passes exactly zero gradient.
template <typename S> Var<S> stop_gradient(const Var<S>& x);

/// x / max(||x||, floor) along `axis`.
template <typename S> Var<S> l2_normalize(const Var<S>& x, Index axis = -1, S floor = S(1e-12));

template <typename S> Var<S> operator+(const Var<S>& a, const Var<S>& b) { return add(a, b); }
template <typename S> Var<S> operator-(const Var<S>& a, const Var<S>& b) { return sub(a, b); }
template <typename S> Var<S> operator*(const Var<S>& a, const Var<S>& b) { return mul(a, b); }
template <typename S> Var<S> operator*(S c, const Var<S>& x) { return scale(x, c); }
template <typename S> Var<S> operator-(const Var<S>& x) { return scale(x, S(-1)); }

/// Resulting shape of numpy-style broadcasting; throws ShapeError naming `op`.
Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op);

}  // namespace tpr

#include "tpr/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>

namespace tpr {

namespace {

template <typename S>
void add_into(Tensor<S>& dst, const Tensor<S>& src) {
  dst.vector() += src.vector();
}

// outer x len x inner decomposition around `axis`.
struct AxisSplit {
  Index outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, Index axis) {
  AxisSplit s;
  for (Index i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  s.len = shape[static_cast<std::size_t>(axis)];
  for (Index i = axis + 1; i < static_cast<Index>(shape.size()); ++i) s.inner *= shape[static_cast<std::size_t>(i)];
  return s;
}

// For every flat index of `out`, the flat index into an input of shape `in`
// that broadcasts to it.
std::vector<Index> broadcast_offsets(const Shape& in, const Shape& out) {
  const std::size_t r = out.size();
  std::vector<Index> stride(r, 0);
  Index st = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t ai = in.size() - 1 - k;
    const std::size_t oi = r - 1 - k;
    stride[oi] = in[ai] == 1 ? 0 : st;
    st *= in[ai];
  }
  const Index n = shape_numel(out);
  std::vector<Index> offsets(static_cast<std::size_t>(n));
  std::vector<Index> counter(r, 0);
  Index off = 0;
  for (Index i = 0; i < n; ++i) {
    offsets[static_cast<std::size_t>(i)] = off;
    for (std::size_t k = r; k-- > 0;) {
      ++counter[k];
      off += stride[k];
      if (counter[k] < out[k]) break;
      off -= stride[k] * counter[k];
      counter[k] = 0;
    }
  }
  return offsets;
}

struct BroadcastPlan {
  Shape out;
  bool a_full = true, b_full = true;
  std::vector<Index> ia, ib;

  Index a(Index i) const { return a_full ? i : ia[static_cast<std::size_t>(i)]; }
  Index b(Index i) const { return b_full ? i : ib[static_cast<std::size_t>(i)]; }
};

std::shared_ptr<BroadcastPlan> plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  auto plan = std::make_shared<BroadcastPlan>();
  plan->out = broadcast_shapes(a, b, op);
  if (a != plan->out) {
    plan->a_full = false;
    plan->ia = broadcast_offsets(a, plan->out);
  }
  if (b != plan->out) {
    plan->b_full = false;
    plan->ib = broadcast_offsets(b, plan->out);
  }
  return plan;
}

enum class BinaryKind { Add, Sub, Mul };

template <typename S>
Var<S> binary(const Var<S>& a, const Var<S>& b, BinaryKind kind, const char* op) {
  Tape<S>& tape = a.tape();
  const Tensor<S>& av = a.value();
  const Tensor<S>& bv = b.value();
  auto plan = plan_broadcast(av.shape(), bv.shape(), op);
  Tensor<S> out(plan->out);
  const Index n = out.numel();
  if (plan->a_full && plan->b_full) {
    switch (kind) {
      case BinaryKind::Add: out.vector() = av.vector() + bv.vector(); break;
      case BinaryKind::Sub: out.vector() = av.vector() - bv.vector(); break;
      case BinaryKind::Mul: out.vector() = av.vector().cwiseProduct(bv.vector()); break;
    }
  } else {
    for (Index i = 0; i < n; ++i) {
      const S x = av[plan->a(i)], y = bv[plan->b(i)];
      out[i] = kind == BinaryKind::Add ? x + y : kind == BinaryKind::Sub ? x - y : x * y;
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(op, std::move(out), {a, b}, [ia, ib, plan, kind, n](Tape<S>& t, const Tensor<S>& g) {
    if (t.needs_grad(ia)) {
      Tensor<S>& ga = t.grad_slot(ia);
      const Tensor<S>& bv = t.value(ib);
      for (Index i = 0; i < n; ++i) ga[plan->a(i)] += kind == BinaryKind::Mul ? g[i] * bv[plan->b(i)] : g[i];
    }
    if (t.needs_grad(ib)) {
      Tensor<S>& gb = t.grad_slot(ib);
      const Tensor<S>& av = t.value(ia);
      for (Index i = 0; i < n; ++i) {
        const S d = kind == BinaryKind::Add ? g[i] : kind == BinaryKind::Sub ? -g[i] : g[i] * av[plan->a(i)];
        gb[plan->b(i)] += d;
      }
    }
  });
}

// Elementwise unary op. `df(x, y)` is dy/dx given input x and output y.
template <typename S, typename F, typename DF>
Var<S> unary(const Var<S>& x, const char* op, F f, DF df) {
  Tape<S>& tape = x.tape();
  const Tensor<S>& xv = x.value();
  Tensor<S> out(xv.shape());
  for (Index i = 0; i < xv.numel(); ++i) out[i] = f(xv[i]);
  const std::size_t ix = x.id();
  std::size_t iy = tape.size();
  return tape.record(op, std::move(out), {x}, [ix, iy, df](Tape<S>& t, const Tensor<S>& g) {
    if (!t.needs_grad(ix)) return;
    Tensor<S>& gx = t.grad_slot(ix);
    const Tensor<S>& xv = t.value(ix);
    const Tensor<S>& yv = t.value(iy);
    for (Index i = 0; i < g.numel(); ++i) gx[i] += g[i] * df(xv[i], yv[i]);
  });
}

}  // namespace

Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t k = 0; k < r; ++k) {
    const Index da = k < a.size() ? a[a.size() - 1 - k] : 1;
    const Index db = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[r - 1 - k] = da == 1 ? db : da;
  }
  return out;
}

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  return binary(a, b, BinaryKind::Add, "add");
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  return binary(a, b, BinaryKind::Sub, "sub");
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  return binary(a, b, BinaryKind::Mul, "mul");
}

template <typename S>
Var<S> scale(const Var<S>& x, S c) {
  return unary(x, "scale", [c](S v) { return c * v; }, [c](S, S) { return c; });
}

template <typename S>
Var<S> add_scalar(const Var<S>& x, S c) {
  return unary(x, "add_scalar", [c](S v) { return v + c; }, [](S, S) { return S(1); });
}

template <typename S>
Var<S> power(const Var<S>& x, S p) {
  if (p == S(2)) {
    return unary(x, "power", [](S v) { return v * v; }, [](S v, S) { return S(2) * v; });
  }
  return unary(
      x, "power", [p](S v) { return std::pow(v, p); }, [p](S v, S) { return p * std::pow(v, p - S(1)); });
}

template <typename S>
Var<S> sqrt(const Var<S>& x) {
  return unary(x, "sqrt", [](S v) { return std::sqrt(v); }, [](S, S y) { return S(0.5) / y; });
}

template <typename S>
Var<S> exp(const Var<S>& x) {
  return unary(x, "exp", [](S v) { return std::exp(v); }, [](S, S y) { return y; });
}

template <typename S>
Var<S> log(const Var<S>& x) {
  return unary(x, "log", [](S v) { return std::log(v); }, [](S v, S) { return S(1) / v; });
}

template <typename S>
Var<S> clamp_min(const Var<S>& x, S floor) {
  return unary(
      x, "clamp_min", [floor](S v) { return v < floor ? floor : v; }, [floor](S v, S) { return v < floor ? S(0) : S(1); });
}

template <typename S>
Var<S> relu(const Var<S>& x) {
  return unary(x, "relu", [](S v) { return v > S(0) ? v : S(0); }, [](S v, S) { return v > S(0) ? S(1) : S(0); });
}

template <typename S>
Var<S> gelu(const Var<S>& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return unary(
      x, "gelu", [](S v) { return S(0.5 * v * (1.0 + std::erf(v * inv_sqrt2))); },
      [](S v, S) {
        const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * double(v) * v);
        return S(cdf + v * pdf);
      });
}

template <typename S>
Var<S> sigmoid(const Var<S>& x) {
  return unary(
      x, "sigmoid",
      [](S v) {
        if (v >= S(0)) return S(1) / (S(1) + std::exp(-v));
        const S e = std::exp(v);
        return e / (S(1) + e);
      },
      [](S, S y) { return y * (S(1) - y); });
}

template <typename S>
Var<S> tanh(const Var<S>& x) {
  return unary(x, "tanh", [](S v) { return std::tanh(v); }, [](S, S y) { return S(1) - y * y; });
}

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  Tape<S>& tape = a.tape();
  const Tensor<S>& av = a.value();
  const Tensor<S>& bv = b.value();
  const bool batched = av.rank() == 3 && bv.rank() == 3 && av.dim(0) == bv.dim(0);
  const bool plain = av.rank() == 2 && bv.rank() == 2;
  if ((!batched && !plain) || av.dim(-1) != bv.dim(-2)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(av.shape()) + " and " + shape_str(bv.shape()));
  }
  const Index batch = batched ? av.dim(0) : 1;
  const Index m = av.dim(-2), k = av.dim(-1), n = bv.dim(-1);
  Tensor<S> out(batched ? Shape{batch, m, n} : Shape{m, n});
  for (Index i = 0; i < batch; ++i) {
    ConstMatrixMap<S> am(av.data() + i * m * k, m, k);
    ConstMatrixMap<S> bm(bv.data() + i * k * n, k, n);
    MatrixMap<S> om(out.data() + i * m * n, m, n);
    om.noalias() = am * bm;
  }
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record("matmul", std::move(out), {a, b}, [=](Tape<S>& t, const Tensor<S>& g) {
    const Tensor<S>& av = t.value(ia);
    const Tensor<S>& bv = t.value(ib);
    for (Index i = 0; i < batch; ++i) {
      ConstMatrixMap<S> gm(g.data() + i * m * n, m, n);
      if (t.needs_grad(ia)) {
        ConstMatrixMap<S> bm(bv.data() + i * k * n, k, n);
        MatrixMap<S> ga(t.grad_slot(ia).data() + i * m * k, m, k);
        ga.noalias() += gm * bm.transpose();
      }
      if (t.needs_grad(ib)) {
        ConstMatrixMap<S> am(av.data() + i * m * k, m, k);
        MatrixMap<S> gb(t.grad_slot(ib).data() + i * k * n, k, n);
        gb.noalias() += am.transpose() * gm;
      }
    }
  });
}

template <typename S>
Var<S> sum(const Var<S>& x, Index axis, bool keepdim) {
  Tape<S>& tape = x.tape();
  const Tensor<S>& xv = x.value();
  axis = normalize_axis(axis, xv.rank(), "sum");
  const AxisSplit sp = split_axis(xv.shape(), axis);
  Shape shape = xv.shape();
  if (keepdim) {
    shape[static_cast<std::size_t>(axis)] = 1;
  } else {
    shape.erase(shape.begin() + axis);
  }
  Tensor<S> out(shape);
  for (Index o = 0; o < sp.outer; ++o) {
    for (Index in = 0; in < sp.inner; ++in) {
      double acc = 0.0;
      for (Index l = 0; l < sp.len; ++l) acc += xv[(o * sp.len + l) * sp.inner + in];
      out[o * sp.inner + in] = S(acc);
    }
  }
  const std::size_t ix = x.id();
  return tape.record("sum", std::move(out), {x}, [ix, sp](Tape<S>& t, const Tensor<S>& g) {
    Tensor<S>& gx = t.grad_slot(ix);
    for (Index o = 0; o < sp.outer; ++o)
      for (Index l = 0; l < sp.len; ++l)
        for (Index in = 0; in < sp.inner; ++in) gx[(o * sp.len + l) * sp.inner + in] += g[o * sp.inner + in];
  });
}

template <typename S>
Var<S> mean(const Var<S>& x, Index axis, bool keepdim) {
  const Index len = x.value().dim(axis);
  return scale(sum(x, axis, keepdim), S(1) / S(len));
}

template <typename S>
Var<S> sum(const Var<S>& x) {
  Tape<S>& tape = x.tape();
  const Tensor<S>& xv = x.value();
  double acc = 0.0;
  for (S v : xv.values()) acc += v;
  const std::size_t ix = x.id();
  return tape.record("sum", Tensor<S>::scalar(S(acc)), {x}, [ix](Tape<S>& t, const Tensor<S>& g) {
    t.grad_slot(ix).vector().array() += g[0];
  });
}

template <typename S>
Var<S> mean(const Var<S>& x) {
  Tape<S>& tape = x.tape();
  const Tensor<S>& xv = x.value();
  double acc = 0.0;
  for (S v : xv.values()) acc += v;
  const Index n = xv.numel();
  const std::size_t ix = x.id();
  return tape.record("mean", Tensor<S>::scalar(S(acc / double(n))), {x}, [ix, n](Tape<S>& t, const Tensor<S>& g) {
    t.grad_slot(ix).vector().array() += g[0] / S(n);
  });
}

template <typename S>
Var<S> softmax(const Var<S>& x, const Tensor<S>* mask) {
  Tape<S>& tape = x.tape();
  const Tensor<S>& xv = x.value();
  if (xv.rank() == 0) throw ShapeError("softmax: scalar input");
  const Index len = xv.dim(-1);
  const Index rows = len == 0 ? 0 : xv.numel() / len;
  Index mask_n = 0;
  if (mask != nullptr) {
    const Shape& ms = mask->shape();
    const Shape& xs = xv.shape();
    const bool suffix = ms.size() <= xs.size() && std::equal(ms.rbegin(), ms.rend(), xs.rbegin());
    if (!suffix) {
      throw ShapeError("softmax: mask shape " + shape_str(ms) + " is not a suffix of " + shape_str(xs));
    }
    mask_n = mask->numel();
  }
  Tensor<S> out(xv.shape());
  for (Index r = 0; r < rows; ++r) {
    const S* in = xv.data() + r * len;
    S* y = out.data() + r * len;
    S mx = -std::numeric_limits<S>::infinity();
    for (Index j = 0; j < len; ++j) {
      y[j] = in[j] + (mask ? (*mask)[(r * len + j) % mask_n] : S(0));
      mx = std::max(mx, y[j]);
    }
    double z = 0.0;
    for (Index j = 0; j < len; ++j) {
      y[j] = std::exp(y[j] - mx);
      z += y[j];
    }
    for (Index j = 0; j < len; ++j) y[j] = S(y[j] / z);
  }
  const std::size_t ix = x.id();
  const std::size_t iy = tape.size();
  return tape.record("softmax", std::move(out), {x}, [ix, iy, rows, len](Tape<S>& t, const Tensor<S>& g) {
    Tensor<S>& gx = t.grad_slot(ix);
    const Tensor<S>& y = t.value(iy);
    for (Index r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (Index j = 0; j < len; ++j) dot += double(g[r * len + j]) * y[r * len + j];
      for (Index j = 0; j < len; ++j) gx[r * len + j] += y[r * len + j] * (g[r * len + j] - S(dot));
    }
  });
}

template <typename S>
Var<S> log_softmax(const Var<S>& x) {
  Tape<S>& tape = x.tape();
  const Tensor<S>& xv = x.value();
  if (xv.rank() == 0) throw ShapeError("log_softmax: scalar input");
  const Index len = xv.dim(-1);
  const Index rows = len == 0 ? 0 : xv.numel() / len;
  Tensor<S> out(xv.shape());
  for (Index r = 0; r < rows; ++r) {
    const S* in = xv.data() + r * len;
    S mx = -std::numeric_limits<S>::infinity();
    for (Index j = 0; j < len; ++j) mx = std::max(mx, in[j]);
    double z = 0.0;
    for (Index j = 0; j < len; ++j) z += std::exp(double(in[j]) - mx);
    const double lse = mx + std::log(z);
    for (Index j = 0; j < len; ++j) out[r * len + j] = S(in[j] - lse);
  }
  const std::size_t ix = x.id();
  const std::size_t iy = tape.size();
  return tape.record("log_softmax", std::move(out), {x}, [ix, iy, rows, len](Tape<S>& t, const Tensor<S>& g) {
    Tensor<S>& gx = t.grad_slot(ix);
    const Tensor<S>& y = t.value(iy);
    for (Index r = 0; r < rows; ++r) {
      double gs = 0.0;
      for (Index j = 0; j < len; ++j) gs += g[r * len + j];
      for (Index j = 0; j < len; ++j) gx[r * len + j] += g[r * len + j] - S(std::exp(double(y[r * len + j])) * gs);
    }
  });
}

template <typename S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, S eps) {
  Tape<S>& tape = x.tape();
  const Tensor<S>& xv = x.value();
  const Index c = xv.dim(-1);
  if (gamma.value().shape() != Shape{c} || beta.value().shape() != Shape{c}) {
    throw ShapeError("layer_norm: affine parameters " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                     " do not match feature width " + std::to_string(c) + " of " + shape_str(xv.shape()));
  }
  const Index rows = xv.numel() / c;
  auto xhat = std::make_shared<Tensor<S>>(xv.shape());
  auto inv_std = std::make_shared<std::vector<S>>(static_cast<std::size_t>(rows));
  Tensor<S> out(xv.shape());
  const Tensor<S>& gv = gamma.value();
  const Tensor<S>& bv = beta.value();
  for (Index r = 0; r < rows; ++r) {
    const S* in = xv.data() + r * c;
    double mu = 0.0;
    for (Index j = 0; j < c; ++j) mu += in[j];
    mu /= double(c);
    double var = 0.0;
    for (Index j = 0; j < c; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= double(c);
    const double inv = 1.0 / std::sqrt(var + double(eps));
    (*inv_std)[static_cast<std::size_t>(r)] = S(inv);
    for (Index j = 0; j < c; ++j) {
      const S h = S((in[j] - mu) * inv);
      (*xhat)[r * c + j] = h;
      out[r * c + j] = gv[j] * h + bv[j];
    }
  }
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return tape.record("layer_norm", std::move(out), {x, gamma, beta}, [=](Tape<S>& t, const Tensor<S>& g) {
    const Tensor<S>& gv = t.value(ig);
    if (t.needs_grad(ig)) {
      Tensor<S>& gg = t.grad_slot(ig);
      for (Index r = 0; r < rows; ++r)
        for (Index j = 0; j < c; ++j) gg[j] += g[r * c + j] * (*xhat)[r * c + j];
    }
    if (t.needs_grad(ib)) {
      Tensor<S>& gb = t.grad_slot(ib);
      for (Index r = 0; r < rows; ++r)
        for (Index j = 0; j < c; ++j) gb[j] += g[r * c + j];
    }
    if (t.needs_grad(ix)) {
      Tensor<S>& gx = t.grad_slot(ix);
      for (Index r = 0; r < rows; ++r) {
        double s1 = 0.0, s2 = 0.0;
        for (Index j = 0; j < c; ++j) {
          const double dh = double(g[r * c + j]) * gv[j];
          s1 += dh;
          s2 += dh * (*xhat)[r * c + j];
        }
        const double inv = (*inv_std)[static_cast<std::size_t>(r)];
        for (Index j = 0; j < c; ++j) {
          const double dh = double(g[r * c + j]) * gv[j];
          gx[r * c + j] += S(inv / double(c) * (double(c) * dh - s1 - (*xhat)[r * c + j] * s2));
        }
      }
    }
  });
}

template <typename S>
Var<S> batch_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, BatchNormStats<S>& stats, bool training) {
  Tape<S>& tape = x.tape();
  const Tensor<S>& xv = x.value();
  if (xv.rank() != 2) throw ShapeError("batch_norm: expected [M, C] input, got " + shape_str(xv.shape()));
  const Index m = xv.dim(0), c = xv.dim(1);
  if (gamma.value().shape() != Shape{c} || beta.value().shape() != Shape{c} ||
      stats.running_mean.shape() != Shape{c} || stats.running_var.shape() != Shape{c}) {
    throw ShapeError("batch_norm: parameter/statistics width does not match " + shape_str(xv.shape()));
  }
  if (training && m < 2) throw ShapeError("batch_norm: training mode needs at least 2 rows");
  const Tensor<S>& gv = gamma.value();
  const Tensor<S>& bv = beta.value();
  auto xhat = std::make_shared<Tensor<S>>(xv.shape());
  auto inv_std = std::make_shared<std::vector<S>>(static_cast<std::size_t>(c));
  Tensor<S> out(xv.shape());
  for (Index j = 0; j < c; ++j) {
    double mu, var;
    if (training) {
      mu = 0.0;
      for (Index r = 0; r < m; ++r) mu += xv[r * c + j];
      mu /= double(m);
      var = 0.0;
      for (Index r = 0; r < m; ++r) var += (xv[r * c + j] - mu) * (xv[r * c + j] - mu);
      var /= double(m);
      const double unbiased = var * double(m) / double(m - 1);
      stats.running_mean[j] = S(stats.momentum * stats.running_mean[j] + (1.0 - stats.momentum) * mu);
      stats.running_var[j] = S(stats.momentum * stats.running_var[j] + (1.0 - stats.momentum) * unbiased);
    } else {
      mu = stats.running_mean[j];
      var = stats.running_var[j];
    }
    const double inv = 1.0 / std::sqrt(var + double(stats.eps));
    (*inv_std)[static_cast<std::size_t>(j)] = S(inv);
    for (Index r = 0; r < m; ++r) {
      const S h = S((xv[r * c + j] - mu) * inv);
      (*xhat)[r * c + j] = h;
      out[r * c + j] = gv[j] * h + bv[j];
    }
  }
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return tape.record("batch_norm", std::move(out), {x, gamma, beta}, [=](Tape<S>& t, const Tensor<S>& g) {
    const Tensor<S>& gv = t.value(ig);
    if (t.needs_grad(ig)) {
      Tensor<S>& gg = t.grad_slot(ig);
      for (Index r = 0; r < m; ++r)
        for (Index j = 0; j < c; ++j) gg[j] += g[r * c + j] * (*xhat)[r * c + j];
    }
    if (t.needs_grad(ib)) {
      Tensor<S>& gb = t.grad_slot(ib);
      for (Index r = 0; r < m; ++r)
        for (Index j = 0; j < c; ++j) gb[j] += g[r * c + j];
    }
    if (!t.needs_grad(ix)) return;
    Tensor<S>& gx = t.grad_slot(ix);
    for (Index j = 0; j < c; ++j) {
      const double inv = (*inv_std)[static_cast<std::size_t>(j)];
      if (!training) {
        for (Index r = 0; r < m; ++r) gx[r * c + j] += S(double(g[r * c + j]) * gv[j] * inv);
        continue;
      }
      double s1 = 0.0, s2 = 0.0;
      for (Index r = 0; r < m; ++r) {
        const double dh = double(g[r * c + j]) * gv[j];
        s1 += dh;
        s2 += dh * (*xhat)[r * c + j];
      }
      for (Index r = 0; r < m; ++r) {
        const double dh = double(g[r * c + j]) * gv[j];
        gx[r * c + j] += S(inv / double(m) * (double(m) * dh - s1 - (*xhat)[r * c + j] * s2));
      }
    }
  });
}

template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& weight, const std::optional<Var<S>>& bias, const Conv2dOptions& opt) {
  Tape<S>& tape = x.tape();
  const Tensor<S>& xv = x.value();
  const Tensor<S>& wv = weight.value();
  if (xv.rank() != 4 || wv.rank() != 4 || xv.dim(1) != wv.dim(1)) {
    throw ShapeError("conv2d: incompatible input " + shape_str(xv.shape()) + " and weight " + shape_str(wv.shape()));
  }
  const Index b = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const Index o = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  if (bias && bias->value().shape() != Shape{o}) {
    throw ShapeError("conv2d: bias " + shape_str(bias->shape()) + " does not match " + std::to_string(o) + " filters");
  }
  if (opt.stride < 1 || opt.padding < 0) throw ShapeError("conv2d: stride must be >= 1 and padding >= 0");
  const Index hp = h + 2 * opt.padding, wp = w + 2 * opt.padding;
  if (hp < kh || wp < kw) throw ShapeError("conv2d: kernel larger than padded input " + shape_str(xv.shape()));
  const Index ho = (hp - kh) / opt.stride + 1, wo = (wp - kw) / opt.stride + 1;
  const Index patch = c * kh * kw, positions = ho * wo;

  // Per-image source offset of every (output position, patch element); -1 reads zero padding.
  auto index = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(positions * patch));
  for (Index oy = 0; oy < ho; ++oy) {
    for (Index ox = 0; ox < wo; ++ox) {
      Index* row = index->data() + (oy * wo + ox) * patch;
      for (Index ci = 0; ci < c; ++ci) {
        for (Index ky = 0; ky < kh; ++ky) {
          for (Index kx = 0; kx < kw; ++kx) {
            Index iy = oy * opt.stride + ky - opt.padding;
            Index ix = ox * opt.stride + kx - opt.padding;
            Index src;
            if (opt.pad_mode == PadMode::Replicate) {
              iy = std::clamp<Index>(iy, 0, h - 1);
              ix = std::clamp<Index>(ix, 0, w - 1);
              src = (ci * h + iy) * w + ix;
            } else {
              src = (iy < 0 || iy >= h || ix < 0 || ix >= w) ? -1 : (ci * h + iy) * w + ix;
            }
            row[(ci * kh + ky) * kw + kx] = src;
          }
        }
      }
    }
  }
  auto cols = std::make_shared<RowMatrix<S>>(b * positions, patch);
  for (Index bi = 0; bi < b; ++bi) {
    const S* img = xv.data() + bi * c * h * w;
    for (Index p = 0; p < positions; ++p) {
      const Index* src = index->data() + p * patch;
      S* dst = cols->data() + (bi * positions + p) * patch;
      for (Index q = 0; q < patch; ++q) dst[q] = src[q] < 0 ? S(0) : img[src[q]];
    }
  }
  ConstMatrixMap<S> wm(wv.data(), o, patch);
  RowMatrix<S> res = (*cols) * wm.transpose();  // [b*positions, o]
  if (bias) res.rowwise() += ConstVectorMap<S>(bias->value().data(), o).transpose();
  Tensor<S> out({b, o, ho, wo});
  for (Index bi = 0; bi < b; ++bi)
    for (Index p = 0; p < positions; ++p)
      for (Index oc = 0; oc < o; ++oc) out[(bi * o + oc) * positions + p] = res(bi * positions + p, oc);

  const std::size_t ix = x.id(), iw = weight.id();
  const std::size_t ibias = bias ? bias->id() : 0;
  const bool has_bias = bias.has_value();
  std::vector<Var<S>> parents{x, weight};
  if (bias) parents.push_back(*bias);
  return tape.record("conv2d", std::move(out), parents, [=](Tape<S>& t, const Tensor<S>& g) {
    RowMatrix<S> gm(b * positions, o);
    for (Index bi = 0; bi < b; ++bi)
      for (Index p = 0; p < positions; ++p)
        for (Index oc = 0; oc < o; ++oc) gm(bi * positions + p, oc) = g[(bi * o + oc) * positions + p];
    if (t.needs_grad(iw)) {
      MatrixMap<S> gw(t.grad_slot(iw).data(), o, patch);
      gw.noalias() += gm.transpose() * (*cols);
    }
    if (has_bias && t.needs_grad(ibias)) {
      VectorMap<S> gb(t.grad_slot(ibias).data(), o);
      gb += gm.colwise().sum().transpose();
    }
    if (t.needs_grad(ix)) {
      ConstMatrixMap<S> wm(t.value(iw).data(), o, patch);
      RowMatrix<S> gcols = gm * wm;
      Tensor<S>& gx = t.grad_slot(ix);
      for (Index bi = 0; bi < b; ++bi) {
        S* img = gx.data() + bi * c * h * w;
        for (Index p = 0; p < positions; ++p) {
          const Index* src = index->data() + p * patch;
          const S* row = gcols.data() + (bi * positions + p) * patch;
          for (Index q = 0; q < patch; ++q)
            if (src[q] >= 0) img[src[q]] += row[q];
        }
      }
    }
  });
}

template <typename S>
Var<S> reshape(const Var<S>& x, Shape shape) {
  Tape<S>& tape = x.tape();
  const Tensor<S>& xv = x.value();
  if (shape_numel(shape) != xv.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(xv.shape()) + " as " + shape_str(shape));
  }
  const std::size_t ix = x.id();
  return tape.record("reshape", xv.reshaped(std::move(shape)), {x}, [ix](Tape<S>& t, const Tensor<S>& g) {
    t.grad_slot(ix).vector() += g.vector();
  });
}

template <typename S>
Var<S> permute(const Var<S>& x, const std::vector<Index>& perm) {
  Tape<S>& tape = x.tape();
  const Tensor<S>& xv = x.value();
  const std::size_t r = static_cast<std::size_t>(xv.rank());
  std::vector<bool> seen(r, false);
  if (perm.size() != r) throw ShapeError("permute: permutation rank mismatch for " + shape_str(xv.shape()));
  for (Index p : perm) {
    if (p < 0 || p >= Index(r) || seen[static_cast<std::size_t>(p)]) throw ShapeError("permute: invalid permutation");
    seen[static_cast<std::size_t>(p)] = true;
  }
  Shape out_shape(r);
  std::vector<Index> in_stride(r);
  Index st = 1;
  for (std::size_t k = r; k-- > 0;) {
    in_stride[k] = st;
    st *= xv.shape()[k];
  }
  std::vector<Index> stride(r);
  for (std::size_t k = 0; k < r; ++k) {
    out_shape[k] = xv.shape()[static_cast<std::size_t>(perm[k])];
    stride[k] = in_stride[static_cast<std::size_t>(perm[k])];
  }
  // Source offset of each output element.
  auto src = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(xv.numel()));
  std::vector<Index> counter(r, 0);
  Index off = 0;
  for (Index i = 0; i < xv.numel(); ++i) {
    (*src)[static_cast<std::size_t>(i)] = off;
    for (std::size_t k = r; k-- > 0;) {
      ++counter[k];
      off += stride[k];
      if (counter[k] < out_shape[k]) break;
      off -= stride[k] * counter[k];
      counter[k] = 0;
    }
  }
  Tensor<S> out(out_shape);
  for (Index i = 0; i < out.numel(); ++i) out[i] = xv[(*src)[static_cast<std::size_t>(i)]];
  const std::size_t ix = x.id();
  return tape.record("permute", std::move(out), {x}, [ix, src](Tape<S>& t, const Tensor<S>& g) {
    Tensor<S>& gx = t.grad_slot(ix);
    for (Index i = 0; i < g.numel(); ++i) gx[(*src)[static_cast<std::size_t>(i)]] += g[i];
  });
}

template <typename S>
Var<S> transpose(const Var<S>& x, Index axis0, Index axis1) {
  const Index r = x.rank();
  axis0 = normalize_axis(axis0, r, "transpose");
  axis1 = normalize_axis(axis1, r, "transpose");
  std::vector<Index> perm(static_cast<std::size_t>(r));
  std::iota(perm.begin(), perm.end(), Index(0));
  std::swap(perm[static_cast<std::size_t>(axis0)], perm[static_cast<std::size_t>(axis1)]);
  return permute(x, perm);
}

template <typename S>
Var<S> concat(const std::vector<Var<S>>& xs, Index axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  Tape<S>& tape = xs.front().tape();
  const Shape& first = xs.front().value().shape();
  axis = normalize_axis(axis, Index(first.size()), "concat");
  Shape out_shape = first;
  Index total = 0;
  std::vector<Index> lens;
  for (const auto& v : xs) {
    Shape s = v.value().shape();
    if (s.size() != first.size()) throw ShapeError("concat: rank mismatch " + shape_str(first) + " vs " + shape_str(s));
    for (std::size_t k = 0; k < s.size(); ++k) {
      if (Index(k) != axis && s[k] != first[k]) {
        throw ShapeError("concat: shape mismatch " + shape_str(first) + " vs " + shape_str(s));
      }
    }
    lens.push_back(s[static_cast<std::size_t>(axis)]);
    total += lens.back();
  }
  out_shape[static_cast<std::size_t>(axis)] = total;
  AxisSplit sp = split_axis(out_shape, axis);
  Tensor<S> out(out_shape);
  Index start = 0;
  std::vector<std::size_t> ids;
  std::vector<Index> starts;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const Tensor<S>& v = xs[i].value();
    const Index len = lens[i];
    for (Index o = 0; o < sp.outer; ++o)
      std::copy_n(v.data() + o * len * sp.inner, len * sp.inner, out.data() + (o * total + start) * sp.inner);
    ids.push_back(xs[i].id());
    starts.push_back(start);
    start += len;
  }
  return tape.record("concat", std::move(out), xs, [=](Tape<S>& t, const Tensor<S>& g) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!t.needs_grad(ids[i])) continue;
      Tensor<S>& gi = t.grad_slot(ids[i]);
      const Index len = lens[i];
      for (Index o = 0; o < sp.outer; ++o) {
        const S* src = g.data() + (o * total + starts[i]) * sp.inner;
        S* dst = gi.data() + o * len * sp.inner;
        for (Index q = 0; q < len * sp.inner; ++q) dst[q] += src[q];
      }
    }
  });
}

template <typename S>
Var<S> slice(const Var<S>& x, Index axis, Index start, Index stop, Index step) {
  Tape<S>& tape = x.tape();
  const Tensor<S>& xv = x.value();
  axis = normalize_axis(axis, xv.rank(), "slice");
  const AxisSplit sp = split_axis(xv.shape(), axis);
  if (step < 1 || start < 0 || stop > sp.len || start > stop) {
    throw ShapeError("slice: range [" + std::to_string(start) + ":" + std::to_string(stop) + ":" + std::to_string(step) +
                     "] invalid for axis of length " + std::to_string(sp.len));
  }
  const Index count = (stop - start + step - 1) / step;
  Shape shape = xv.shape();
  shape[static_cast<std::size_t>(axis)] = count;
  Tensor<S> out(shape);
  for (Index o = 0; o < sp.outer; ++o)
    for (Index l = 0; l < count; ++l)
      std::copy_n(xv.data() + (o * sp.len + start + l * step) * sp.inner, sp.inner, out.data() + (o * count + l) * sp.inner);
  const std::size_t ix = x.id();
  return tape.record("slice", std::move(out), {x}, [=](Tape<S>& t, const Tensor<S>& g) {
    Tensor<S>& gx = t.grad_slot(ix);
    for (Index o = 0; o < sp.outer; ++o)
      for (Index l = 0; l < count; ++l) {
        const S* src = g.data() + (o * count + l) * sp.inner;
        S* dst = gx.data() + (o * sp.len + start + l * step) * sp.inner;
        for (Index q = 0; q < sp.inner; ++q) dst[q] += src[q];
      }
  });
}

template <typename S>
Var<S> embedding(const Var<S>& table, std::span<const int> indices, Shape prefix) {
  Tape<S>& tape = table.tape();
  const Tensor<S>& tv = table.value();
  if (tv.rank() != 2) throw ShapeError("embedding: table must be [V, d], got " + shape_str(tv.shape()));
  if (shape_numel(prefix) != Index(indices.size())) {
    throw ShapeError("embedding: " + std::to_string(indices.size()) + " indices do not fill shape " + shape_str(prefix));
  }
  const Index vocab = tv.dim(0), d = tv.dim(1);
  for (int i : indices) {
    if (i < 0 || i >= vocab) throw ShapeError("embedding: index " + std::to_string(i) + " outside table of " + std::to_string(vocab));
  }
  Shape shape = prefix;
  shape.push_back(d);
  Tensor<S> out(shape);
  auto idx = std::make_shared<std::vector<int>>(indices.begin(), indices.end());
  for (std::size_t r = 0; r < idx->size(); ++r) std::copy_n(tv.data() + (*idx)[r] * d, d, out.data() + Index(r) * d);
  const std::size_t it = table.id();
  return tape.record("embedding", std::move(out), {table}, [it, idx, d](Tape<S>& t, const Tensor<S>& g) {
    Tensor<S>& gt = t.grad_slot(it);
    for (std::size_t r = 0; r < idx->size(); ++r)
      for (Index j = 0; j < d; ++j) gt[(*idx)[r] * d + j] += g[Index(r) * d + j];
  });
}

template <typename S>
Var<S> stop_gradient(const Var<S>& x) {
  return x.tape().record("stop_gradient", x.value(), std::vector<Var<S>>{}, nullptr);
}

template <typename S>
Var<S> l2_normalize(const Var<S>& x, Index axis, S floor) {
  Tape<S>& tape = x.tape();
  const Tensor<S>& xv = x.value();
  axis = normalize_axis(axis, xv.rank(), "l2_normalize");
  const AxisSplit sp = split_axis(xv.shape(), axis);
  auto norms = std::make_shared<std::vector<double>>(static_cast<std::size_t>(sp.outer * sp.inner));
  Tensor<S> out(xv.shape());
  for (Index o = 0; o < sp.outer; ++o) {
    for (Index in = 0; in < sp.inner; ++in) {
      double ss = 0.0;
      for (Index l = 0; l < sp.len; ++l) {
        const double v = xv[(o * sp.len + l) * sp.inner + in];
        ss += v * v;
      }
      const double n = std::sqrt(ss);
      (*norms)[static_cast<std::size_t>(o * sp.inner + in)] = n;
      const double denom = std::max(n, double(floor));
      for (Index l = 0; l < sp.len; ++l) {
        const Index k = (o * sp.len + l) * sp.inner + in;
        out[k] = S(xv[k] / denom);
      }
    }
  }
  const std::size_t ix = x.id();
  const std::size_t iy = tape.size();
  return tape.record("l2_normalize", std::move(out), {x}, [=](Tape<S>& t, const Tensor<S>& g) {
    Tensor<S>& gx = t.grad_slot(ix);
    const Tensor<S>& y = t.value(iy);
    for (Index o = 0; o < sp.outer; ++o) {
      for (Index in = 0; in < sp.inner; ++in) {
        const double n = (*norms)[static_cast<std::size_t>(o * sp.inner + in)];
        if (n <= double(floor)) {
          for (Index l = 0; l < sp.len; ++l) {
            const Index k = (o * sp.len + l) * sp.inner + in;
            gx[k] += S(g[k] / double(floor));
          }
          continue;
        }
        double dot = 0.0;
        for (Index l = 0; l < sp.len; ++l) {
          const Index k = (o * sp.len + l) * sp.inner + in;
          dot += double(g[k]) * y[k];
        }
        for (Index l = 0; l < sp.len; ++l) {
          const Index k = (o * sp.len + l) * sp.inner + in;
          gx[k] += S((g[k] - y[k] * dot) / n);
        }
      }
    }
  });
}

#define TPR_INSTANTIATE_OPS(S)                                                                                     \
  template Var<S> add(const Var<S>&, const Var<S>&);                                                               \
  template Var<S> sub(const Var<S>&, const Var<S>&);                                                               \
  template Var<S> mul(const Var<S>&, const Var<S>&);                                                               \
  template Var<S> scale(const Var<S>&, S);                                                                         \
  template Var<S> add_scalar(const Var<S>&, S);                                                                    \
  template Var<S> power(const Var<S>&, S);                                                                         \
  template Var<S> sqrt(const Var<S>&);                                                                             \
  template Var<S> exp(const Var<S>&);                                                                              \
  template Var<S> log(const Var<S>&);                                                                              \
  template Var<S> clamp_min(const Var<S>&, S);                                                                     \
  template Var<S> relu(const Var<S>&);                                                                             \
  template Var<S> gelu(const Var<S>&);                                                                             \
  template Var<S> sigmoid(const Var<S>&);                                                                          \
  template Var<S> tanh(const Var<S>&);                                                                             \
  template Var<S> matmul(const Var<S>&, const Var<S>&);                                                            \
  template Var<S> sum(const Var<S>&, Index, bool);                                                                 \
  template Var<S> mean(const Var<S>&, Index, bool);                                                                \
  template Var<S> sum(const Var<S>&);                                                                              \
  template Var<S> mean(const Var<S>&);                                                                             \
  template Var<S> softmax(const Var<S>&, const Tensor<S>*);                                                        \
  template Var<S> log_softmax(const Var<S>&);                                                                      \
  template Var<S> layer_norm(const Var<S>&, const Var<S>&, const Var<S>&, S);                                      \
  template Var<S> batch_norm(const Var<S>&, const Var<S>&, const Var<S>&, BatchNormStats<S>&, bool);               \
  template Var<S> conv2d(const Var<S>&, const Var<S>&, const std::optional<Var<S>>&, const Conv2dOptions&);        \
  template Var<S> reshape(const Var<S>&, Shape);                                                                   \
  template Var<S> permute(const Var<S>&, const std::vector<Index>&);                                               \
  template Var<S> transpose(const Var<S>&, Index, Index);                                                          \
  template Var<S> concat(const std::vector<Var<S>>&, Index);                                                       \
  template Var<S> slice(const Var<S>&, Index, Index, Index, Index);                                                \
  template Var<S> embedding(const Var<S>&, std::span<const int>, Shape);                                           \
  template Var<S> stop_gradient(const Var<S>&);                                                                    \
  template Var<S> l2_normalize(const Var<S>&, Index, S);

TPR_INSTANTIATE_OPS(float)
TPR_INSTANTIATE_OPS(double)

}  // namespace tpr

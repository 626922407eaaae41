#include "tpr/losses.hpp"

#include <cmath>

namespace tpr {

const char* to_string(LossVariant v) {
  switch (v) {
    case LossVariant::None: return "none";
    case LossVariant::Decorrelation: return "decorrelation";
    case LossVariant::Contrastive: return "contrastive";
    case LossVariant::ContrastiveDecorrelation: return "contrastive_decorrelation";
  }
  return "?";
}

LossVariant parse_loss_variant(const std::string& name) {
  if (name == "none" || name == "similarity") return LossVariant::None;
  if (name == "decorrelation") return LossVariant::Decorrelation;
  if (name == "contrastive") return LossVariant::Contrastive;
  if (name == "contrastive_decorrelation") return LossVariant::ContrastiveDecorrelation;
  throw ConfigError("unknown loss variant '" + name +
                    "' (expected none, decorrelation, contrastive or contrastive_decorrelation)");
}

void LossConfig::validate() const {
  if (k < 1) throw ConfigError("loss: k must be >= 1");
  if (!(temperature > 0.0)) throw ConfigError("loss: temperature must be > 0");
  if (lambda_o < 0.0 || lambda_d < 0.0 || lambda_a < 0.0) throw ConfigError("loss: weights must be non-negative");
  if (!(std_floor > 0.0)) throw ConfigError("loss: std floor must be > 0");
}

namespace {

template <typename S>
void check_sequences(const Var<S>& a, const Var<S>& b, int k, const char* op) {
  if (a.rank() != 3 || a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": expected equal [N, T, d] inputs, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  if (k < 1 || k >= a.dim(1)) {
    throw ShapeError(std::string(op) + ": horizon k = " + std::to_string(k) + " needs 1 <= k < T = " + std::to_string(a.dim(1)));
  }
}

// Diagonal of a square [d, d] variable as [d].
template <typename S>
Var<S> diagonal(const Var<S>& c) {
  Tape<S>& tape = c.tape();
  return sum(c * tape.constant(Tensor<S>::identity(c.dim(0))), 1);
}

template <typename S>
Var<S> flatten_rows(const Var<S>& x) {
  return reshape(x, Shape{x.numel() / x.dim(-1), x.dim(-1)});
}

template <typename S>
double scalar_of(const Var<S>& v) {
  return double(v.value().item());
}

}  // namespace

template <typename S>
Var<S> similarity_distance(const Var<S>& q, const Var<S>& z, int k) {
  check_sequences(q, z, k, "similarity_distance");
  const Index t = q.dim(1);
  Var<S> diff = slice(q, 1, 0, t - k) - slice(z, 1, k, t);
  return scale(sum(power(diff, S(2))), S(1.0 / double(q.dim(0) * (t - k))));
}

template <typename S>
Var<S> similarity_loss(const Var<S>& q1, const Var<S>& q2, const Var<S>& z1, const Var<S>& z2, int k) {
  Var<S> a = similarity_distance(q1, stop_gradient(z2), k);
  Var<S> b = similarity_distance(q2, stop_gradient(z1), k);
  return scale(a + b, S(0.5));
}

template <typename S>
Var<S> cross_correlation(const Var<S>& z1, const Var<S>& z2, S std_floor) {
  if (z1.rank() != 2 || z1.shape() != z2.shape()) {
    throw ShapeError("cross_correlation: expected equal [M, d] inputs, got " + shape_str(z1.shape()) + " and " +
                     shape_str(z2.shape()));
  }
  const Index m = z1.dim(0);
  if (m < 2) throw ShapeError("cross_correlation: needs at least 2 rows, got " + std::to_string(m));
  auto standardize = [std_floor](const Var<S>& z) {
    Var<S> centred = z - mean(z, 0, true);
    Var<S> var = mean(power(centred, S(2)), 0, true);
    return centred * power(sqrt(clamp_min(var, std_floor * std_floor)), S(-1));
  };
  Var<S> a = standardize(z1);
  Var<S> b = standardize(z2);
  return scale(matmul(transpose(a, 0, 1), b), S(1.0 / double(m)));
}

template <typename S>
DecorrelationTerms<S> decorrelation_loss(const Var<S>& c, S lambda_o) {
  if (c.rank() != 2 || c.dim(0) != c.dim(1)) throw ShapeError("decorrelation_loss: expected square matrix, got " + shape_str(c.shape()));
  Tape<S>& tape = c.tape();
  const Index d = c.dim(0);
  Tensor<S> off_mask(Shape{d, d}, S(1));
  for (Index i = 0; i < d; ++i) off_mask[i * d + i] = S(0);
  DecorrelationTerms<S> out;
  out.on = sum(power(add_scalar(-diagonal(c), S(1)), S(2)));
  out.off = sum(power(c, S(2)) * tape.constant(std::move(off_mask)));
  out.total = out.on + scale(out.off, lambda_o);
  return out;
}

template <typename S>
Var<S> contrastive_loss(const Var<S>& q, const Var<S>& z, S temperature) {
  if (!(temperature > S(0))) throw ConfigError("contrastive_loss: temperature must be > 0");
  if (q.rank() != 2 || q.shape() != z.shape()) {
    throw ShapeError("contrastive_loss: expected equal [M, d] inputs, got " + shape_str(q.shape()) + " and " +
                     shape_str(z.shape()));
  }
  Var<S> logits = scale(matmul(q, transpose(z, 0, 1)), S(1) / temperature);
  return -mean(diagonal(log_softmax(logits)));
}

template <typename S>
Var<S> symmetric_contrastive_loss(const Var<S>& q1, const Var<S>& q2, const Var<S>& z1, const Var<S>& z2, int k,
                                  S temperature) {
  check_sequences(q1, z2, k, "contrastive_loss");
  check_sequences(q2, z1, k, "contrastive_loss");
  const Index t = q1.dim(1);
  auto side = [&](const Var<S>& q, const Var<S>& z) {
    return contrastive_loss(flatten_rows(slice(q, 1, 0, t - k)), flatten_rows(slice(stop_gradient(z), 1, k, t)), temperature);
  };
  return scale(side(q1, z2) + side(q2, z1), S(0.5));
}

template <typename S>
Var<S> action_loss(const Var<S>& logits, std::span<const int> actions) {
  if (logits.rank() != 3) throw ShapeError("action_loss: expected logits [N, T, n_a], got " + shape_str(logits.shape()));
  const Index rows = logits.dim(0) * logits.dim(1), classes = logits.dim(2);
  if (Index(actions.size()) != rows) {
    throw ShapeError("action_loss: " + std::to_string(actions.size()) + " actions for " + std::to_string(rows) + " logit rows");
  }
  Tensor<S> onehot(Shape{logits.dim(0), logits.dim(1), classes});
  for (Index r = 0; r < rows; ++r) {
    const int a = actions[std::size_t(r)];
    if (a < 0 || a >= classes) {
      throw ShapeError("action_loss: action " + std::to_string(a) + " out of range [0, " + std::to_string(classes) + ")");
    }
    onehot[r * classes + a] = S(1);
  }
  Tape<S>& tape = logits.tape();
  return scale(sum(log_softmax(logits) * tape.constant(std::move(onehot))), S(-1.0 / double(rows)));
}

template <typename S>
Var<S> recon_loss(const Var<S>& q, const Var<S>& z, const std::vector<std::vector<int>>& masked) {
  if (q.rank() != 3 || q.shape() != z.shape()) {
    throw ShapeError("recon_loss: expected equal [N, T, d] inputs, got " + shape_str(q.shape()) + " and " + shape_str(z.shape()));
  }
  const Index n = q.dim(0), t = q.dim(1);
  if (Index(masked.size()) != n) throw ShapeError("recon_loss: one mask list per sequence required");
  Tensor<S> sel(Shape{n, t, 1});
  Index count = 0;
  for (Index i = 0; i < n; ++i) {
    for (int p : masked[std::size_t(i)]) {
      if (p < 0 || p >= t) throw ShapeError("recon_loss: masked position " + std::to_string(p) + " out of range");
      if (sel[i * t + p] == S(0)) ++count;
      sel[i * t + p] = S(1);
    }
  }
  if (count == 0) throw ShapeError("recon_loss: empty mask set");
  Tape<S>& tape = q.tape();
  return scale(sum(power(q - z, S(2)) * tape.constant(std::move(sel))), S(1.0 / double(count)));
}

namespace {

template <typename S>
LossResult<S> state_objective(const StateForward<S>& f, const LossConfig& cfg) {
  cfg.validate();
  LossResult<S> out;
  LossBreakdown& b = out.breakdown;
  b.lambda_o = cfg.lambda_o;
  b.lambda_d = cfg.lambda_d;
  b.lambda_a = cfg.lambda_a;
  b.temperature = cfg.temperature;

  const bool masked = !f.mask1.empty();
  Var<S> total;
  if (masked) {
    if (cfg.uses_contrastive()) throw ConfigError("loss: the contrastive variant needs a causal transition");
    Var<S> r = scale(recon_loss(f.q1, stop_gradient(f.z2), f.mask1) + recon_loss(f.q2, stop_gradient(f.z1), f.mask2), S(0.5));
    b.recon = scalar_of(r);
    total = r;
  } else if (cfg.uses_contrastive()) {
    Var<S> c = symmetric_contrastive_loss(f.q1, f.q2, f.z1, f.z2, cfg.k, S(cfg.temperature));
    b.contrastive = scalar_of(c);
    total = c;
  } else {
    Var<S> s = similarity_loss(f.q1, f.q2, f.z1, f.z2, cfg.k);
    b.sim = scalar_of(s);
    total = s;
  }

  if (cfg.uses_decorrelation()) {
    Var<S> c = cross_correlation(flatten_rows(f.z1), flatten_rows(f.z2), S(cfg.std_floor));
    DecorrelationTerms<S> d = decorrelation_loss(c, S(cfg.lambda_o));
    b.decorr = scalar_of(d.total);
    b.decorr_on = scalar_of(d.on);
    b.decorr_off = scalar_of(d.off);
    total = total + scale(d.total, S(cfg.lambda_d));
  }
  out.total = total;
  b.total = scalar_of(total);
  return out;
}

}  // namespace

template <typename S>
LossResult<S> total_loss(const StateForward<S>& f, const LossConfig& cfg) {
  return state_objective(f, cfg);
}

template <typename S>
LossResult<S> total_loss(const DemoForward<S>& f, std::span<const int> actions, const LossConfig& cfg) {
  LossResult<S> out = state_objective(static_cast<const StateForward<S>&>(f), cfg);
  if (cfg.lambda_a != 0.0) {
    Var<S> a = scale(action_loss(f.l1, actions) + action_loss(f.l2, actions), S(0.5));
    out.breakdown.action = scalar_of(a);
    out.total = out.total + scale(a, S(cfg.lambda_a));
    out.breakdown.total = scalar_of(out.total);
  }
  return out;
}

#define TPR_INSTANTIATE_LOSSES(S)                                                                                  \
  template Var<S> similarity_distance(const Var<S>&, const Var<S>&, int);                                          \
  template Var<S> similarity_loss(const Var<S>&, const Var<S>&, const Var<S>&, const Var<S>&, int);                \
  template Var<S> cross_correlation(const Var<S>&, const Var<S>&, S);                                              \
  template DecorrelationTerms<S> decorrelation_loss(const Var<S>&, S);                                             \
  template Var<S> contrastive_loss(const Var<S>&, const Var<S>&, S);                                               \
  template Var<S> symmetric_contrastive_loss(const Var<S>&, const Var<S>&, const Var<S>&, const Var<S>&, int, S);  \
  template Var<S> action_loss(const Var<S>&, std::span<const int>);                                                \
  template Var<S> recon_loss(const Var<S>&, const Var<S>&, const std::vector<std::vector<int>>&);                  \
  template LossResult<S> total_loss(const StateForward<S>&, const LossConfig&);                                    \
  template LossResult<S> total_loss(const DemoForward<S>&, std::span<const int>, const LossConfig&);

TPR_INSTANTIATE_LOSSES(float)
TPR_INSTANTIATE_LOSSES(double)

}  // namespace tpr

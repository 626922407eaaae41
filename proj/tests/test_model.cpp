#include <doctest.h>

#include <cmath>
#include <set>

#include "test_support.hpp"
#include "tpr/model.hpp"
#include "verify/checks.hpp"

using namespace tpr;
using tpr::test::random_tensor;

namespace {

ModelConfig tiny_config(TransitionKind kind = TransitionKind::CausalTransformer) {
  ModelConfig c;
  c.height = 8;
  c.width = 8;
  c.conv_channels = {4, 4};
  c.conv_strides = {2, 2};
  c.latent_dim = 8;
  c.projector_hidden = 8;
  c.predictor_hidden = 8;
  c.action_hidden = 8;
  c.heads = 2;
  c.mlp_hidden = 16;
  c.max_positions = 16;
  c.transition = kind;
  return c;
}

void randomize(std::vector<Parameter<double>*> params, std::uint64_t seed, double scale = 0.5) {
  Rng rng(seed);
  for (Parameter<double>* p : params)
    for (double& v : p->value.values()) v = rng.uniform(-scale, scale);
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (Index i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Rows [n, t, :] of a [N, T, d] tensor for t in `positions`.
Tensor<double> gather_steps(const Tensor<double>& x, const std::vector<int>& positions) {
  const Index n = x.dim(0), t = x.dim(1), d = x.dim(2);
  Tensor<double> out({n, Index(positions.size()), d});
  for (Index i = 0; i < n; ++i)
    for (std::size_t k = 0; k < positions.size(); ++k)
      for (Index j = 0; j < d; ++j) out[(i * Index(positions.size()) + Index(k)) * d + j] = x[(i * t + positions[k]) * d + j];
  return out;
}

long linear_count(long in, long out) { return in * out + out; }

long expected_parameter_count(const ModelConfig& c) {
  long n = 0;
  long in = c.channels;
  for (int out : c.conv_channels) {
    n += out * in * 9 + out;
    in = out;
  }
  const long d = c.latent_dim;
  n += linear_count(c.feature_dim(), c.projector_hidden) + linear_count(c.projector_hidden, d) + (c.projector_bn ? 2 * c.projector_hidden : 0);
  if (c.transition == TransitionKind::Gru) {
    n += c.layers * (2 * d * 3 * d + 2 * 3 * d);
  } else {
    n += long(c.max_positions) * d + 2 * d;
    n += c.layers * (4 * d + linear_count(d, 3 * d) + linear_count(d, d) + linear_count(d, c.mlp_hidden) + linear_count(c.mlp_hidden, d));
  }
  if (c.transition == TransitionKind::NonCausalTransformer) n += d;
  n += linear_count(d, c.predictor_hidden) + linear_count(c.predictor_hidden, d) + (c.predictor_bn ? 2 * c.predictor_hidden : 0);
  if (c.with_actions) n += long(c.num_actions) * d + linear_count(d, c.action_hidden) + linear_count(c.action_hidden, c.num_actions);
  return n;
}

double gelu_exact(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

// Loop-based pre-norm layer norm over one row.
std::vector<double> ln_row(const std::vector<double>& x, const Tensor<double>& g, const Tensor<double>& b) {
  const std::size_t d = x.size();
  double m = 0.0, v = 0.0;
  for (double e : x) m += e;
  m /= double(d);
  for (double e : x) v += (e - m) * (e - m);
  v /= double(d);
  std::vector<double> out(d);
  for (std::size_t i = 0; i < d; ++i) out[i] = (x[i] - m) / std::sqrt(v + 1e-5) * g[Index(i)] + b[Index(i)];
  return out;
}

std::vector<double> affine(const std::vector<double>& x, const Linear<double>& l) {
  const Index in = l.weight.value.dim(0), out = l.weight.value.dim(1);
  std::vector<double> y(static_cast<std::size_t>(out));
  for (Index j = 0; j < out; ++j) {
    double acc = l.bias.value[j];
    for (Index i = 0; i < in; ++i) acc += x[std::size_t(i)] * l.weight.value[i * out + j];
    y[std::size_t(j)] = acc;
  }
  return y;
}

}  // namespace

TEST_CASE("encoder output shape and zero-weight behaviour") {
  ModelBundle<double> m(tiny_config(), 1);
  Rng rng(2);
  Tape<double> tape;
  const Var<double> f = encode(m, tape, tape.constant(random_tensor({3, 2, 1, 8, 8}, rng, 0, 1)));
  CHECK(f.shape() == Shape{3, 2, Index(m.config().feature_dim())});
  for (auto& w : m.encoder.weights) w.value = Tensor<double>::zeros(w.value.shape());
  Tape<double> t2;
  const Var<double> z = encode(m, t2, t2.constant(random_tensor({1, 2, 1, 8, 8}, rng, 0, 1)));
  for (double e : z.value().values()) CHECK(e == 0.0);
  CHECK_THROWS_AS(encode(m, t2, t2.constant(Tensor<double>::zeros({1, 2, 1, 9, 8}))), ShapeError);
}

TEST_CASE("a one-layer encoder equals ReLU of the direct convolution") {
  ModelConfig c = tiny_config();
  c.conv_channels = {3};
  c.conv_strides = {2};
  ModelBundle<double> m(c, 4);
  randomize({&m.encoder.biases[0]}, 5);
  Rng rng(6);
  const Tensor<double> x = random_tensor({1, 1, 1, 8, 8}, rng, 0, 1);
  Tape<double> tape;
  const Tensor<double> f = encode(m, tape, tape.constant(x)).value();
  const Tensor<double> conv = verify::direct_conv2d(x.reshaped({1, 8, 8}), m.encoder.weights[0].value, 2, 1, false);
  REQUIRE(f.numel() == conv.numel());
  const Index hw = conv.numel() / 3;
  for (Index i = 0; i < f.numel(); ++i) CHECK(f[i] == doctest::Approx(std::max(0.0, conv[i] + m.encoder.biases[0].value[i / hw])).epsilon(1e-12));
}

TEST_CASE("feature width follows the strided output sizes") {
  ModelConfig c;
  CHECK(c.feature_dim() == 32 * 2 * 2);
  const ModelConfig p = ModelConfig::full_scale();
  CHECK(p.latent_dim == 512);
  CHECK(p.heads == 8);
  CHECK(p.mlp_hidden == 2048);
}

TEST_CASE("identity projector on non-negative input is the identity") {
  ModelConfig c = tiny_config();
  c.conv_channels = {2};
  c.conv_strides = {2};  // F = 2 * 4 * 4 = 32
  c.latent_dim = 32;
  c.projector_hidden = 32;
  ModelBundle<double> m(c, 1);
  m.projector.fc1.weight.value = Tensor<double>::identity(32);
  m.projector.fc2.weight.value = Tensor<double>::identity(32);
  m.projector.fc1.bias.value = Tensor<double>::zeros({32});
  m.projector.fc2.bias.value = Tensor<double>::zeros({32});
  Rng rng(1);
  const Tensor<double> x = random_tensor({2, 3, 32}, rng, 0, 1);
  Tape<double> t;
  CHECK(project(m, t, t.constant(x), true).value() == x);
}

TEST_CASE("projector and predictor match hand matrix algebra") {
  ModelConfig c = tiny_config();
  c.conv_channels = {2};
  c.conv_strides = {4};  // F = 2 * 2 * 2 = 8
  c.predictor_bn = false;
  ModelBundle<double> m(c, 3);
  randomize({&m.projector.fc1.bias, &m.projector.fc2.bias, &m.predictor.fc1.bias, &m.predictor.fc2.bias}, 9);
  Rng rng(2);
  const Tensor<double> x = random_tensor({1, 2, 8}, rng);
  Tape<double> t;
  const Tensor<double> zp = project(m, t, t.constant(x), false).value();
  const Tensor<double> qp = predict(m, t, t.constant(x), false).value();
  for (Index r = 0; r < 2; ++r) {
    std::vector<double> row(x.data() + r * 8, x.data() + (r + 1) * 8);
    for (Mlp<double>* mlp : {&m.projector, &m.predictor}) {
      std::vector<double> h = affine(row, mlp->fc1);
      for (double& e : h) e = std::max(0.0, e);
      const std::vector<double> y = affine(h, mlp->fc2);
      const Tensor<double>& got = mlp == &m.projector ? zp : qp;
      for (Index j = 0; j < 8; ++j) CHECK(got[r * 8 + j] == doctest::Approx(y[std::size_t(j)]).epsilon(1e-12));
    }
  }
}

TEST_CASE("predictor without batch norm is the identity on the positive cone") {
  ModelConfig c = tiny_config();
  c.predictor_bn = false;
  c.predictor_hidden = 8;
  ModelBundle<double> m(c, 1);
  m.predictor.fc1.weight.value = Tensor<double>::identity(8);
  m.predictor.fc2.weight.value = Tensor<double>::identity(8);
  Rng rng(3);
  const Tensor<double> x = random_tensor({2, 5, 8}, rng, 0, 1);
  Tape<double> t;
  const Var<double> q = predict(m, t, t.constant(x), true);
  CHECK(q.shape() == Shape{2, 5, 8});
  CHECK(q.value() == x);
}

TEST_CASE("causal transformer outputs ignore future tokens") {
  ModelBundle<double> m(tiny_config(), 11);
  Rng rng(4);
  const Tensor<double> z = random_tensor({2, 6, 8}, rng);
  Tape<double> t;
  const Tensor<double> base = transition_causal(m, t, t.constant(z)).value();
  for (Index cut = 0; cut < 5; ++cut) {
    Tensor<double> p = z;
    for (Index i = 0; i < 2; ++i)
      for (Index s = cut + 1; s < 6; ++s)
        for (Index j = 0; j < 8; ++j) p[(i * 6 + s) * 8 + j] += rng.uniform(-3, 3);
    Tape<double> u;
    const Tensor<double> out = transition_causal(m, u, u.constant(p)).value();
    for (Index i = 0; i < 2; ++i)
      for (Index s = 0; s <= cut; ++s)
        for (Index j = 0; j < 8; ++j) CHECK(std::abs(out[(i * 6 + s) * 8 + j] - base[(i * 6 + s) * 8 + j]) <= 1e-6);
  }
  Tape<double> u;
  CHECK_THROWS_AS(transition_causal(m, u, u.constant(Tensor<double>::zeros({1, 17, 8}))), ShapeError);
}

TEST_CASE("a single token needs no mask") {
  ModelBundle<double> m(tiny_config(), 12);
  Rng rng(5);
  const Tensor<double> z = random_tensor({3, 1, 8}, rng);
  Tape<double> t;
  const Tensor<double> masked = transition_causal(m, t, t.constant(z)).value();
  const Tensor<double> unmasked = (*m.transformer)(t, t.constant(z), nullptr).value();
  CHECK(max_abs_diff(masked, unmasked) == 0.0);
}

TEST_CASE("a one-layer one-head transformer matches loop attention algebra") {
  ModelConfig c = tiny_config();
  c.latent_dim = 4;
  c.heads = 1;
  c.layers = 1;
  c.mlp_hidden = 6;
  ModelBundle<double> m(c, 13);
  Transformer<double>& tr = *m.transformer;
  TransformerBlock<double>& b = tr.blocks[0];
  randomize({&b.ln1.gamma, &b.ln1.beta, &b.ln2.gamma, &b.ln2.beta, &tr.ln_f.gamma, &tr.ln_f.beta, &b.qkv.bias, &b.proj.bias,
             &b.fc1.bias, &b.fc2.bias, &tr.positions},
            14);
  Rng rng(6);
  const Tensor<double> z = random_tensor({1, 2, 4}, rng);
  Tape<double> t;
  const Tensor<double> got = transition_causal(m, t, t.constant(z)).value();

  std::vector<std::vector<double>> x(2, std::vector<double>(4));
  for (int s = 0; s < 2; ++s)
    for (int j = 0; j < 4; ++j) x[std::size_t(s)][std::size_t(j)] = z[s * 4 + j] + tr.positions.value[s * 4 + j];
  std::vector<std::vector<double>> q(2), k(2), v(2);
  for (int s = 0; s < 2; ++s) {
    const std::vector<double> h = affine(ln_row(x[std::size_t(s)], b.ln1.gamma.value, b.ln1.beta.value), b.qkv);
    q[std::size_t(s)].assign(h.begin(), h.begin() + 4);
    k[std::size_t(s)].assign(h.begin() + 4, h.begin() + 8);
    v[std::size_t(s)].assign(h.begin() + 8, h.begin() + 12);
  }
  for (int s = 0; s < 2; ++s) {
    // Token s attends to tokens 0..s.
    std::vector<double> w;
    double mx = -1e300;
    for (int r = 0; r <= s; ++r) {
      double dot = 0.0;
      for (int j = 0; j < 4; ++j) dot += q[std::size_t(s)][std::size_t(j)] * k[std::size_t(r)][std::size_t(j)];
      w.push_back(dot / 2.0);
      mx = std::max(mx, w.back());
    }
    double den = 0.0;
    for (double& e : w) den += (e = std::exp(e - mx));
    std::vector<double> att(4, 0.0);
    for (int r = 0; r <= s; ++r)
      for (int j = 0; j < 4; ++j) att[std::size_t(j)] += w[std::size_t(r)] / den * v[std::size_t(r)][std::size_t(j)];
    std::vector<double> x1 = affine(att, b.proj);
    for (int j = 0; j < 4; ++j) x1[std::size_t(j)] += x[std::size_t(s)][std::size_t(j)];
    std::vector<double> h = affine(ln_row(x1, b.ln2.gamma.value, b.ln2.beta.value), b.fc1);
    for (double& e : h) e = gelu_exact(e);
    std::vector<double> x2 = affine(h, b.fc2);
    for (int j = 0; j < 4; ++j) x2[std::size_t(j)] += x1[std::size_t(j)];
    const std::vector<double> out = ln_row(x2, tr.ln_f.gamma.value, tr.ln_f.beta.value);
    for (int j = 0; j < 4; ++j) CHECK(got[s * 4 + j] == doctest::Approx(out[std::size_t(j)]).epsilon(1e-12));
  }
}

TEST_CASE("non-causal masking picks ceil(ratio * T) positions per sequence") {
  ModelBundle<double> m(tiny_config(TransitionKind::NonCausalTransformer), 3);
  Rng zr(1);
  const Tensor<double> z = random_tensor({4, 10, 8}, zr);
  for (const auto& [ratio, count] : std::vector<std::pair<double, std::size_t>>{{0.5, 5}, {0.3, 3}, {0.7, 7}}) {
    Rng r1(42), r2(42);
    Tape<double> t;
    const TransitionOutput<double> a = transition_noncausal(m, t, t.constant(z), ratio, r1);
    const TransitionOutput<double> b = transition_noncausal(m, t, t.constant(z), ratio, r2);
    REQUIRE(a.masked.size() == 4);
    for (const auto& seq : a.masked) {
      CHECK(seq.size() == count);
      CHECK(std::set<int>(seq.begin(), seq.end()).size() == count);
    }
    CHECK(a.masked == b.masked);
    CHECK(a.context.value() == b.context.value());
  }
  Rng r(1);
  Tape<double> t;
  CHECK_THROWS_AS(transition_noncausal(m, t, t.constant(z), 0.0, r), ConfigError);
  CHECK_THROWS_AS(transition_noncausal(m, t, t.constant(z), 1.0, r), ConfigError);
}

TEST_CASE("masked inputs are replaced by the mask token") {
  ModelBundle<double> m(tiny_config(TransitionKind::NonCausalTransformer), 3);
  Rng zr(2);
  const Tensor<double> z = random_tensor({1, 10, 8}, zr);
  Rng r1(7), r2(7);
  Tape<double> t;
  const TransitionOutput<double> a = transition_noncausal(m, t, t.constant(z), 0.5, r1);
  // Changing the masked inputs must not change anything.
  Tensor<double> p = z;
  for (int pos : a.masked[0])
    for (Index j = 0; j < 8; ++j) p[pos * 8 + j] += 5.0;
  const TransitionOutput<double> b = transition_noncausal(m, t, t.constant(p), 0.5, r2);
  CHECK(max_abs_diff(a.context.value(), b.context.value()) <= 1e-12);
}

TEST_CASE("the GRU transition is causal and zero in, zero out") {
  ModelBundle<double> m(tiny_config(TransitionKind::Gru), 5);
  Rng rng(8);
  const Tensor<double> z = random_tensor({2, 6, 8}, rng);
  Tape<double> t;
  const Tensor<double> base = transition_gru(m, t, t.constant(z)).value();
  Tensor<double> p = z;
  for (Index i = 0; i < 2; ++i)
    for (Index j = 0; j < 8; ++j) p[(i * 6 + 4) * 8 + j] += 2.0;
  const Tensor<double> out = transition_gru(m, t, t.constant(p)).value();
  for (Index i = 0; i < 2; ++i)
    for (Index s = 0; s < 4; ++s)
      for (Index j = 0; j < 8; ++j) CHECK(std::abs(out[(i * 6 + s) * 8 + j] - base[(i * 6 + s) * 8 + j]) <= 1e-6);

  for (auto& layer : m.gru)
    for (Parameter<double>* prm : {&layer.w_ih, &layer.w_hh, &layer.b_ih, &layer.b_hh}) prm->value = Tensor<double>::zeros(prm->value.shape());
  const Tensor<double> zero = transition_gru(m, t, t.constant(Tensor<double>::zeros({1, 3, 8}))).value();
  for (double e : zero.values()) CHECK(e == 0.0);
}

TEST_CASE("a one-unit GRU follows the scalar recurrence") {
  Rng init(1);
  GruLayer<double> g("g", 1, 1, init);
  g.w_ih.value = Tensor<double>({1, 3}, std::vector<double>{0.5, -0.3, 0.8});
  g.w_hh.value = Tensor<double>({1, 3}, std::vector<double>{0.2, 0.7, -0.6});
  g.b_ih.value = Tensor<double>({3}, std::vector<double>{0.1, 0.0, -0.2});
  g.b_hh.value = Tensor<double>({3}, std::vector<double>{0.05, -0.1, 0.3});
  const std::vector<double> xs{1.5, -0.4};
  Tape<double> t;
  const Tensor<double> out = g(t, t.constant(Tensor<double>({1, 2, 1}, xs))).value();
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  double h = 0.0;
  for (int s = 0; s < 2; ++s) {
    const double x = xs[std::size_t(s)];
    const double r = sig(0.5 * x + 0.1 + 0.2 * h + 0.05);
    const double u = sig(-0.3 * x + 0.0 + 0.7 * h - 0.1);
    const double n = std::tanh(0.8 * x - 0.2 + r * (-0.6 * h + 0.3));
    h = (1.0 - u) * n + u * h;
    CHECK(out[s] == doctest::Approx(h).epsilon(1e-14));
  }
}

TEST_CASE("interleaving places states at odd and actions at even 1-based positions") {
  Rng rng(3);
  const Tensor<double> z = random_tensor({2, 3, 4}, rng), y = random_tensor({2, 3, 4}, rng);
  Tape<double> t;
  const Tensor<double> tau = interleave_trajectory(t.constant(z), t.constant(y)).value();
  CHECK(tau.shape() == Shape{2, 6, 4});
  CHECK(gather_steps(tau, {0, 2, 4}) == z);
  CHECK(gather_steps(tau, {1, 3, 5}) == y);
  const Tensor<double> one = interleave_trajectory(t.constant(random_tensor({1, 1, 4}, rng)), t.constant(Tensor<double>::ones({1, 1, 4}))).value();
  CHECK(one.shape() == Shape{1, 2, 4});
  CHECK_THROWS_AS(interleave_trajectory(t.constant(z), t.constant(Tensor<double>::zeros({2, 2, 4}))), ShapeError);

  // 1-based {2, 4, 6} for predictions and {1, 3, 5} for action logits.
  CHECK(latent_positions(3) == std::vector<int>{1, 3, 5});
  CHECK(action_positions(3) == std::vector<int>{0, 2, 4});
}

TEST_CASE("forward_state equals the manual composition and yields unit rows") {
  for (TransitionKind kind : {TransitionKind::CausalTransformer, TransitionKind::Gru, TransitionKind::NonCausalTransformer}) {
    ModelBundle<double> m(tiny_config(kind), 21);
    Rng rng(3);
    const Tensor<double> v1 = random_tensor({2, 4, 1, 8, 8}, rng, 0, 1), v2 = random_tensor({2, 4, 1, 8, 8}, rng, 0, 1);
    Tape<double> t;
    Rng mr1(5);
    const StateForward<double> f = forward_state(m, t, v1, v2, false, 0.5, &mr1);
    for (const Var<double>* out : {&f.z1, &f.z2, &f.q1, &f.q2}) {
      const Tensor<double>& x = out->value();
      for (Index r = 0; r < x.numel() / 8; ++r) CHECK(std::abs(Eigen::Map<const Eigen::VectorXd>(x.data() + r * 8, 8).norm() - 1.0) <= 1e-6);
    }
    Tape<double> u;
    Rng mr2(5);
    const Var<double> z1 = project(m, u, encode(m, u, u.constant(v1)), false);
    const Var<double> q1 = l2_normalize(predict(m, u, transition(m, u, z1, 0.5, &mr2).context, false));
    CHECK(max_abs_diff(l2_normalize(z1).value(), f.z1.value()) == 0.0);
    CHECK(max_abs_diff(q1.value(), f.q1.value()) == 0.0);

    Tape<double> w;
    Rng mr3(5);
    const StateForward<double> same = forward_state(m, w, v1, v1, false, 0.5, &mr3);
    CHECK(same.z1.value() == same.z2.value());
  }
}

TEST_CASE("with batch norm off the forward pass is pure") {
  ModelConfig c = tiny_config();
  c.predictor_bn = false;
  ModelBundle<double> m(c, 2);
  Rng rng(4);
  const Tensor<double> v = random_tensor({2, 3, 1, 8, 8}, rng, 0, 1);
  Tape<double> a, b;
  CHECK(forward_state(m, a, v, v, true).q1.value() == forward_state(m, b, v, v, false).q1.value());
}

TEST_CASE("forward_demo reads predictions and logits from the documented positions") {
  ModelConfig c = tiny_config();
  c.with_actions = true;
  ModelBundle<double> m(c, 31);
  Rng rng(5);
  const Tensor<double> v1 = random_tensor({2, 3, 1, 8, 8}, rng, 0, 1), v2 = random_tensor({2, 3, 1, 8, 8}, rng, 0, 1);
  const std::vector<int> actions{0, 4, 2, 1, 1, 3};
  Tape<double> t;
  const DemoForward<double> f = forward_demo(m, t, v1, v2, actions, false);
  CHECK(f.l1.shape() == Shape{2, 3, 5});
  CHECK(f.q1.shape() == Shape{2, 3, 8});

  Tape<double> u;
  const Var<double> z = project(m, u, encode(m, u, u.constant(v1)), false);
  const Var<double> y = embedding(u.param(m.action_embedding), std::span<const int>(actions), Shape{2, 3});
  const Tensor<double> ctx = transition_causal(m, u, interleave_trajectory(z, y)).value();
  const Tensor<double> q = l2_normalize(predict(m, u, u.constant(gather_steps(ctx, latent_positions(3))), false)).value();
  const Tensor<double> l = m.action_head(u, u.constant(gather_steps(ctx, action_positions(3))), false).value();
  CHECK(max_abs_diff(q, f.q1.value()) <= 1e-12);
  CHECK(max_abs_diff(l, f.l1.value()) <= 1e-12);

  std::vector<int> bad = actions;
  bad[0] = 5;
  CHECK_THROWS_AS(forward_demo(m, u, v1, v2, bad, false), ShapeError);
}

TEST_CASE("demo logits at step t depend only on tokens up to 2t - 1") {
  ModelConfig c = tiny_config();
  c.with_actions = true;
  c.predictor_bn = false;
  ModelBundle<double> m(c, 32);
  Rng rng(6);
  const Tensor<double> v = random_tensor({1, 4, 1, 8, 8}, rng, 0, 1);
  const std::vector<int> actions{1, 2, 3, 4};
  Tape<double> t;
  const DemoForward<double> base = forward_demo(m, t, v, v, actions, false);
  for (int step = 0; step < 4; ++step) {
    // Change the action at `step` and every frame after it.
    Tensor<double> pv = v;
    for (Index s = step + 1; s < 4; ++s)
      for (Index p = 0; p < 64; ++p) pv[s * 64 + p] = rng.uniform();
    std::vector<int> pa = actions;
    for (int s = step; s < 4; ++s) pa[std::size_t(s)] = (pa[std::size_t(s)] + 1) % 5;
    Tape<double> u;
    const DemoForward<double> f = forward_demo(m, u, pv, pv, pa, false);
    for (Index s = 0; s <= step; ++s)
      for (Index j = 0; j < 5; ++j) CHECK(std::abs(f.l1.value()[s * 5 + j] - base.l1.value()[s * 5 + j]) <= 1e-6);
  }
}

TEST_CASE("parameter count is a pure function of the config") {
  for (TransitionKind kind : {TransitionKind::CausalTransformer, TransitionKind::Gru, TransitionKind::NonCausalTransformer}) {
    for (bool actions : {false, true}) {
      if (actions && kind == TransitionKind::NonCausalTransformer) continue;
      ModelConfig c;
      c.transition = kind;
      c.with_actions = actions;
      c.projector_bn = actions;
      ModelBundle<float> a(c, 1), b(c, 2);
      CHECK(a.parameter_count() == std::size_t(expected_parameter_count(c)));
      CHECK(a.parameter_count() == b.parameter_count());
    }
  }
  CHECK(ModelBundle<float>(ModelConfig{}, 0).parameter_count() == 139104);
}

TEST_CASE("parameter names are unique and embedding rows match the action count") {
  ModelConfig c;
  c.with_actions = true;
  ModelBundle<float> m(c, 1);
  std::set<std::string> names;
  for (const Parameter<float>* p : m.parameters()) CHECK(names.insert(p->name).second);
  CHECK(m.action_embedding.value.dim(0) == c.num_actions);
  CHECK(m.action_embedding.value.dim(1) == c.latent_dim);
}

TEST_CASE("the same seed builds identical parameters") {
  ModelBundle<float> a(ModelConfig{}, 7), b(ModelConfig{}, 7), c(ModelConfig{}, 8);
  const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i]->value == pb[i]->value);
    any_diff = any_diff || !(pa[i]->value == pc[i]->value);
  }
  CHECK(any_diff);
}

TEST_CASE("invalid model configs are rejected") {
  ModelConfig c;
  c.heads = 3;  // 64 not divisible by 3
  CHECK_THROWS_AS(c.validate(), ConfigError);
  ModelConfig s;
  s.conv_strides = {2, 2};
  CHECK_THROWS_AS(s.validate(), ConfigError);
  CHECK(parse_transition_kind("gru") == TransitionKind::Gru);
  CHECK(parse_transition_kind("non-causal") == TransitionKind::NonCausalTransformer);
  CHECK_THROWS_AS(parse_transition_kind("lstm"), ConfigError);
}

TEST_CASE("causal outputs are invariant to future inputs at 32-bit") {
  for (std::uint64_t seed : {1, 2}) {
    const verify::CausalityCheck r = verify::check_causality(seed);
    CHECK(r.transformer_max <= 1e-6);
    CHECK(r.gru_max <= 1e-6);
    CHECK(r.demo_max <= 1e-6);
    CHECK(r.positions_exact);
  }
}

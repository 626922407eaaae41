#include "tpr/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace tpr {

const char* to_string(TransitionKind kind) {
  switch (kind) {
    case TransitionKind::CausalTransformer: return "causal-transformer";
    case TransitionKind::NonCausalTransformer: return "non-causal";
    case TransitionKind::Gru: return "gru";
  }
  return "?";
}

TransitionKind parse_transition_kind(const std::string& name) {
  if (name == "causal-transformer" || name == "causal") return TransitionKind::CausalTransformer;
  if (name == "non-causal" || name == "noncausal" || name == "non-causal-transformer") return TransitionKind::NonCausalTransformer;
  if (name == "gru") return TransitionKind::Gru;
  throw ConfigError("unknown transition kind '" + name + "' (expected causal-transformer, non-causal or gru)");
}

void ModelConfig::validate() const {
  if (channels < 1 || height < 1 || width < 1) throw ConfigError("model: observation dimensions must be positive");
  if (num_actions < 1) throw ConfigError("model: num_actions must be >= 1");
  if (conv_channels.empty() || conv_channels.size() != conv_strides.size()) {
    throw ConfigError("model: conv_channels and conv_strides must be non-empty and of equal length");
  }
  for (std::size_t i = 0; i < conv_channels.size(); ++i) {
    if (conv_channels[i] < 1 || conv_strides[i] < 1) throw ConfigError("model: conv channels/strides must be positive");
  }
  if (latent_dim < 1 || projector_hidden < 1 || predictor_hidden < 1 || action_hidden < 1) {
    throw ConfigError("model: widths must be positive");
  }
  if (transition != TransitionKind::Gru) {
    if (heads < 1 || latent_dim % heads != 0) throw ConfigError("model: latent_dim must be divisible by heads");
    if (layers < 1 || mlp_hidden < 1 || max_positions < 1) throw ConfigError("model: transformer sizes must be positive");
  } else if (layers < 1) {
    throw ConfigError("model: GRU needs at least one layer");
  }
  if (feature_dim() < 1) throw ConfigError("model: encoder reduces the image to nothing");
}

int ModelConfig::feature_dim() const {
  int h = height, w = width;
  for (int s : conv_strides) {
    h = (h + 2 - 3) / s + 1;
    w = (w + 2 - 3) / s + 1;
  }
  return conv_channels.back() * h * w;
}

ModelConfig ModelConfig::full_scale() {
  ModelConfig c;
  c.channels = 4;
  c.height = 84;
  c.width = 84;
  c.num_actions = 18;
  c.conv_channels = {16, 64, 64};
  c.conv_strides = {3, 2, 2};
  c.latent_dim = 512;
  c.projector_hidden = 512;
  c.predictor_hidden = 512;
  c.action_hidden = 512;
  c.heads = 8;
  c.mlp_hidden = 2048;
  return c;
}

namespace {

template <typename S>
Tensor<S> uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor<S> t(std::move(shape));
  for (S& v : t.values()) v = S(rng.uniform(-bound, bound));
  return t;
}

template <typename S>
Tensor<S> normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor<S> t(std::move(shape));
  for (S& v : t.values()) v = S(stddev * rng.normal());
  return t;
}

// Kaiming-uniform bound for ReLU fan-in scaling.
double kaiming_bound(Index fan_in) { return std::sqrt(6.0 / double(fan_in)); }

template <typename S>
Var<S> flatten_rows(const Var<S>& x) {
  const Index c = x.dim(-1);
  return reshape(x, Shape{x.numel() / c, c});
}

}  // namespace

template <typename S>
Linear<S>::Linear(const std::string& name, int in, int out, Rng& rng)
    : weight(name + ".weight", uniform_tensor<S>({in, out}, kaiming_bound(in), rng)),
      bias(name + ".bias", Tensor<S>::zeros({out})) {}

template <typename S>
Var<S> Linear<S>::operator()(Tape<S>& tape, const Var<S>& x) {
  const Index in = weight.value.dim(0), out = weight.value.dim(1);
  if (x.rank() < 1 || x.dim(-1) != in) {
    throw ShapeError("linear " + weight.name + ": input " + shape_str(x.shape()) + " does not end in " + std::to_string(in));
  }
  Shape shape = x.shape();
  shape.back() = out;
  Var<S> y = matmul(reshape(x, Shape{x.numel() / in, in}), tape.param(weight)) + tape.param(bias);
  return reshape(y, std::move(shape));
}

template <typename S>
BatchNorm<S>::BatchNorm(const std::string& n, int width)
    : name(n), gamma(n + ".gamma", Tensor<S>::ones({width})), beta(n + ".beta", Tensor<S>::zeros({width})) {
  stats.running_mean = Tensor<S>::zeros({width});
  stats.running_var = Tensor<S>::ones({width});
}

template <typename S>
Var<S> BatchNorm<S>::operator()(Tape<S>& tape, const Var<S>& x, bool training) {
  Shape shape = x.shape();
  Var<S> y = batch_norm(flatten_rows(x), tape.param(gamma), tape.param(beta), stats, training);
  return reshape(y, std::move(shape));
}

template <typename S>
LayerNorm<S>::LayerNorm(const std::string& name, int width)
    : gamma(name + ".gamma", Tensor<S>::ones({width})), beta(name + ".beta", Tensor<S>::zeros({width})) {}

template <typename S>
Var<S> LayerNorm<S>::operator()(Tape<S>& tape, const Var<S>& x) {
  return layer_norm(x, tape.param(gamma), tape.param(beta));
}

template <typename S>
Mlp<S>::Mlp(const std::string& name, int in, int hidden, int out, bool batch_norm, Rng& rng)
    : fc1(name + ".fc1", in, hidden, rng), fc2(name + ".fc2", hidden, out, rng) {
  if (batch_norm) bn.emplace(name + ".bn", hidden);
}

template <typename S>
Var<S> Mlp<S>::operator()(Tape<S>& tape, const Var<S>& x, bool training) {
  Var<S> h = fc1(tape, x);
  if (bn) h = (*bn)(tape, h, training);
  return fc2(tape, relu(h));
}

template <typename S>
ConvEncoder<S>::ConvEncoder(const ModelConfig& cfg, Rng& rng) : strides(cfg.conv_strides) {
  int in = cfg.channels;
  for (std::size_t i = 0; i < cfg.conv_channels.size(); ++i) {
    const int out = cfg.conv_channels[i];
    const std::string name = "encoder.conv" + std::to_string(i);
    weights.emplace_back(name + ".weight", uniform_tensor<S>({out, in, 3, 3}, kaiming_bound(in * 9), rng));
    biases.emplace_back(name + ".bias", Tensor<S>::zeros({out}));
    in = out;
  }
}

template <typename S>
Var<S> ConvEncoder<S>::operator()(Tape<S>& tape, const Var<S>& x) {
  if (x.rank() != 5) throw ShapeError("encode: expected [N, T, C, H, W], got " + shape_str(x.shape()));
  const Index n = x.dim(0), t = x.dim(1);
  Var<S> h = reshape(x, Shape{n * t, x.dim(2), x.dim(3), x.dim(4)});
  for (std::size_t i = 0; i < weights.size(); ++i) {
    Conv2dOptions opt{strides[i], 1, PadMode::Zero};
    h = relu(conv2d(h, tape.param(weights[i]), std::optional<Var<S>>(tape.param(biases[i])), opt));
  }
  return reshape(h, Shape{n, t, h.numel() / (n * t)});
}

template <typename S>
TransformerBlock<S>::TransformerBlock(const std::string& name, int d, int h, int mlp_hidden, Rng& rng)
    : heads(h),
      ln1(name + ".ln1", d),
      qkv(name + ".qkv", d, 3 * d, rng),
      proj(name + ".proj", d, d, rng),
      ln2(name + ".ln2", d),
      fc1(name + ".fc1", d, mlp_hidden, rng),
      fc2(name + ".fc2", mlp_hidden, d, rng) {}

template <typename S>
Var<S> TransformerBlock<S>::operator()(Tape<S>& tape, const Var<S>& x, const Tensor<S>* mask) {
  const Index n = x.dim(0), len = x.dim(1), d = x.dim(2);
  const Index dh = d / heads;
  Var<S> h = qkv(tape, ln1(tape, x));
  auto split_heads = [&](Index part) {
    Var<S> p = reshape(slice(h, -1, part * d, (part + 1) * d), Shape{n, len, heads, dh});
    return reshape(permute(p, {0, 2, 1, 3}), Shape{n * heads, len, dh});
  };
  Var<S> q = split_heads(0), k = split_heads(1), v = split_heads(2);
  Var<S> scores = scale(matmul(q, transpose(k, 1, 2)), S(1.0 / std::sqrt(double(dh))));
  Var<S> att = matmul(softmax(scores, mask), v);
  att = reshape(permute(reshape(att, Shape{n, heads, len, dh}), {0, 2, 1, 3}), Shape{n, len, d});
  Var<S> x1 = x + proj(tape, att);
  return x1 + fc2(tape, gelu(fc1(tape, ln2(tape, x1))));
}

template <typename S>
Transformer<S>::Transformer(const std::string& name, const ModelConfig& cfg, Rng& rng)
    : positions(name + ".positions", normal_tensor<S>({cfg.max_positions, cfg.latent_dim}, 0.02, rng)),
      ln_f(name + ".ln_f", cfg.latent_dim) {
  for (int i = 0; i < cfg.layers; ++i) {
    blocks.emplace_back(name + ".block" + std::to_string(i), cfg.latent_dim, cfg.heads, cfg.mlp_hidden, rng);
  }
}

template <typename S>
Var<S> Transformer<S>::operator()(Tape<S>& tape, const Var<S>& x, const Tensor<S>* mask) {
  if (x.rank() != 3) throw ShapeError("transformer: expected [N, L, d], got " + shape_str(x.shape()));
  const Index len = x.dim(1);
  if (len > positions.value.dim(0)) {
    throw ShapeError("transformer: sequence length " + std::to_string(len) + " exceeds positional table of " +
                     std::to_string(positions.value.dim(0)));
  }
  Var<S> h = x + slice(tape.param(positions), 0, 0, len);
  for (auto& b : blocks) h = b(tape, h, mask);
  return ln_f(tape, h);
}

template <typename S>
GruLayer<S>::GruLayer(const std::string& name, int in, int h, Rng& rng)
    : hidden(h),
      w_ih(name + ".w_ih", uniform_tensor<S>({in, 3 * h}, 1.0 / std::sqrt(double(h)), rng)),
      w_hh(name + ".w_hh", uniform_tensor<S>({h, 3 * h}, 1.0 / std::sqrt(double(h)), rng)),
      b_ih(name + ".b_ih", Tensor<S>::zeros({3 * h})),
      b_hh(name + ".b_hh", Tensor<S>::zeros({3 * h})) {}

template <typename S>
Var<S> GruLayer<S>::operator()(Tape<S>& tape, const Var<S>& x) {
  if (x.rank() != 3 || x.dim(2) != w_ih.value.dim(0)) {
    throw ShapeError("gru: input " + shape_str(x.shape()) + " does not match input width " + std::to_string(w_ih.value.dim(0)));
  }
  const Index n = x.dim(0), t = x.dim(1), h = hidden;
  Var<S> gi_all = matmul(reshape(x, Shape{n * t, x.dim(2)}), tape.param(w_ih)) + tape.param(b_ih);
  gi_all = reshape(gi_all, Shape{n, t, 3 * h});
  Var<S> whh = tape.param(w_hh);
  Var<S> bhh = tape.param(b_hh);
  Var<S> state = tape.constant(Tensor<S>::zeros({n, h}));
  std::vector<Var<S>> outputs;
  for (Index step = 0; step < t; ++step) {
    Var<S> gi = reshape(slice(gi_all, 1, step, step + 1), Shape{n, 3 * h});
    Var<S> gh = matmul(state, whh) + bhh;
    Var<S> r = sigmoid(slice(gi, 1, 0, h) + slice(gh, 1, 0, h));
    Var<S> z = sigmoid(slice(gi, 1, h, 2 * h) + slice(gh, 1, h, 2 * h));
    Var<S> cand = tanh(slice(gi, 1, 2 * h, 3 * h) + r * slice(gh, 1, 2 * h, 3 * h));
    state = cand + z * (state - cand);
    outputs.push_back(reshape(state, Shape{n, 1, h}));
  }
  return concat(outputs, 1);
}

template <typename S>
Tensor<S> causal_mask(Index length) {
  Tensor<S> m({length, length});
  for (Index i = 0; i < length; ++i)
    for (Index j = i + 1; j < length; ++j) m[i * length + j] = -std::numeric_limits<S>::infinity();
  return m;
}

template <typename S>
ModelBundle<S>::ModelBundle(const ModelConfig& cfg, std::uint64_t seed) : config_(cfg) {
  cfg.validate();
  Rng rng(seed);
  const int d = cfg.latent_dim;
  encoder = ConvEncoder<S>(cfg, rng);
  projector = Mlp<S>("projector", cfg.feature_dim(), cfg.projector_hidden, d, cfg.projector_bn, rng);
  if (cfg.transition == TransitionKind::Gru) {
    for (int i = 0; i < cfg.layers; ++i) gru.emplace_back("gru" + std::to_string(i), d, d, rng);
  } else {
    transformer.emplace("transition", cfg, rng);
  }
  if (cfg.transition == TransitionKind::NonCausalTransformer) {
    mask_token = Parameter<S>("mask_token", normal_tensor<S>({d}, 0.02, rng));
  }
  predictor = Mlp<S>("predictor", d, cfg.predictor_hidden, d, cfg.predictor_bn, rng);
  if (cfg.with_actions) {
    action_embedding = Parameter<S>("action_embedding", normal_tensor<S>({cfg.num_actions, d}, 0.02, rng));
    action_head = Mlp<S>("action_head", d, cfg.action_hidden, cfg.num_actions, false, rng);
  }
}

namespace {

template <typename S, typename P>
void collect_linear(Linear<S>& l, std::vector<P>& out) {
  out.push_back(&l.weight);
  out.push_back(&l.bias);
}

template <typename S, typename P>
void collect_mlp(Mlp<S>& m, std::vector<P>& out) {
  collect_linear(m.fc1, out);
  if (m.bn) {
    out.push_back(&m.bn->gamma);
    out.push_back(&m.bn->beta);
  }
  collect_linear(m.fc2, out);
}

}  // namespace

template <typename S>
std::vector<Parameter<S>*> ModelBundle<S>::parameters() {
  std::vector<Parameter<S>*> out;
  for (std::size_t i = 0; i < encoder.weights.size(); ++i) {
    out.push_back(&encoder.weights[i]);
    out.push_back(&encoder.biases[i]);
  }
  collect_mlp(projector, out);
  if (transformer) {
    out.push_back(&transformer->positions);
    for (auto& b : transformer->blocks) {
      out.push_back(&b.ln1.gamma);
      out.push_back(&b.ln1.beta);
      collect_linear(b.qkv, out);
      collect_linear(b.proj, out);
      out.push_back(&b.ln2.gamma);
      out.push_back(&b.ln2.beta);
      collect_linear(b.fc1, out);
      collect_linear(b.fc2, out);
    }
    out.push_back(&transformer->ln_f.gamma);
    out.push_back(&transformer->ln_f.beta);
  }
  for (auto& g : gru) {
    out.push_back(&g.w_ih);
    out.push_back(&g.w_hh);
    out.push_back(&g.b_ih);
    out.push_back(&g.b_hh);
  }
  if (config_.transition == TransitionKind::NonCausalTransformer) out.push_back(&mask_token);
  collect_mlp(predictor, out);
  if (config_.with_actions) {
    out.push_back(&action_embedding);
    collect_mlp(action_head, out);
  }
  return out;
}

template <typename S>
std::vector<const Parameter<S>*> ModelBundle<S>::parameters() const {
  auto ps = const_cast<ModelBundle*>(this)->parameters();
  return {ps.begin(), ps.end()};
}

template <typename S>
std::vector<std::pair<std::string, Tensor<S>*>> ModelBundle<S>::buffers() {
  std::vector<std::pair<std::string, Tensor<S>*>> out;
  for (Mlp<S>* m : {&projector, &predictor}) {
    if (!m->bn) continue;
    out.emplace_back(m->bn->name + ".running_mean", &m->bn->stats.running_mean);
    out.emplace_back(m->bn->name + ".running_var", &m->bn->stats.running_var);
  }
  return out;
}

template <typename S>
std::size_t ModelBundle<S>::parameter_count() const {
  std::size_t n = 0;
  for (const auto* p : parameters()) n += std::size_t(p->value.numel());
  return n;
}

template <typename S>
Var<S> encode(ModelBundle<S>& m, Tape<S>& tape, const Var<S>& x) {
  const ModelConfig& c = m.config();
  if (x.rank() != 5 || x.dim(2) != c.channels || x.dim(3) != c.height || x.dim(4) != c.width) {
    throw ShapeError("encode: input " + shape_str(x.shape()) + " does not match observation [" + std::to_string(c.channels) +
                     "," + std::to_string(c.height) + "," + std::to_string(c.width) + "]");
  }
  return m.encoder(tape, x);
}

template <typename S>
Var<S> project(ModelBundle<S>& m, Tape<S>& tape, const Var<S>& features, bool training) {
  return m.projector(tape, features, training);
}

template <typename S>
Var<S> transition_causal(ModelBundle<S>& m, Tape<S>& tape, const Var<S>& z) {
  if (!m.transformer) throw ConfigError("transition_causal: model has no transformer");
  const Tensor<S> mask = causal_mask<S>(z.dim(1));
  return (*m.transformer)(tape, z, &mask);
}

template <typename S>
TransitionOutput<S> transition_noncausal(ModelBundle<S>& m, Tape<S>& tape, const Var<S>& z, double mask_ratio, Rng& rng) {
  if (!m.transformer || m.config().transition != TransitionKind::NonCausalTransformer) {
    throw ConfigError("transition_noncausal: model was not built with the non-causal transition");
  }
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ConfigError("transition_noncausal: mask ratio must lie in (0, 1)");
  const Index n = z.dim(0), t = z.dim(1), d = z.dim(2);
  const int count = int(std::ceil(mask_ratio * double(t) - 1e-9));
  TransitionOutput<S> out;
  Tensor<S> sel({n, t, 1});
  for (Index i = 0; i < n; ++i) {
    // Partial Fisher-Yates: the first `count` entries are a uniform subset.
    std::vector<int> order(static_cast<std::size_t>(t));
    std::iota(order.begin(), order.end(), 0);
    for (int k = 0; k < count; ++k) {
      const auto j = std::size_t(k) + std::size_t(rng.uniform_index(std::uint64_t(t - k)));
      std::swap(order[std::size_t(k)], order[j]);
    }
    std::vector<int> picked(order.begin(), order.begin() + count);
    std::sort(picked.begin(), picked.end());
    for (int p : picked) sel[i * t + p] = S(1);
    out.masked.push_back(std::move(picked));
  }
  Tensor<S> keep(sel.shape());
  for (Index i = 0; i < keep.numel(); ++i) keep[i] = S(1) - sel[i];
  Var<S> token = reshape(tape.param(m.mask_token), Shape{1, 1, d});
  Var<S> input = z * tape.constant(std::move(keep)) + token * tape.constant(std::move(sel));
  out.context = (*m.transformer)(tape, input, nullptr);
  return out;
}

template <typename S>
Var<S> transition_gru(ModelBundle<S>& m, Tape<S>& tape, const Var<S>& z) {
  if (m.gru.empty()) throw ConfigError("transition_gru: model has no GRU layers");
  Var<S> h = z;
  for (auto& layer : m.gru) h = layer(tape, h);
  return h;
}

template <typename S>
TransitionOutput<S> transition(ModelBundle<S>& m, Tape<S>& tape, const Var<S>& z, double mask_ratio, Rng* mask_rng) {
  switch (m.config().transition) {
    case TransitionKind::CausalTransformer: return {transition_causal(m, tape, z), {}};
    case TransitionKind::Gru: return {transition_gru(m, tape, z), {}};
    case TransitionKind::NonCausalTransformer:
      if (mask_rng == nullptr) throw ConfigError("transition: non-causal variant needs a masking stream");
      return transition_noncausal(m, tape, z, mask_ratio, *mask_rng);
  }
  throw ConfigError("transition: unknown kind");
}

template <typename S>
Var<S> predict(ModelBundle<S>& m, Tape<S>& tape, const Var<S>& context, bool training) {
  return m.predictor(tape, context, training);
}

template <typename S>
Var<S> interleave_trajectory(const Var<S>& z, const Var<S>& y) {
  if (z.shape() != y.shape() || z.rank() != 3) {
    throw ShapeError("interleave_trajectory: shapes " + shape_str(z.shape()) + " and " + shape_str(y.shape()) +
                     " must be equal [N, T, d]");
  }
  const Index n = z.dim(0), t = z.dim(1), d = z.dim(2);
  Var<S> pair = concat(std::vector<Var<S>>{reshape(z, Shape{n, t, 1, d}), reshape(y, Shape{n, t, 1, d})}, 2);
  return reshape(pair, Shape{n, 2 * t, d});
}

std::vector<int> latent_positions(int t) {
  std::vector<int> p;
  for (int i = 0; i < t; ++i) p.push_back(2 * i + 1);
  return p;
}

std::vector<int> action_positions(int t) {
  std::vector<int> p;
  for (int i = 0; i < t; ++i) p.push_back(2 * i);
  return p;
}

template <typename S>
StateForward<S> forward_state(ModelBundle<S>& m, Tape<S>& tape, const Tensor<S>& view1, const Tensor<S>& view2,
                              bool training, double mask_ratio, Rng* mask_rng) {
  StateForward<S> f;
  f.z1_raw = project(m, tape, encode(m, tape, tape.constant(view1)), training);
  f.z2_raw = project(m, tape, encode(m, tape, tape.constant(view2)), training);
  TransitionOutput<S> c1 = transition(m, tape, f.z1_raw, mask_ratio, mask_rng);
  TransitionOutput<S> c2 = transition(m, tape, f.z2_raw, mask_ratio, mask_rng);
  f.mask1 = std::move(c1.masked);
  f.mask2 = std::move(c2.masked);
  f.q1 = l2_normalize(predict(m, tape, c1.context, training));
  f.q2 = l2_normalize(predict(m, tape, c2.context, training));
  f.z1 = l2_normalize(f.z1_raw);
  f.z2 = l2_normalize(f.z2_raw);
  return f;
}

template <typename S>
DemoForward<S> forward_demo(ModelBundle<S>& m, Tape<S>& tape, const Tensor<S>& view1, const Tensor<S>& view2,
                            std::span<const int> actions, bool training) {
  const ModelConfig& c = m.config();
  if (!c.with_actions) throw ConfigError("forward_demo: model was built without action components");
  if (c.transition == TransitionKind::NonCausalTransformer) {
    throw ConfigError("forward_demo: demonstration pretraining needs a causal transition");
  }
  DemoForward<S> f;
  f.z1_raw = project(m, tape, encode(m, tape, tape.constant(view1)), training);
  f.z2_raw = project(m, tape, encode(m, tape, tape.constant(view2)), training);
  const Index n = f.z1_raw.dim(0), t = f.z1_raw.dim(1);
  for (int a : actions) {
    if (a < 0 || a >= c.num_actions) throw ShapeError("forward_demo: action " + std::to_string(a) + " out of range");
  }
  Var<S> y = embedding(tape.param(m.action_embedding), actions, Shape{n, t});
  auto run = [&](const Var<S>& z, Var<S>& q, Var<S>& l) {
    Var<S> ctx = transition(m, tape, interleave_trajectory(z, y), 0.0, nullptr).context;
    q = l2_normalize(predict(m, tape, slice(ctx, 1, 1, 2 * t, 2), training));
    l = m.action_head(tape, slice(ctx, 1, 0, 2 * t, 2), training);
  };
  run(f.z1_raw, f.q1, f.l1);
  run(f.z2_raw, f.q2, f.l2);
  f.z1 = l2_normalize(f.z1_raw);
  f.z2 = l2_normalize(f.z2_raw);
  return f;
}

#define TPR_INSTANTIATE_MODEL(S)                                                                                       \
  template class Linear<S>;                                                                                            \
  template class BatchNorm<S>;                                                                                         \
  template class LayerNorm<S>;                                                                                         \
  template class Mlp<S>;                                                                                               \
  template class ConvEncoder<S>;                                                                                       \
  template class TransformerBlock<S>;                                                                                  \
  template class Transformer<S>;                                                                                       \
  template class GruLayer<S>;                                                                                          \
  template class ModelBundle<S>;                                                                                       \
  template Tensor<S> causal_mask<S>(Index);                                                                            \
  template Var<S> encode(ModelBundle<S>&, Tape<S>&, const Var<S>&);                                                    \
  template Var<S> project(ModelBundle<S>&, Tape<S>&, const Var<S>&, bool);                                             \
  template Var<S> transition_causal(ModelBundle<S>&, Tape<S>&, const Var<S>&);                                         \
  template TransitionOutput<S> transition_noncausal(ModelBundle<S>&, Tape<S>&, const Var<S>&, double, Rng&);           \
  template Var<S> transition_gru(ModelBundle<S>&, Tape<S>&, const Var<S>&);                                            \
  template TransitionOutput<S> transition(ModelBundle<S>&, Tape<S>&, const Var<S>&, double, Rng*);                     \
  template Var<S> predict(ModelBundle<S>&, Tape<S>&, const Var<S>&, bool);                                             \
  template Var<S> interleave_trajectory(const Var<S>&, const Var<S>&);                                                 \
  template StateForward<S> forward_state(ModelBundle<S>&, Tape<S>&, const Tensor<S>&, const Tensor<S>&, bool, double,  \
                                         Rng*);                                                                        \
  template DemoForward<S> forward_demo(ModelBundle<S>&, Tape<S>&, const Tensor<S>&, const Tensor<S>&,                  \
                                       std::span<const int>, bool);

TPR_INSTANTIATE_MODEL(float)
TPR_INSTANTIATE_MODEL(double)

}  // namespace tpr

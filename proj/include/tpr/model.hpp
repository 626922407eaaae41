#pragma once

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tpr/ops.hpp"
#include "tpr/rng.hpp"

namespace tpr {

enum class TransitionKind { CausalTransformer, NonCausalTransformer, Gru };

const char* to_string(TransitionKind kind);
TransitionKind parse_transition_kind(const std::string& name);

struct ModelConfig {
  // Observation geometry.
  int channels = 1;
  int height = 16;
  int width = 16;
  int num_actions = 5;

  // Encoder: one conv(3x3) + ReLU per entry.
  std::vector<int> conv_channels{16, 32, 32};
  std::vector<int> conv_strides{2, 2, 2};

  int latent_dim = 64;
  int projector_hidden = 64;
  int predictor_hidden = 64;
  int action_hidden = 64;

  TransitionKind transition = TransitionKind::CausalTransformer;
  int layers = 2;
  int heads = 2;
  int mlp_hidden = 256;
  int max_positions = 64;

  bool projector_bn = false;
  bool predictor_bn = true;
  /// Builds the action embedding and action head (demonstration pretraining).
  bool with_actions = false;

  void validate() const;
  /// Flattened encoder output width F.
  int feature_dim() const;

  /// Full-size architecture (84x84x4 frames, d = 512, 8 heads).
  static ModelConfig full_scale();
};

template <typename S>
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, int in, int out, Rng& rng);

  /// x [..., in] -> [..., out].
  Var<S> operator()(Tape<S>& tape, const Var<S>& x);

  Parameter<S> weight;  // [in, out]
  Parameter<S> bias;    // [out]
};

template <typename S>
class BatchNorm {
 public:
  BatchNorm() = default;
  BatchNorm(const std::string& name, int width);

  /// Normalizes x [..., C] over all leading positions.
  Var<S> operator()(Tape<S>& tape, const Var<S>& x, bool training);

  std::string name;
  Parameter<S> gamma;
  Parameter<S> beta;
  BatchNormStats<S> stats;
};

template <typename S>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(const std::string& name, int width);
  Var<S> operator()(Tape<S>& tape, const Var<S>& x);

  Parameter<S> gamma;
  Parameter<S> beta;
};

/// One-hidden-layer MLP: Linear -> [BatchNorm] -> ReLU -> Linear.
template <typename S>
class Mlp {
 public:
  Mlp() = default;
  Mlp(const std::string& name, int in, int hidden, int out, bool batch_norm, Rng& rng);
  Var<S> operator()(Tape<S>& tape, const Var<S>& x, bool training);

  Linear<S> fc1;
  std::optional<BatchNorm<S>> bn;
  Linear<S> fc2;
};

template <typename S>
class ConvEncoder {
 public:
  ConvEncoder() = default;
  ConvEncoder(const ModelConfig& cfg, Rng& rng);

  /// x [N, T, C, H, W] -> [N, T, F].
  Var<S> operator()(Tape<S>& tape, const Var<S>& x);

  std::vector<Parameter<S>> weights;
  std::vector<Parameter<S>> biases;
  std::vector<int> strides;
};

template <typename S>
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(const std::string& name, int d, int heads, int mlp_hidden, Rng& rng);

  /// Pre-norm block: x + attn(ln1(x)), then + mlp(ln2(x)). `mask` is an
  /// additive [L, L] attention mask or null for bidirectional attention.
  Var<S> operator()(Tape<S>& tape, const Var<S>& x, const Tensor<S>* mask);

  int heads = 1;
  LayerNorm<S> ln1;
  Linear<S> qkv;
  Linear<S> proj;
  LayerNorm<S> ln2;
  Linear<S> fc1;
  Linear<S> fc2;
};

template <typename S>
class Transformer {
 public:
  Transformer() = default;
  Transformer(const std::string& name, const ModelConfig& cfg, Rng& rng);

  /// x [N, L, d] -> [N, L, d]; learned positions, blocks, final layer norm.
  Var<S> operator()(Tape<S>& tape, const Var<S>& x, const Tensor<S>* mask);

  Parameter<S> positions;  // [max_positions, d]
  std::vector<TransformerBlock<S>> blocks;
  LayerNorm<S> ln_f;
};

template <typename S>
class GruLayer {
 public:
  GruLayer() = default;
  GruLayer(const std::string& name, int in, int hidden, Rng& rng);

  /// x [N, T, in] -> [N, T, hidden], zero initial state. Gates ordered (r, z, n).
  Var<S> operator()(Tape<S>& tape, const Var<S>& x);

  int hidden = 0;
  Parameter<S> w_ih;  // [in, 3h]
  Parameter<S> w_hh;  // [h, 3h]
  Parameter<S> b_ih;  // [3h]
  Parameter<S> b_hh;  // [3h]
};

/// Additive causal mask [L, L]: 0 where key <= query, -inf elsewhere.
template <typename S>
Tensor<S> causal_mask(Index length);

template <typename S>
struct TransitionOutput {
  Var<S> context;
  /// Masked time indices per sequence (non-causal variant only).
  std::vector<std::vector<int>> masked;
};

/// Parameters of every component plus the configuration they were built from.
template <typename S>
class ModelBundle {
 public:
  ModelBundle() = default;
  ModelBundle(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }

  /// Every trainable parameter in a fixed order; names are unique.
  std::vector<Parameter<S>*> parameters();
  std::vector<const Parameter<S>*> parameters() const;
  /// Non-trainable state (batch-norm running statistics) by name.
  std::vector<std::pair<std::string, Tensor<S>*>> buffers();
  std::size_t parameter_count() const;

  ConvEncoder<S> encoder;
  Mlp<S> projector;
  std::optional<Transformer<S>> transformer;
  std::vector<GruLayer<S>> gru;
  Parameter<S> mask_token;  // [d]
  Mlp<S> predictor;
  Parameter<S> action_embedding;  // [n_a, d]
  Mlp<S> action_head;

 private:
  ModelConfig config_;
};

// Forward pieces. `training` selects batch statistics for batch norm.

template <typename S>
Var<S> encode(ModelBundle<S>& m, Tape<S>& tape, const Var<S>& x);
template <typename S>
Var<S> project(ModelBundle<S>& m, Tape<S>& tape, const Var<S>& features, bool training);
template <typename S>
Var<S> transition_causal(ModelBundle<S>& m, Tape<S>& tape, const Var<S>& z);
/// Replaces ceil(ratio * T) uniformly chosen positions per sequence with the
/// learned mask token and runs bidirectional blocks.
template <typename S>
TransitionOutput<S> transition_noncausal(ModelBundle<S>& m, Tape<S>& tape, const Var<S>& z, double mask_ratio, Rng& rng);
template <typename S>
Var<S> transition_gru(ModelBundle<S>& m, Tape<S>& tape, const Var<S>& z);
/// Dispatches on the configured transition kind.
template <typename S>
TransitionOutput<S> transition(ModelBundle<S>& m, Tape<S>& tape, const Var<S>& z, double mask_ratio, Rng* mask_rng);
template <typename S>
Var<S> predict(ModelBundle<S>& m, Tape<S>& tape, const Var<S>& context, bool training);

/// tau = [z_1, y_1, ..., z_T, y_T] along axis 1.
template <typename S>
Var<S> interleave_trajectory(const Var<S>& z, const Var<S>& y);

/// 0-based positions of tau read by the latent predictor (action tokens)
/// and by the action head (state tokens).
std::vector<int> latent_positions(int t);
std::vector<int> action_positions(int t);

template <typename S>
struct StateForward {
  // l2-normalized projections and predictions, [N, T, d].
  Var<S> z1, z2, q1, q2;
  // Raw projections before normalization.
  Var<S> z1_raw, z2_raw;
  std::vector<std::vector<int>> mask1, mask2;
};

template <typename S>
struct DemoForward : StateForward<S> {
  // Action logits [N, T, n_a].
  Var<S> l1, l2;
};

template <typename S>
StateForward<S> forward_state(ModelBundle<S>& m, Tape<S>& tape, const Tensor<S>& view1, const Tensor<S>& view2,
                              bool training, double mask_ratio = 0.5, Rng* mask_rng = nullptr);

template <typename S>
DemoForward<S> forward_demo(ModelBundle<S>& m, Tape<S>& tape, const Tensor<S>& view1, const Tensor<S>& view2,
                            std::span<const int> actions, bool training);

}  // namespace tpr

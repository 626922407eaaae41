#include "tpr/train.hpp"

#include <zlib.h>

#include <bit>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstring>
#include <iterator>

#include "tpr/augment.hpp"

namespace tpr {

template <typename S>
OptimizerState<S>::OptimizerState(const OptimizerConfig& cfg, const std::vector<Parameter<S>*>& params) : config(cfg) {
  for (const Parameter<S>* p : params) {
    names.push_back(p->name);
    m.push_back(Tensor<S>::zeros(p->value.shape()));
    v.push_back(Tensor<S>::zeros(p->value.shape()));
  }
}

template <typename S>
void adamw_step(const std::vector<Parameter<S>*>& params, OptimizerState<S>& state) {
  if (params.size() != state.m.size()) {
    throw ShapeError("adamw_step: " + std::to_string(params.size()) + " parameters but optimizer tracks " +
                     std::to_string(state.m.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Parameter<S>& p = *params[i];
    if (p.value.shape() != state.m[i].shape() || p.grad.shape() != p.value.shape()) {
      throw ShapeError("adamw_step: shape mismatch for " + p.name + ": value " + shape_str(p.value.shape()) + ", grad " +
                       shape_str(p.grad.shape()) + ", moments " + shape_str(state.m[i].shape()));
    }
    for (S g : p.grad.values()) {
      if (!std::isfinite(double(g))) throw NumericError("adamw_step: non-finite gradient in " + p.name);
    }
  }
  const OptimizerConfig& c = state.config;
  state.step += 1;
  const double t = double(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  const S b1 = S(c.beta1), b2 = S(c.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter<S>& p = *params[i];
    S* w = p.value.data();
    const S* g = p.grad.data();
    S* m = state.m[i].data();
    S* v = state.v[i].data();
    for (Index j = 0; j < p.value.numel(); ++j) {
      m[j] = b1 * m[j] + (S(1) - b1) * g[j];
      v[j] = b2 * v[j] + (S(1) - b2) * g[j] * g[j];
      const double mhat = double(m[j]) / bc1;
      const double vhat = double(v[j]) / bc2;
      w[j] = S(double(w[j]) - c.lr * (mhat / (std::sqrt(vhat) + c.eps) + c.weight_decay * double(w[j])));
    }
  }
}

template <typename S>
double clip_global_norm(const std::vector<Parameter<S>*>& params, double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("clip_global_norm: max_norm must be > 0");
  double sq = 0.0;
  for (const Parameter<S>* p : params)
    for (S g : p->grad.values()) sq += double(g) * double(g);
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const S factor = S(max_norm / norm);
    for (Parameter<S>* p : params) p->grad.vector() *= factor;
  }
  return norm;
}

std::string format_decimal(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace {

void append_optional(std::string& out, const std::optional<double>& v) {
  out.push_back(',');
  if (v) out += format_decimal(*v);
}

}  // namespace

std::string format_metrics_row(const MetricsRecord& r) {
  std::string out = std::to_string(r.epoch) + "," + std::to_string(r.step);
  const LossBreakdown* b = r.loss ? &*r.loss : nullptr;
  append_optional(out, b ? std::optional<double>(b->total) : std::nullopt);
  append_optional(out, b ? b->sim : std::nullopt);
  append_optional(out, b ? b->decorr : std::nullopt);
  append_optional(out, b ? b->decorr_on : std::nullopt);
  append_optional(out, b ? b->decorr_off : std::nullopt);
  append_optional(out, b ? b->contrastive : std::nullopt);
  append_optional(out, b ? b->action : std::nullopt);
  append_optional(out, b ? b->recon : std::nullopt);
  out += "," + std::to_string(r.feat_rank);
  append_optional(out, r.cos_k1);
  append_optional(out, r.cos_k3);
  append_optional(out, r.cos_k5);
  append_optional(out, r.wall_secs);
  return out;
}

MetricsCsv::MetricsCsv(const std::filesystem::path& path, bool append) : path_(path) {
  const bool fresh = !append || !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  out_.open(path, append ? std::ios::app | std::ios::binary : std::ios::trunc | std::ios::binary);
  if (!out_) throw IoError("metrics: cannot open " + path.string() + " for writing");
  if (fresh) out_ << kMetricsHeader << '\n';
}

void MetricsCsv::write(const MetricsRecord& r) {
  out_ << format_metrics_row(r) << '\n';
  out_.flush();
  if (!out_) throw IoError("metrics: write failed for " + path_.string());
}

namespace {

ExperimentConfig resolved(const ExperimentConfig& in) {
  ExperimentConfig c = in;
  c.model.with_actions = c.mode == PretrainMode::Demo;
  c.validate();
  return c;
}

void check_dataset(const ExperimentConfig& c, const Dataset& ds) {
  const DatasetHeader& h = ds.header();
  if (int(h.channels) != c.model.channels || int(h.height) != c.model.height || int(h.width) != c.model.width) {
    throw ConfigError("pretrain: dataset frames are " + std::to_string(h.channels) + "x" + std::to_string(h.height) + "x" +
                      std::to_string(h.width) + " but the model expects " + std::to_string(c.model.channels) + "x" +
                      std::to_string(c.model.height) + "x" + std::to_string(c.model.width));
  }
  if (int(h.num_actions) > c.model.num_actions) throw ConfigError("pretrain: dataset has more actions than the model");
  if (int(h.trajectory_length) < c.seq_len) throw ConfigError("pretrain: seq_len exceeds the dataset trajectory length");
  if (h.trajectory_length <= 5) throw ConfigError("pretrain: diagnostics need trajectories longer than 5 steps");
}

}  // namespace

TrainState initialize(const ExperimentConfig& config) {
  const ExperimentConfig c = resolved(config);
  TrainState s;
  s.model = ModelBundle<float>(c.model, derive_seed(c.seed, "init"));
  s.optimizer = OptimizerState<float>(c.optim, s.model.parameters());
  return s;
}

MetricsRecord evaluate_diagnostics(const ExperimentConfig& config, const Dataset& dataset, ModelBundle<float>& model) {
  MetricsRecord r;
  Rng rank_rng = make_stream(config.seed, "heldout-rank");
  const Tensor<float> z = collect_projections(model, dataset, config.rank_samples, rank_rng);
  r.feat_rank = feature_rank(z, config.rank_epsilon).feature_rank;
  Rng cos_rng = make_stream(config.seed, "heldout-cosine");
  const std::vector<double> curve = cosine_curve(model, dataset, 5, config.cosine_pairs, cos_rng);
  r.cos_k1 = curve[0];
  r.cos_k3 = curve[2];
  r.cos_k5 = curve[4];
  return r;
}

std::optional<double> heldout_prediction_cosine(const ExperimentConfig& config, const Dataset& dataset,
                                                ModelBundle<float>& model, int windows) {
  if (config.mode == PretrainMode::Demo) return std::nullopt;
  Rng rng = make_stream(config.seed, "heldout-prediction");
  const TrajectoryBatch<float> batch = sample_batch<float>(dataset, windows, config.seq_len, rng);
  return prediction_cosine(model, batch, config.loss.k, derive_seed(config.seed, "heldout-masking"), config.mask_ratio);
}

void pretrain(const ExperimentConfig& config, const Dataset& dataset, TrainState& state, const MetricsSink& sink,
              const PretrainOptions& options) {
  const ExperimentConfig c = resolved(config);
  check_dataset(c, dataset);
  state.optimizer.config = c.optim;
  const std::vector<Parameter<float>*> params = state.model.parameters();
  const long total = c.total_steps();
  const long stop = options.stop_at ? std::min(*options.stop_at, total) : total;
  long step = long(state.optimizer.step);
  const auto started = std::chrono::steady_clock::now();

  auto emit = [&](MetricsRecord r, long at) {
    r.step = at;
    r.epoch = at / c.steps_per_epoch;
    if (!c.deterministic) r.wall_secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    if (sink) sink(r);
  };

  if (step == 0 && options.initial_record) emit(evaluate_diagnostics(c, dataset, state.model), 0);

  while (step < stop) {
    const auto context = [&] {
      return "epoch " + std::to_string(step / c.steps_per_epoch) + ", step " + std::to_string(step + 1) + ": ";
    };
    LossBreakdown breakdown;
    try {
      Rng data_rng = make_stream(c.seed, "data", std::uint64_t(step));
      Rng view1_rng = make_stream(c.seed, "augment-view-1", std::uint64_t(step));
      Rng view2_rng = make_stream(c.seed, "augment-view-2", std::uint64_t(step));
      Rng mask_rng = make_stream(c.seed, "masking", std::uint64_t(step));
      const TrajectoryBatch<float> batch = sample_batch<float>(dataset, c.batch_size, c.seq_len, data_rng);
      const AugmentedViews<float> views = make_views(batch.observations, c.augment, view1_rng, view2_rng);
      Tape<float> tape;
      LossResult<float> loss;
      if (c.mode == PretrainMode::Demo) {
        const DemoForward<float> f = forward_demo(state.model, tape, views.view1, views.view2, batch.actions, true);
        loss = total_loss(f, batch.actions, c.loss);
      } else {
        const StateForward<float> f = forward_state(state.model, tape, views.view1, views.view2, true, c.mask_ratio, &mask_rng);
        loss = total_loss(f, c.loss);
      }
      breakdown = loss.breakdown;
      if (!std::isfinite(breakdown.total)) throw NumericError("non-finite loss " + std::to_string(breakdown.total));
      for (Parameter<float>* p : params) p->zero_grad();
      tape.backward(loss.total);
      if (c.optim.max_grad_norm > 0.0) clip_global_norm(params, c.optim.max_grad_norm);
      adamw_step(params, state.optimizer);
    } catch (const NumericError& e) {
      throw NumericError(context() + e.what());
    } catch (const ConfigError& e) {
      throw ConfigError(context() + e.what());
    } catch (const ShapeError& e) {
      throw ShapeError(context() + e.what());
    }
    ++step;
    if (step % c.log_every == 0 || step == total) {
      MetricsRecord r = evaluate_diagnostics(c, dataset, state.model);
      r.loss = breakdown;
      emit(r, step);
    }
    if (c.checkpoint_every > 0 && step % c.checkpoint_every == 0 && !options.checkpoint_dir.empty()) {
      save_checkpoint(options.checkpoint_dir / ("step_" + std::to_string(step) + ".ckpt"), c, state);
    }
  }
}

// Checkpoint format:
//   "STPRCKPT" | u32 version | u64 json length | json | u64 optimizer step |
//   u32 tensor count | tensors... | u32 crc32 of all preceding bytes
// tensor: u32 name length | name | u32 rank | u64 dims[rank] | f32 payload

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kCheckpointMagic[8] = {'S', 'T', 'P', 'R', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void floats(float* dst, std::size_t n) {
    need(n * sizeof(float));
    std::memcpy(dst, bytes_.data() + pos_, n * sizeof(float));
    pos_ += n * sizeof(float);
  }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) {
      throw FormatError(FormatError::Kind::TruncatedPayload, "checkpoint: truncated at byte " + std::to_string(pos_) +
                                                                 " (need " + std::to_string(n) + " more, " +
                                                                 std::to_string(end_ - pos_) + " available)");
    }
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(const std::uint8_t* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in bounded chunks.
  while (n > 0) {
    const uInt chunk = uInt(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return std::uint32_t(crc);
}

std::vector<std::pair<std::string, Tensor<float>*>> named_tensors(TrainState& s) {
  std::vector<std::pair<std::string, Tensor<float>*>> out;
  for (Parameter<float>* p : s.model.parameters()) out.emplace_back(p->name, &p->value);
  for (auto& b : s.model.buffers()) out.push_back(b);
  for (std::size_t i = 0; i < s.optimizer.names.size(); ++i) {
    out.emplace_back("opt.m." + s.optimizer.names[i], &s.optimizer.m[i]);
    out.emplace_back("opt.v." + s.optimizer.names[i], &s.optimizer.v[i]);
  }
  return out;
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const ExperimentConfig& config, TrainState& state) {
  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  put(out, kCheckpointVersion);
  const std::string js = config.to_json().dump();
  put(out, std::uint64_t(js.size()));
  out.insert(out.end(), js.begin(), js.end());
  put(out, std::uint64_t(state.optimizer.step));
  const auto tensors = named_tensors(state);
  put(out, std::uint32_t(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put(out, std::uint32_t(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put(out, std::uint32_t(t->rank()));
    for (Index d : t->shape()) put(out, std::uint64_t(d));
    const auto* p = reinterpret_cast<const std::uint8_t*>(t->data());
    out.insert(out.end(), p, p + std::size_t(t->numel()) * sizeof(float));
  }
  put(out, crc_of(out.data(), out.size()));
  return out;
}

LoadedCheckpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < sizeof kCheckpointMagic) {
    throw FormatError(FormatError::Kind::TruncatedHeader, "checkpoint: file too short (" + std::to_string(bytes.size()) + " bytes)");
  }
  if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0) {
    throw FormatError(FormatError::Kind::BadMagic, "checkpoint: bad magic");
  }
  if (bytes.size() < sizeof kCheckpointMagic + 4 + 4) {
    throw FormatError(FormatError::Kind::TruncatedHeader, "checkpoint: truncated header");
  }
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + body, 4);
  if (crc_of(bytes.data(), body) != stored) throw FormatError(FormatError::Kind::CrcMismatch, "checkpoint: CRC mismatch");

  Reader r(bytes, body);
  r.string(sizeof kCheckpointMagic);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError(FormatError::Kind::Incompatible, "checkpoint: unsupported version " + std::to_string(version));
  }
  const auto js_len = r.get<std::uint64_t>();
  const nlohmann::json js = nlohmann::json::parse(r.string(std::size_t(js_len)), nullptr, false);
  if (js.is_discarded()) throw FormatError(FormatError::Kind::InvalidHeader, "checkpoint: config JSON does not parse");
  LoadedCheckpoint out;
  try {
    out.config = ExperimentConfig::from_json(js);
    out.state = initialize(out.config);
  } catch (const ConfigError& e) {
    throw FormatError(FormatError::Kind::Incompatible, std::string("checkpoint: embedded config rejected: ") + e.what());
  }
  out.state.optimizer.step = r.get<std::uint64_t>();
  auto slots = named_tensors(out.state);
  const auto count = r.get<std::uint32_t>();
  if (count != slots.size()) {
    throw FormatError(FormatError::Kind::Incompatible, "checkpoint: holds " + std::to_string(count) + " tensors, model needs " +
                                                           std::to_string(slots.size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.string(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(Index(r.get<std::uint64_t>()));
    auto it = std::find_if(slots.begin(), slots.end(), [&](const auto& s) { return s.first == name; });
    if (it == slots.end()) throw FormatError(FormatError::Kind::Incompatible, "checkpoint: unexpected tensor '" + name + "'");
    if (it->second->shape() != shape) {
      throw FormatError(FormatError::Kind::Incompatible, "checkpoint: tensor '" + name + "' has shape " + shape_str(shape) +
                                                             ", model expects " + shape_str(it->second->shape()));
    }
    r.floats(it->second->data(), std::size_t(it->second->numel()));
  }
  if (r.position() != body) throw FormatError(FormatError::Kind::SizeMismatch, "checkpoint: trailing bytes before CRC");
  for (Parameter<float>* p : out.state.model.parameters()) p->zero_grad();
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const ExperimentConfig& config, TrainState& state) {
  const std::vector<std::uint8_t> bytes = serialize_checkpoint(config, state);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("checkpoint: cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw IoError("checkpoint: write failed for " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const ExperimentConfig& expected) {
  LoadedCheckpoint c = load_checkpoint(path);
  nlohmann::json a = c.config.to_json(), b = expected.to_json();
  for (const auto& [key, value] : b.items()) {
    const bool arch = key.rfind("model.", 0) == 0 || key == "latent_dim" || key == "transition" || key == "projector_bn" ||
                      key == "predictor_bn" || key == "mode";
    if (arch && a[key] != value) {
      throw FormatError(FormatError::Kind::Incompatible,
                        "checkpoint: '" + key + "' is " + a[key].dump() + " in the checkpoint but " + value.dump() + " in the config");
    }
  }
  return c;
}

template struct OptimizerState<float>;
template struct OptimizerState<double>;
template void adamw_step(const std::vector<Parameter<float>*>&, OptimizerState<float>&);
template void adamw_step(const std::vector<Parameter<double>*>&, OptimizerState<double>&);
template double clip_global_norm(const std::vector<Parameter<float>*>&, double);
template double clip_global_norm(const std::vector<Parameter<double>*>&, double);

}  // namespace tpr

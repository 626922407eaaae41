#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tpr/config.hpp"
#include "tpr/diagnostics.hpp"
#include "tpr/losses.hpp"
#include "tpr/model.hpp"
#include "tpr/synthdata.hpp"

namespace tpr {

template <typename S>
struct OptimizerState {
  OptimizerConfig config;
  std::uint64_t step = 0;
  std::vector<std::string> names;
  std::vector<Tensor<S>> m;
  std::vector<Tensor<S>> v;

  OptimizerState() = default;
  OptimizerState(const OptimizerConfig& cfg, const std::vector<Parameter<S>*>& params);
};

/// One decoupled-weight-decay Adam update from each parameter's `grad`.
/// Throws NumericError naming the parameter on a non-finite gradient.
template <typename S>
void adamw_step(const std::vector<Parameter<S>*>& params, OptimizerState<S>& state);

/// Scales every gradient by max_norm / g when the global norm g exceeds
/// max_norm. Returns the norm before clipping.
template <typename S>
double clip_global_norm(const std::vector<Parameter<S>*>& params, double max_norm);

struct MetricsRecord {
  long epoch = 0;
  long step = 0;
  /// Absent for the initial record, which precedes any update.
  std::optional<LossBreakdown> loss;
  int feat_rank = 0;
  double cos_k1 = 0.0;
  double cos_k3 = 0.0;
  double cos_k5 = 0.0;
  std::optional<double> wall_secs;
};

inline constexpr const char* kMetricsHeader =
    "epoch,step,loss_total,loss_sim,loss_decorr,loss_decorr_on,loss_decorr_off,loss_contrastive,loss_action,loss_recon,"
    "feat_rank,cos_k1,cos_k3,cos_k5,wall_secs";

/// Shortest decimal that round-trips to `v`.
std::string format_decimal(double v);

/// One CSV line (no newline) with shortest round-trip decimals; inactive components are empty.
std::string format_metrics_row(const MetricsRecord& r);

class MetricsCsv {
 public:
  /// Writes the header unless appending to a non-empty file.
  MetricsCsv(const std::filesystem::path& path, bool append);
  void write(const MetricsRecord& r);

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

using MetricsSink = std::function<void(const MetricsRecord&)>;

struct TrainState {
  ModelBundle<float> model;
  OptimizerState<float> optimizer;
};

/// Fresh model and optimizer for a config (parameter init from the "init" stream).
TrainState initialize(const ExperimentConfig& config);

struct PretrainOptions {
  /// Directory for periodic checkpoints (`step_<n>.ckpt`); unused when checkpoint_every == 0.
  std::filesystem::path checkpoint_dir;
  /// Emit the step-0 diagnostic record (skipped automatically when resuming).
  bool initial_record = true;
  /// Stop after this global step instead of the configured total (for split runs).
  std::optional<long> stop_at;
};

/// Runs the configured number of steps on `state`, continuing from
/// state.optimizer.step. Records go to `sink` every log interval and at the
/// final step.
void pretrain(const ExperimentConfig& config, const Dataset& dataset, TrainState& state, const MetricsSink& sink,
              const PretrainOptions& options = {});

/// Held-out diagnostics at the current parameters (no gradient, eval mode).
MetricsRecord evaluate_diagnostics(const ExperimentConfig& config, const Dataset& dataset, ModelBundle<float>& model);

/// Mean cosine between predictions and their targets on held-out windows
/// (eval mode, no augmentation). Empty in demo mode, whose predictions
/// interleave with actions.
std::optional<double> heldout_prediction_cosine(const ExperimentConfig& config, const Dataset& dataset,
                                                ModelBundle<float>& model, int windows = 64);

/// Binary checkpoint: magic, version, canonical config JSON, every parameter,
/// batch-norm buffer and optimizer moment as (name, shape, f32 payload), CRC32.
void save_checkpoint(const std::filesystem::path& path, const ExperimentConfig& config, TrainState& state);

struct LoadedCheckpoint {
  ExperimentConfig config;
  TrainState state;
};

/// Throws FormatError (BadMagic, CrcMismatch, Truncated*, Incompatible) or IoError.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

/// Loads and checks that the architecture matches `expected`; throws FormatError(Incompatible) otherwise.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const ExperimentConfig& expected);

std::vector<std::uint8_t> serialize_checkpoint(const ExperimentConfig& config, TrainState& state);
LoadedCheckpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes);

}  // namespace tpr

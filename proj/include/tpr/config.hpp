#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "tpr/augment.hpp"
#include "tpr/losses.hpp"
#include "tpr/model.hpp"

namespace tpr {

enum class PretrainMode { State, Demo };

struct OptimizerConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1.5e-5;
  double weight_decay = 1e-6;
  /// Global gradient-norm cap; <= 0 disables clipping.
  double max_grad_norm = 0.5;
};

/// Every hyperparameter and variant switch of one pretraining run.
struct ExperimentConfig {
  PretrainMode mode = PretrainMode::State;
  ModelConfig model;
  LossConfig loss;
  OptimizerConfig optim;
  AugmentConfig augment;

  int batch_size = 8;  // sequences per batch (N)
  int seq_len = 10;    // states per sequence (T)
  double mask_ratio = 0.5;
  int epochs = 10;
  int steps_per_epoch = 100;
  std::uint64_t seed = 0;

  int log_every = 100;
  int checkpoint_every = 0;
  int rank_samples = 1000;
  double rank_epsilon = 0.01;
  int cosine_pairs = 256;
  bool deterministic = true;

  long total_steps() const { return long(epochs) * steps_per_epoch; }
  void validate() const;

  /// Flat object with dotted keys. Keys sort lexicographically, so dump() is canonical.
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);

  /// Applies `key=value`; the value is parsed as JSON when possible, else taken
  /// as a string. Unknown keys and type mismatches throw ConfigError.
  void set(const std::string& assignment);

  /// First 12 hex digits of SHA-256 over the canonical JSON.
  std::string hash() const;
};

const char* to_string(PretrainMode m);

/// Lowercase hex SHA-256 of a byte buffer.
std::string sha256_hex(const void* data, std::size_t size);

}  // namespace tpr

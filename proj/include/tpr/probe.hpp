#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tpr/model.hpp"
#include "tpr/synthdata.hpp"

namespace tpr {

enum class ProbeTask { Action, Reward };

const char* to_string(ProbeTask t);

struct ProbeSplit {
  /// [n, F] encoder features, standardized with train-split statistics.
  Tensor<double> train_features;
  Tensor<double> eval_features;
  std::vector<int> train_actions, eval_actions;
  std::vector<int> train_rewards, eval_rewards;
  std::vector<int> train_trajectories, eval_trajectories;
};

/// Trajectory i goes to the eval split iff i % 5 == 4 (a 4:1 split by trajectory).
bool is_eval_trajectory(int trajectory);

/// Frozen encoder outputs (evaluation mode, before the projector) for every
/// state of the dataset, split 4:1 by trajectory.
ProbeSplit extract_features(ModelBundle<float>& model, const Dataset& dataset);

struct ProbeConfig {
  /// Focal-loss focusing parameter; 0 gives plain cross-entropy.
  double gamma = 2.0;
  double lr = 0.2;
  int epochs = 50;
  int batch_size = 256;
  /// Multiply lr by lr_decay every lr_step epochs.
  int lr_step = 10;
  double lr_decay = 0.1;
  double weight_decay = 1e-6;
  std::uint64_t seed = 0;

  static ProbeConfig action_defaults();
  /// Logistic regression: full-batch gradient descent.
  static ProbeConfig reward_defaults();
};

struct LinearProbe {
  Tensor<double> weight;  // [F, classes]
  Tensor<double> bias;    // [classes]
  std::vector<int> predict(const Tensor<double>& features) const;
};

/// Mean softmax focal loss -(1 - p_y)^gamma log p_y over rows of logits [n, c].
double focal_loss(const Tensor<double>& logits, std::span<const int> labels, double gamma);

/// Softmax-focal probe for `classes` >= 2 labels. Throws ConfigError when the
/// training labels contain fewer than two classes.
LinearProbe fit_linear_probe(const Tensor<double>& features, std::span<const int> labels, int classes, const ProbeConfig& cfg);

/// Binary logistic probe; class 1 is the positive class. Returned as a
/// two-column probe so predict() applies uniformly.
LinearProbe fit_logistic_probe(const Tensor<double>& features, std::span<const int> labels, const ProbeConfig& cfg);

struct ProbeResult {
  ProbeTask task = ProbeTask::Action;
  /// Positive-class F1 (reward) or macro F1 over classes present in the labels (action).
  double f1 = 0.0;
  std::vector<double> per_class_f1;
  /// confusion[true][predicted].
  std::vector<std::vector<long>> confusion;
  long train_size = 0;
  long eval_size = 0;

  nlohmann::json to_json() const;
};

ProbeResult f1_report(std::span<const int> predictions, std::span<const int> labels, ProbeTask task, int classes);

struct ProbeSummary {
  ProbeResult action;
  ProbeResult reward;
  nlohmann::json to_json() const;
};

/// Extracts features, fits both probes and scores them on the eval split.
ProbeSummary run_probes(ModelBundle<float>& model, const Dataset& dataset, std::uint64_t seed);

}  // namespace tpr

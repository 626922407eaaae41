#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tpr/model.hpp"
#include "tpr/ops.hpp"

namespace tpr {

/// Which similarity-type objective is used and whether decorrelation is added.
enum class LossVariant { None, Decorrelation, Contrastive, ContrastiveDecorrelation };

const char* to_string(LossVariant v);
LossVariant parse_loss_variant(const std::string& name);

struct LossConfig {
  LossVariant variant = LossVariant::Decorrelation;
  /// Weight of the off-diagonal correlation penalty.
  double lambda_o = 0.005;
  /// Weight of the decorrelation term in the total.
  double lambda_d = 0.01;
  /// Weight of the action term (demonstration mode only).
  double lambda_a = 1.0;
  double temperature = 0.1;
  /// Prediction horizon in steps.
  int k = 1;
  /// Floor on the per-column std inside cross_correlation.
  double std_floor = 1e-8;

  bool uses_contrastive() const {
    return variant == LossVariant::Contrastive || variant == LossVariant::ContrastiveDecorrelation;
  }
  bool uses_decorrelation() const {
    return (variant == LossVariant::Decorrelation || variant == LossVariant::ContrastiveDecorrelation) && lambda_d != 0.0;
  }
  void validate() const;
};

/// Plain-number view of one loss evaluation. Absent fields were not part of the objective.
struct LossBreakdown {
  double total = 0.0;
  std::optional<double> sim;
  std::optional<double> decorr;
  std::optional<double> decorr_on;
  std::optional<double> decorr_off;
  std::optional<double> contrastive;
  std::optional<double> action;
  std::optional<double> recon;
  double lambda_o = 0.0;
  double lambda_d = 0.0;
  double lambda_a = 0.0;
  double temperature = 0.0;
};

template <typename S>
struct LossResult {
  Var<S> total;
  LossBreakdown breakdown;
};

/// Mean over (n, t <= T - k) of ||q[n,t] - z[n,t+k]||^2 for q, z [N, T, d].
template <typename S>
Var<S> similarity_distance(const Var<S>& q, const Var<S>& z, int k);

/// 0.5 * D(q1, sg(z2)) + 0.5 * D(q2, sg(z1)).
template <typename S>
Var<S> similarity_loss(const Var<S>& q1, const Var<S>& q2, const Var<S>& z1, const Var<S>& z2, int k);

/// Pearson cross-correlation [d, d] between the columns of z1 and z2 [M, d].
/// Columns are centred and divided by their population std (floored).
template <typename S>
Var<S> cross_correlation(const Var<S>& z1, const Var<S>& z2, S std_floor = S(1e-8));

template <typename S>
struct DecorrelationTerms {
  Var<S> total;  // on + lambda_o * off
  Var<S> on;     // sum_i (1 - C_ii)^2
  Var<S> off;    // sum_{i != j} C_ij^2
};

template <typename S>
DecorrelationTerms<S> decorrelation_loss(const Var<S>& c, S lambda_o);

/// One-sided InfoNCE over rows of q, z [M, d]: row m of z is the positive for
/// row m of q, every other row a negative.
template <typename S>
Var<S> contrastive_loss(const Var<S>& q, const Var<S>& z, S temperature);

/// Both view directions of contrastive_loss on the k-shifted, flattened
/// sequences, with stop-gradient targets.
template <typename S>
Var<S> symmetric_contrastive_loss(const Var<S>& q1, const Var<S>& q2, const Var<S>& z1, const Var<S>& z2, int k,
                                  S temperature);

/// Mean negative log-likelihood of `actions` (N*T row-major) under logits [N, T, n_a].
template <typename S>
Var<S> action_loss(const Var<S>& logits, std::span<const int> actions);

/// Mean squared distance between q and z [N, T, d] over the masked (n, t) positions.
template <typename S>
Var<S> recon_loss(const Var<S>& q, const Var<S>& z, const std::vector<std::vector<int>>& masked);

/// Objective for the state pipeline. When the forward pass carries mask
/// positions (non-causal transition) reconstruction replaces similarity.
template <typename S>
LossResult<S> total_loss(const StateForward<S>& f, const LossConfig& cfg);

/// Objective for the demonstration pipeline: state objective plus the
/// view-averaged action term.
template <typename S>
LossResult<S> total_loss(const DemoForward<S>& f, std::span<const int> actions, const LossConfig& cfg);

}  // namespace tpr

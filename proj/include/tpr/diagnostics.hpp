#pragma once

#include <filesystem>
#include <vector>

#include "tpr/linalg.hpp"
#include "tpr/losses.hpp"
#include "tpr/model.hpp"
#include "tpr/synthdata.hpp"

namespace tpr {

struct RankReport {
  int feature_rank = 0;
  /// Descending, non-negative.
  std::vector<double> singular_values;
  Index n_samples = 0;
  double epsilon = 0.0;
};

/// Counts singular values of Z [n, d] strictly above epsilon.
template <typename Derived>
RankReport feature_rank(const Eigen::MatrixBase<Derived>& z, double epsilon = 0.01, const JacobiOptions& opt = {}) {
  RankReport r;
  r.singular_values = singular_values(z, opt);
  r.n_samples = z.rows();
  r.epsilon = epsilon;
  for (double s : r.singular_values) r.feature_rank += s > epsilon ? 1 : 0;
  return r;
}

template <typename S>
RankReport feature_rank(const Tensor<S>& z, double epsilon = 0.01) {
  if (z.rank() != 2) throw ShapeError("feature_rank: expected [n, d], got " + shape_str(z.shape()));
  return feature_rank(z.matrix(), epsilon);
}

/// n independent draws: uniform trajectory, then uniform time step.
std::vector<std::pair<int, int>> sample_states(const Dataset& dataset, int n, Rng& rng);

/// Encoder + projector outputs [n, d] for the given states in evaluation mode.
/// Rows are l2-normalized when `normalized` is set.
template <typename S>
Tensor<S> embed_states(ModelBundle<S>& m, const Dataset& dataset, const std::vector<std::pair<int, int>>& states,
                       bool normalized = false);

/// Encoder outputs [n, F] (before the projector) in evaluation mode.
template <typename S>
Tensor<S> encode_states(ModelBundle<S>& m, const Dataset& dataset, const std::vector<std::pair<int, int>>& states);

template <typename S>
Tensor<S> collect_projections(ModelBundle<S>& m, const Dataset& dataset, int n, Rng& rng, bool normalized = false) {
  return embed_states(m, dataset, sample_states(dataset, n, rng), normalized);
}

/// Entry k-1 is the mean cos(z_t, z_{t+k}) for k = 1..k_max. With n_pairs > 0,
/// n_pairs anchors (trajectory, t <= L-1-k_max) are drawn and shared across k;
/// with n_pairs <= 0 every valid (trajectory, t) pair is enumerated per k.
template <typename S>
std::vector<double> cosine_curve(ModelBundle<S>& m, const Dataset& dataset, int k_max, int n_pairs, Rng& rng);

struct CorrStats {
  double mean_abs_off = 0.0;
  double mean_on = 0.0;
  double max_abs_off = 0.0;
};

CorrStats corr_stats(const Eigen::MatrixXd& c);

/// Cross-correlation of two views' normalized projections in evaluation mode.
template <typename S>
Eigen::MatrixXd view_correlation(ModelBundle<S>& m, const Tensor<S>& view1, const Tensor<S>& view2);

/// Mean cosine between predictions and the k-step-ahead projections of the
/// same (unaugmented) windows, in evaluation mode.
template <typename S>
double prediction_cosine(ModelBundle<S>& m, const TrajectoryBatch<S>& batch, int k, std::uint64_t mask_seed = 0,
                         double mask_ratio = 0.5);

/// CSV with header dim_0..dim_{d-1},label; shortest round-trip decimals.
template <typename S>
void export_embeddings(const Tensor<S>& z, const std::vector<int>& labels, const std::filesystem::path& path);

struct EmbeddingTable {
  Tensor<double> z;
  std::vector<int> labels;
};

EmbeddingTable import_embeddings(const std::filesystem::path& path);

}  // namespace tpr

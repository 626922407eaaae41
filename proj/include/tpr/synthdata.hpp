#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tpr/rng.hpp"
#include "tpr/tensor.hpp"

namespace tpr {

// Moving-dot gridworld. A single bright dot walks an H x W grid; walls
// reflect; entering the goal cell yields reward 1 and the dot respawns at a
// random non-goal cell on the following step. The goal cell is drawn as a
// dim marker so that relative position survives random shifts.

enum Action : int { kNoop = 0, kUp = 1, kDown = 2, kLeft = 3, kRight = 4 };
inline constexpr int kNumActions = 5;

inline constexpr std::uint8_t kDotPixel = 255;
inline constexpr std::uint8_t kGoalPixel = 128;

struct GridworldConfig {
  int height = 16;
  int width = 16;
  /// Frame stack depth; channel c shows frame t - (channels - 1 - c).
  int channels = 1;
  /// Negative means the grid centre.
  int goal_row = -1;
  int goal_col = -1;
  double epsilon = 0.3;

  void validate() const;
  std::pair<int, int> goal() const;
};

struct Cell {
  int row = 0;
  int col = 0;
  bool operator==(const Cell&) const = default;
};

/// One simulated trajectory before rendering.
struct Rollout {
  std::vector<Cell> positions;
  std::vector<int> actions;
  std::vector<std::uint8_t> rewards;
};

class Gridworld {
 public:
  explicit Gridworld(GridworldConfig config);

  const GridworldConfig& config() const noexcept { return config_; }
  Cell goal() const noexcept { return goal_; }

  /// Greedy move toward the goal along the axis with the larger distance
  /// (vertical on ties); no-op on the goal.
  int greedy_action(Cell pos) const;
  /// Applies a move with reflecting walls (no respawn logic).
  Cell move(Cell pos, int action) const;
  Cell respawn(Rng& rng) const;

  /// Simulates `length` steps. reward[t] = 1 iff the dot entered the goal at
  /// step t; the observation at t shows the dot on the goal, and the dot
  /// respawns at t + 1 whatever the action.
  Rollout simulate(Rng& rng, int length, std::optional<Cell> start = std::nullopt) const;

  /// Renders frame `t` of a rollout as channels x H x W bytes.
  void render(const Rollout& rollout, int t, std::uint8_t* out) const;

 private:
  GridworldConfig config_;
  Cell goal_;
};

inline constexpr std::array<char, 5> kDatasetMagic{'S', 'T', 'P', 'R', '1'};
inline constexpr std::uint32_t kEnvMovingDot = 1;
/// magic(5) + 6 x u32 + u64 seed + u32 env kind.
inline constexpr std::size_t kDatasetHeaderBytes = 5 + 6 * 4 + 8 + 4;

struct DatasetHeader {
  std::uint32_t num_trajectories = 0;
  std::uint32_t trajectory_length = 0;
  std::uint32_t channels = 0;
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint32_t num_actions = 0;
  std::uint64_t seed = 0;
  std::uint32_t env_kind = kEnvMovingDot;

  std::size_t frame_bytes() const { return std::size_t(channels) * height * width; }
  std::size_t steps() const { return std::size_t(num_trajectories) * trajectory_length; }
  std::size_t payload_bytes() const { return steps() * frame_bytes() + 2 * steps(); }

  bool operator==(const DatasetHeader&) const = default;
};

/// In-memory dataset: observations as bytes (pixel = byte / 255), actions
/// and binary rewards per step. Read-only after construction.
class Dataset {
 public:
  Dataset() = default;
  Dataset(DatasetHeader header, std::vector<std::uint8_t> observations, std::vector<std::uint8_t> actions,
          std::vector<std::uint8_t> rewards);

  const DatasetHeader& header() const noexcept { return header_; }
  int num_trajectories() const { return int(header_.num_trajectories); }
  int trajectory_length() const { return int(header_.trajectory_length); }

  const std::uint8_t* frame(int trajectory, int t) const;
  int action(int trajectory, int t) const;
  int reward(int trajectory, int t) const;

  const std::vector<std::uint8_t>& observations() const noexcept { return observations_; }
  const std::vector<std::uint8_t>& actions() const noexcept { return actions_; }
  const std::vector<std::uint8_t>& rewards() const noexcept { return rewards_; }

  /// Frames [trajectory, t] for each (trajectory, t) pair, as a [n, C, H, W] tensor in [0, 1].
  template <typename S>
  Tensor<S> frames(const std::vector<std::pair<int, int>>& states) const;

 private:
  std::size_t step_index(int trajectory, int t) const;

  DatasetHeader header_;
  std::vector<std::uint8_t> observations_;
  std::vector<std::uint8_t> actions_;
  std::vector<std::uint8_t> rewards_;
};

/// Deterministic in (config, seed, sizes). Trajectory i uses the stream seeded by seed ^ i.
Dataset generate_dataset(const GridworldConfig& config, std::uint64_t seed, int num_trajectories, int trajectory_length);

std::vector<std::uint8_t> serialize_dataset(const Dataset& dataset);
/// Throws FormatError (BadMagic, TruncatedHeader, TruncatedPayload, SizeMismatch, InvalidHeader).
Dataset parse_dataset(const std::vector<std::uint8_t>& bytes);

void save_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

template <typename S>
struct TrajectoryBatch {
  /// [N, T, C, H, W], values in [0, 1].
  Tensor<S> observations;
  /// [N * T] row-major.
  std::vector<int> actions;
  std::vector<std::uint8_t> rewards;
  /// (trajectory, start offset) per sequence.
  std::vector<std::pair<int, int>> windows;
  int n = 0;
  int t = 0;
};

/// Uniform trajectory, then uniform start offset in [0, length - T].
std::vector<std::pair<int, int>> sample_windows(const Dataset& dataset, int n, int t, Rng& rng);

template <typename S>
TrajectoryBatch<S> gather_batch(const Dataset& dataset, const std::vector<std::pair<int, int>>& windows, int t);

template <typename S>
TrajectoryBatch<S> sample_batch(const Dataset& dataset, int n, int t, Rng& rng) {
  return gather_batch<S>(dataset, sample_windows(dataset, n, t, rng), t);
}

}  // namespace tpr

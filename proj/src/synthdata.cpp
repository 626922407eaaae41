#include "tpr/synthdata.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iterator>

#include "tpr/error.hpp"

namespace tpr {

void GridworldConfig::validate() const {
  if (height < 4 || width < 4) throw ConfigError("gridworld: grid must be at least 4x4");
  if (channels < 1) throw ConfigError("gridworld: channels must be >= 1");
  if (epsilon < 0.0 || epsilon > 1.0) throw ConfigError("gridworld: epsilon must lie in [0, 1]");
  const auto [r, c] = goal();
  if (r < 0 || r >= height || c < 0 || c >= width) throw ConfigError("gridworld: goal outside the grid");
}

std::pair<int, int> GridworldConfig::goal() const {
  return {goal_row < 0 ? height / 2 : goal_row, goal_col < 0 ? width / 2 : goal_col};
}

Gridworld::Gridworld(GridworldConfig config) : config_(config) {
  config_.validate();
  const auto [r, c] = config_.goal();
  goal_ = {r, c};
}

int Gridworld::greedy_action(Cell pos) const {
  const int dr = goal_.row - pos.row;
  const int dc = goal_.col - pos.col;
  if (dr == 0 && dc == 0) return kNoop;
  if (std::abs(dr) >= std::abs(dc)) return dr < 0 ? kUp : kDown;
  return dc < 0 ? kLeft : kRight;
}

namespace {

int reflect(int x, int n) {
  if (x < 0) return -x;
  if (x >= n) return 2 * (n - 1) - x;
  return x;
}

}  // namespace

Cell Gridworld::move(Cell pos, int action) const {
  switch (action) {
    case kUp: pos.row -= 1; break;
    case kDown: pos.row += 1; break;
    case kLeft: pos.col -= 1; break;
    case kRight: pos.col += 1; break;
    default: break;
  }
  return {reflect(pos.row, config_.height), reflect(pos.col, config_.width)};
}

Cell Gridworld::respawn(Rng& rng) const {
  const int cells = config_.height * config_.width;
  const int goal_index = goal_.row * config_.width + goal_.col;
  int k = int(rng.uniform_index(std::uint64_t(cells - 1)));
  if (k >= goal_index) ++k;
  return {k / config_.width, k % config_.width};
}

Rollout Gridworld::simulate(Rng& rng, int length, std::optional<Cell> start) const {
  Rollout r;
  Cell pos = start ? *start : respawn(rng);
  r.rewards.push_back(0);
  for (int t = 0; t < length; ++t) {
    r.positions.push_back(pos);
    int action = greedy_action(pos);
    if (rng.bernoulli(config_.epsilon)) action = int(rng.uniform_index(kNumActions));
    r.actions.push_back(action);
    if (t + 1 == length) break;
    if (pos == goal_) {
      pos = respawn(rng);
      r.rewards.push_back(0);
    } else {
      pos = move(pos, action);
      r.rewards.push_back(pos == goal_ ? 1 : 0);
    }
  }
  return r;
}

void Gridworld::render(const Rollout& rollout, int t, std::uint8_t* out) const {
  const int hw = config_.height * config_.width;
  for (int c = 0; c < config_.channels; ++c) {
    const int src = std::max(0, t - (config_.channels - 1 - c));
    std::uint8_t* img = out + c * hw;
    std::fill(img, img + hw, std::uint8_t(0));
    img[goal_.row * config_.width + goal_.col] = kGoalPixel;
    const Cell p = rollout.positions[std::size_t(src)];
    img[p.row * config_.width + p.col] = kDotPixel;
  }
}

Dataset::Dataset(DatasetHeader header, std::vector<std::uint8_t> observations, std::vector<std::uint8_t> actions,
                 std::vector<std::uint8_t> rewards)
    : header_(header), observations_(std::move(observations)), actions_(std::move(actions)), rewards_(std::move(rewards)) {
  if (observations_.size() != header_.steps() * header_.frame_bytes() || actions_.size() != header_.steps() ||
      rewards_.size() != header_.steps()) {
    throw FormatError(FormatError::Kind::SizeMismatch, "dataset: array sizes do not match header");
  }
}

std::size_t Dataset::step_index(int trajectory, int t) const {
  if (trajectory < 0 || trajectory >= num_trajectories() || t < 0 || t >= trajectory_length()) {
    throw ShapeError("dataset: index (" + std::to_string(trajectory) + ", " + std::to_string(t) + ") out of range");
  }
  return std::size_t(trajectory) * header_.trajectory_length + std::size_t(t);
}

const std::uint8_t* Dataset::frame(int trajectory, int t) const {
  return observations_.data() + step_index(trajectory, t) * header_.frame_bytes();
}

int Dataset::action(int trajectory, int t) const { return actions_[step_index(trajectory, t)]; }

int Dataset::reward(int trajectory, int t) const { return rewards_[step_index(trajectory, t)]; }

template <typename S>
Tensor<S> Dataset::frames(const std::vector<std::pair<int, int>>& states) const {
  const std::size_t fb = header_.frame_bytes();
  Tensor<S> out({Index(states.size()), Index(header_.channels), Index(header_.height), Index(header_.width)});
  for (std::size_t i = 0; i < states.size(); ++i) {
    const std::uint8_t* src = frame(states[i].first, states[i].second);
    S* dst = out.data() + i * fb;
    for (std::size_t k = 0; k < fb; ++k) dst[k] = S(src[k]) / S(255);
  }
  return out;
}

template Tensor<float> Dataset::frames<float>(const std::vector<std::pair<int, int>>&) const;
template Tensor<double> Dataset::frames<double>(const std::vector<std::pair<int, int>>&) const;

Dataset generate_dataset(const GridworldConfig& config, std::uint64_t seed, int num_trajectories, int trajectory_length) {
  if (num_trajectories < 1) throw ConfigError("gen-data: need at least one trajectory");
  if (trajectory_length < 2) throw ConfigError("gen-data: trajectory length must be >= 2");
  const Gridworld env(config);
  DatasetHeader h;
  h.num_trajectories = std::uint32_t(num_trajectories);
  h.trajectory_length = std::uint32_t(trajectory_length);
  h.channels = std::uint32_t(config.channels);
  h.height = std::uint32_t(config.height);
  h.width = std::uint32_t(config.width);
  h.num_actions = kNumActions;
  h.seed = seed;
  std::vector<std::uint8_t> obs(h.steps() * h.frame_bytes());
  std::vector<std::uint8_t> actions(h.steps());
  std::vector<std::uint8_t> rewards(h.steps());
  for (int i = 0; i < num_trajectories; ++i) {
    Rng rng(mix64(seed ^ std::uint64_t(i)));
    const Rollout r = env.simulate(rng, trajectory_length);
    for (int t = 0; t < trajectory_length; ++t) {
      const std::size_t k = std::size_t(i) * h.trajectory_length + std::size_t(t);
      env.render(r, t, obs.data() + k * h.frame_bytes());
      actions[k] = std::uint8_t(r.actions[std::size_t(t)]);
      rewards[k] = r.rewards[std::size_t(t)];
    }
  }
  return Dataset(h, std::move(obs), std::move(actions), std::move(rewards));
}

namespace {

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(std::uint8_t((std::uint64_t(v) >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= std::uint64_t(p[i]) << (8 * i);
  return T(v);
}

}  // namespace

std::vector<std::uint8_t> serialize_dataset(const Dataset& d) {
  const DatasetHeader& h = d.header();
  std::vector<std::uint8_t> out(kDatasetMagic.begin(), kDatasetMagic.end());
  out.reserve(kDatasetHeaderBytes + h.payload_bytes());
  put_le(out, h.num_trajectories);
  put_le(out, h.trajectory_length);
  put_le(out, h.channels);
  put_le(out, h.height);
  put_le(out, h.width);
  put_le(out, h.num_actions);
  put_le(out, h.seed);
  put_le(out, h.env_kind);
  out.insert(out.end(), d.observations().begin(), d.observations().end());
  out.insert(out.end(), d.actions().begin(), d.actions().end());
  out.insert(out.end(), d.rewards().begin(), d.rewards().end());
  return out;
}

Dataset parse_dataset(const std::vector<std::uint8_t>& bytes) {
  using Kind = FormatError::Kind;
  const std::size_t magic_n = kDatasetMagic.size();
  if (bytes.size() >= magic_n && !std::equal(kDatasetMagic.begin(), kDatasetMagic.end(), bytes.begin())) {
    throw FormatError(Kind::BadMagic, "dataset: bad magic (expected STPR1)");
  }
  if (bytes.size() < kDatasetHeaderBytes) {
    throw FormatError(Kind::TruncatedHeader, "dataset: truncated header (" + std::to_string(bytes.size()) + " of " +
                                                 std::to_string(kDatasetHeaderBytes) + " bytes)");
  }
  const std::uint8_t* p = bytes.data() + magic_n;
  DatasetHeader h;
  h.num_trajectories = get_le<std::uint32_t>(p);
  h.trajectory_length = get_le<std::uint32_t>(p + 4);
  h.channels = get_le<std::uint32_t>(p + 8);
  h.height = get_le<std::uint32_t>(p + 12);
  h.width = get_le<std::uint32_t>(p + 16);
  h.num_actions = get_le<std::uint32_t>(p + 20);
  h.seed = get_le<std::uint64_t>(p + 24);
  h.env_kind = get_le<std::uint32_t>(p + 32);
  if (h.num_trajectories == 0 || h.trajectory_length == 0 || h.channels == 0 || h.height == 0 || h.width == 0 ||
      h.num_actions == 0 || h.num_actions > 255) {
    throw FormatError(Kind::InvalidHeader, "dataset: header has zero-sized or out-of-range fields");
  }
  const std::size_t expected = h.payload_bytes();
  const std::size_t actual = bytes.size() - kDatasetHeaderBytes;
  if (actual < expected) {
    throw FormatError(Kind::TruncatedPayload, "dataset: truncated payload, expected " + std::to_string(expected) +
                                                  " bytes, got " + std::to_string(actual));
  }
  if (actual > expected) {
    throw FormatError(Kind::SizeMismatch, "dataset: header/payload mismatch, expected " + std::to_string(expected) +
                                              " payload bytes, found " + std::to_string(actual));
  }
  auto it = bytes.begin() + std::ptrdiff_t(kDatasetHeaderBytes);
  const auto obs_n = std::ptrdiff_t(h.steps() * h.frame_bytes());
  const auto steps = std::ptrdiff_t(h.steps());
  std::vector<std::uint8_t> obs(it, it + obs_n);
  std::vector<std::uint8_t> actions(it + obs_n, it + obs_n + steps);
  std::vector<std::uint8_t> rewards(it + obs_n + steps, it + obs_n + 2 * steps);
  for (auto a : actions) {
    if (a >= h.num_actions) throw FormatError(Kind::InvalidHeader, "dataset: action index out of range");
  }
  for (auto r : rewards) {
    if (r > 1) throw FormatError(Kind::InvalidHeader, "dataset: reward is not binary");
  }
  return Dataset(h, std::move(obs), std::move(actions), std::move(rewards));
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  const auto bytes = serialize_dataset(dataset);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!f) throw IoError("failed writing " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_dataset(bytes);
}

std::vector<std::pair<int, int>> sample_windows(const Dataset& dataset, int n, int t, Rng& rng) {
  if (n < 1) throw ConfigError("sample_batch: N must be >= 1");
  if (t < 1 || t > dataset.trajectory_length()) {
    throw ConfigError("sample_batch: sequence length " + std::to_string(t) + " exceeds trajectory length " +
                      std::to_string(dataset.trajectory_length()));
  }
  std::vector<std::pair<int, int>> windows;
  windows.reserve(std::size_t(n));
  const auto offsets = std::uint64_t(dataset.trajectory_length() - t + 1);
  for (int i = 0; i < n; ++i) {
    const int traj = int(rng.uniform_index(std::uint64_t(dataset.num_trajectories())));
    const int start = int(rng.uniform_index(offsets));
    windows.emplace_back(traj, start);
  }
  return windows;
}

template <typename S>
TrajectoryBatch<S> gather_batch(const Dataset& dataset, const std::vector<std::pair<int, int>>& windows, int t) {
  const DatasetHeader& h = dataset.header();
  TrajectoryBatch<S> b;
  b.n = int(windows.size());
  b.t = t;
  b.windows = windows;
  std::vector<std::pair<int, int>> states;
  states.reserve(windows.size() * std::size_t(t));
  for (const auto& [traj, start] : windows) {
    for (int k = 0; k < t; ++k) {
      states.emplace_back(traj, start + k);
      b.actions.push_back(dataset.action(traj, start + k));
      b.rewards.push_back(std::uint8_t(dataset.reward(traj, start + k)));
    }
  }
  b.observations = dataset.frames<S>(states).reshaped(
      {Index(b.n), Index(t), Index(h.channels), Index(h.height), Index(h.width)});
  return b;
}

template TrajectoryBatch<float> gather_batch<float>(const Dataset&, const std::vector<std::pair<int, int>>&, int);
template TrajectoryBatch<double> gather_batch<double>(const Dataset&, const std::vector<std::pair<int, int>>&, int);

}  // namespace tpr

#include "tpr/diagnostics.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace tpr {

namespace {

constexpr std::size_t kChunk = 256;

template <typename S>
Tensor<S> run_chunked(ModelBundle<S>& m, const Dataset& dataset, const std::vector<std::pair<int, int>>& states,
                      bool project_rows, bool normalized) {
  const ModelConfig& c = m.config();
  const Index width = project_rows ? c.latent_dim : c.feature_dim();
  Tensor<S> out(Shape{Index(states.size()), width});
  for (std::size_t start = 0; start < states.size(); start += kChunk) {
    const std::size_t stop = std::min(states.size(), start + kChunk);
    std::vector<std::pair<int, int>> part(states.begin() + std::ptrdiff_t(start), states.begin() + std::ptrdiff_t(stop));
    Tensor<S> frames = dataset.frames<S>(part);
    const Index n = Index(part.size());
    Tape<S> tape;
    Var<S> x = tape.constant(frames.reshaped(Shape{n, 1, frames.dim(1), frames.dim(2), frames.dim(3)}));
    Var<S> y = encode(m, tape, x);
    if (project_rows) y = project(m, tape, y, false);
    if (normalized) y = l2_normalize(y);
    const Tensor<S>& v = y.value();
    std::copy(v.data(), v.data() + v.numel(), out.data() + Index(start) * width);
  }
  return out;
}

double row_cosine(const double* a, const double* b, Index d) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (Index i = 0; i < d; ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / (std::max(std::sqrt(na), 1e-12) * std::max(std::sqrt(nb), 1e-12));
}

}  // namespace

std::vector<std::pair<int, int>> sample_states(const Dataset& dataset, int n, Rng& rng) {
  if (dataset.num_trajectories() < 1) throw ConfigError("sample_states: empty dataset");
  if (n < 1) throw ConfigError("sample_states: n must be >= 1");
  std::vector<std::pair<int, int>> out(static_cast<std::size_t>(n));
  for (auto& s : out) {
    s.first = int(rng.uniform_index(std::uint64_t(dataset.num_trajectories())));
    s.second = int(rng.uniform_index(std::uint64_t(dataset.trajectory_length())));
  }
  return out;
}

template <typename S>
Tensor<S> embed_states(ModelBundle<S>& m, const Dataset& dataset, const std::vector<std::pair<int, int>>& states,
                       bool normalized) {
  return run_chunked(m, dataset, states, true, normalized);
}

template <typename S>
Tensor<S> encode_states(ModelBundle<S>& m, const Dataset& dataset, const std::vector<std::pair<int, int>>& states) {
  return run_chunked(m, dataset, states, false, false);
}

template <typename S>
std::vector<double> cosine_curve(ModelBundle<S>& m, const Dataset& dataset, int k_max, int n_pairs, Rng& rng) {
  const int len = dataset.trajectory_length();
  if (k_max < 1 || k_max >= len) {
    throw ConfigError("cosine_curve: k_max = " + std::to_string(k_max) + " needs 1 <= k_max < trajectory length " +
                      std::to_string(len));
  }
  const Index d = m.config().latent_dim;
  std::vector<double> curve(static_cast<std::size_t>(k_max), 0.0);
  if (n_pairs <= 0) {
    // Exhaustive: every state of every trajectory.
    std::vector<std::pair<int, int>> states;
    for (int i = 0; i < dataset.num_trajectories(); ++i)
      for (int t = 0; t < len; ++t) states.emplace_back(i, t);
    const Tensor<double> z = embed_states(m, dataset, states).template cast<double>();
    for (int k = 1; k <= k_max; ++k) {
      double acc = 0.0;
      long count = 0;
      for (int i = 0; i < dataset.num_trajectories(); ++i) {
        for (int t = 0; t + k < len; ++t) {
          const Index a = Index(i) * len + t;
          acc += row_cosine(z.data() + a * d, z.data() + (a + k) * d, d);
          ++count;
        }
      }
      curve[std::size_t(k - 1)] = acc / double(count);
    }
    return curve;
  }
  std::vector<std::pair<int, int>> states;
  states.reserve(std::size_t(n_pairs) * std::size_t(k_max + 1));
  for (int p = 0; p < n_pairs; ++p) {
    const int traj = int(rng.uniform_index(std::uint64_t(dataset.num_trajectories())));
    const int t0 = int(rng.uniform_index(std::uint64_t(len - k_max)));
    for (int k = 0; k <= k_max; ++k) states.emplace_back(traj, t0 + k);
  }
  const Tensor<double> z = embed_states(m, dataset, states).template cast<double>();
  for (int p = 0; p < n_pairs; ++p) {
    const Index base = Index(p) * (k_max + 1);
    for (int k = 1; k <= k_max; ++k) curve[std::size_t(k - 1)] += row_cosine(z.data() + base * d, z.data() + (base + k) * d, d);
  }
  for (double& v : curve) v /= double(n_pairs);
  return curve;
}

CorrStats corr_stats(const Eigen::MatrixXd& c) {
  if (c.rows() != c.cols() || c.rows() < 1) throw ShapeError("corr_stats: expected a non-empty square matrix");
  const Index d = c.rows();
  CorrStats s;
  for (Index i = 0; i < d; ++i) {
    s.mean_on += c(i, i);
    for (Index j = 0; j < d; ++j) {
      if (i == j) continue;
      s.mean_abs_off += std::abs(c(i, j));
      s.max_abs_off = std::max(s.max_abs_off, std::abs(c(i, j)));
    }
  }
  s.mean_on /= double(d);
  if (d > 1) s.mean_abs_off /= double(d * (d - 1));
  return s;
}

template <typename S>
Eigen::MatrixXd view_correlation(ModelBundle<S>& m, const Tensor<S>& view1, const Tensor<S>& view2) {
  Tape<S> tape;
  auto z_of = [&](const Tensor<S>& v) {
    Var<S> z = l2_normalize(project(m, tape, encode(m, tape, tape.constant(v)), false));
    return reshape(z, Shape{z.numel() / z.dim(-1), z.dim(-1)});
  };
  const Tensor<S> c = cross_correlation(z_of(view1), z_of(view2)).value();
  return c.matrix().template cast<double>();
}

template <typename S>
double prediction_cosine(ModelBundle<S>& m, const TrajectoryBatch<S>& batch, int k, std::uint64_t mask_seed,
                         double mask_ratio) {
  Tape<S> tape;
  Rng mask_rng(mask_seed);
  StateForward<S> f = forward_state(m, tape, batch.observations, batch.observations, false, mask_ratio, &mask_rng);
  const Tensor<double> q = f.q1.value().template cast<double>();
  const Tensor<double> z = f.z1.value().template cast<double>();
  const Index n = q.dim(0), t = q.dim(1), d = q.dim(2);
  double acc = 0.0;
  long count = 0;
  if (!f.mask1.empty()) {
    for (Index i = 0; i < n; ++i) {
      for (int p : f.mask1[std::size_t(i)]) {
        acc += row_cosine(q.data() + (i * t + p) * d, z.data() + (i * t + p) * d, d);
        ++count;
      }
    }
  } else {
    if (k < 1 || k >= t) throw ConfigError("prediction_cosine: k must satisfy 1 <= k < T");
    for (Index i = 0; i < n; ++i) {
      for (Index s = 0; s + k < t; ++s) {
        acc += row_cosine(q.data() + (i * t + s) * d, z.data() + (i * t + s + k) * d, d);
        ++count;
      }
    }
  }
  return acc / double(count);
}

template <typename S>
void export_embeddings(const Tensor<S>& z, const std::vector<int>& labels, const std::filesystem::path& path) {
  if (z.rank() != 2) throw ShapeError("export_embeddings: expected [n, d], got " + shape_str(z.shape()));
  if (Index(labels.size()) != z.dim(0)) {
    throw ShapeError("export_embeddings: " + std::to_string(labels.size()) + " labels for " + std::to_string(z.dim(0)) + " rows");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("export_embeddings: cannot open " + path.string() + " for writing");
  const Index n = z.dim(0), d = z.dim(1);
  for (Index i = 0; i < d; ++i) out << "dim_" << i << ',';
  out << "label\n";
  char buf[64];
  for (Index r = 0; r < n; ++r) {
    for (Index i = 0; i < d; ++i) {
      auto res = std::to_chars(buf, buf + sizeof buf, z[r * d + i]);
      out.write(buf, res.ptr - buf);
      out << ',';
    }
    out << labels[std::size_t(r)] << '\n';
  }
  if (!out) throw IoError("export_embeddings: write failed for " + path.string());
}

EmbeddingTable import_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("import_embeddings: cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError(FormatError::Kind::TruncatedHeader, "import_embeddings: missing header");
  Index d = 0;
  for (char ch : line) d += ch == ',' ? 1 : 0;
  std::vector<double> values;
  EmbeddingTable t;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream row(line);
    std::string cell;
    for (Index i = 0; i < d; ++i) {
      if (!std::getline(row, cell, ',')) throw FormatError(FormatError::Kind::SizeMismatch, "import_embeddings: short row");
      values.push_back(std::stod(cell));
    }
    if (!std::getline(row, cell)) throw FormatError(FormatError::Kind::SizeMismatch, "import_embeddings: missing label");
    t.labels.push_back(std::stoi(cell));
  }
  t.z = Tensor<double>(Shape{Index(t.labels.size()), d}, std::move(values));
  return t;
}

#define TPR_INSTANTIATE_DIAGNOSTICS(S)                                                                               \
  template Tensor<S> embed_states(ModelBundle<S>&, const Dataset&, const std::vector<std::pair<int, int>>&, bool);   \
  template Tensor<S> encode_states(ModelBundle<S>&, const Dataset&, const std::vector<std::pair<int, int>>&);        \
  template std::vector<double> cosine_curve(ModelBundle<S>&, const Dataset&, int, int, Rng&);                        \
  template Eigen::MatrixXd view_correlation(ModelBundle<S>&, const Tensor<S>&, const Tensor<S>&);                   \
  template double prediction_cosine(ModelBundle<S>&, const TrajectoryBatch<S>&, int, std::uint64_t, double);         \
  template void export_embeddings(const Tensor<S>&, const std::vector<int>&, const std::filesystem::path&);

TPR_INSTANTIATE_DIAGNOSTICS(float)
TPR_INSTANTIATE_DIAGNOSTICS(double)

}  // namespace tpr

#include "tpr/probe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "tpr/diagnostics.hpp"
#include "tpr/error.hpp"
#include "tpr/rng.hpp"

namespace tpr {

using nlohmann::json;
using MatrixRd = RowMatrix<double>;

const char* to_string(ProbeTask t) { return t == ProbeTask::Reward ? "reward" : "action"; }

bool is_eval_trajectory(int trajectory) { return trajectory % 5 == 4; }

ProbeSplit extract_features(ModelBundle<float>& model, const Dataset& dataset) {
  std::vector<std::pair<int, int>> train_states, eval_states;
  ProbeSplit split;
  for (int i = 0; i < dataset.num_trajectories(); ++i) {
    const bool eval = is_eval_trajectory(i);
    for (int t = 0; t < dataset.trajectory_length(); ++t) {
      (eval ? eval_states : train_states).emplace_back(i, t);
      (eval ? split.eval_actions : split.train_actions).push_back(dataset.action(i, t));
      (eval ? split.eval_rewards : split.train_rewards).push_back(dataset.reward(i, t));
      (eval ? split.eval_trajectories : split.train_trajectories).push_back(i);
    }
  }
  if (train_states.empty() || eval_states.empty()) {
    throw ConfigError("probe: need at least 5 trajectories for a 4:1 split, got " + std::to_string(dataset.num_trajectories()));
  }
  split.train_features = encode_states(model, dataset, train_states).cast<double>();
  split.eval_features = encode_states(model, dataset, eval_states).cast<double>();

  // Standardize with train-split statistics; constant features map to zero.
  auto train = split.train_features.matrix();
  const Eigen::RowVectorXd mean = train.colwise().mean();
  const Eigen::RowVectorXd var = (train.rowwise() - mean).array().square().colwise().mean();
  const Eigen::RowVectorXd inv = var.unaryExpr([](double v) { return v > 1e-12 ? 1.0 / std::sqrt(v) : 0.0; });
  train = ((train.rowwise() - mean).array().rowwise() * inv.array()).matrix();
  auto eval = split.eval_features.matrix();
  eval = ((eval.rowwise() - mean).array().rowwise() * inv.array()).matrix();
  return split;
}

ProbeConfig ProbeConfig::action_defaults() { return ProbeConfig{}; }

ProbeConfig ProbeConfig::reward_defaults() {
  ProbeConfig c;
  c.gamma = 0.0;
  c.lr = 0.5;
  c.epochs = 300;
  c.batch_size = 0;
  c.lr_step = 0;
  return c;
}

std::vector<int> LinearProbe::predict(const Tensor<double>& features) const {
  const MatrixRd logits = (features.matrix() * weight.matrix()).rowwise() + bias.vector().transpose();
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (Index i = 0; i < logits.rows(); ++i) {
    Index best = 0;
    logits.row(i).maxCoeff(&best);
    out[std::size_t(i)] = int(best);
  }
  return out;
}

namespace {

void check_labels(const Tensor<double>& features, std::span<const int> labels, int classes, const char* who) {
  if (features.rank() != 2) throw ShapeError(std::string(who) + ": features must be [n, F], got " + shape_str(features.shape()));
  if (Index(labels.size()) != features.dim(0)) {
    throw ShapeError(std::string(who) + ": " + std::to_string(labels.size()) + " labels for " + std::to_string(features.dim(0)) + " rows");
  }
  if (labels.empty()) throw ConfigError(std::string(who) + ": empty training set");
  for (int y : labels)
    if (y < 0 || y >= classes) throw ConfigError(std::string(who) + ": label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
  const std::set<int> present(labels.begin(), labels.end());
  if (present.size() < 2) throw ConfigError(std::string(who) + ": training labels contain a single class");
}

MatrixRd softmax_rows(const MatrixRd& logits) {
  MatrixRd p = logits.colwise() - logits.rowwise().maxCoeff();
  p = p.array().exp();
  p.array().colwise() /= p.rowwise().sum().array();
  return p;
}

// Gradient of the mean focal loss with respect to the logits of the given rows.
MatrixRd focal_logit_grad(const MatrixRd& p, std::span<const int> labels, double gamma) {
  MatrixRd g(p.rows(), p.cols());
  for (Index i = 0; i < p.rows(); ++i) {
    const int y = labels[std::size_t(i)];
    const double py = std::max(p(i, y), 1e-300);
    // dL/dz_j = -c (delta_jy - p_j), c = (1-p)^g - g (1-p)^(g-1) p log p
    double c = std::pow(1.0 - py, gamma);
    if (gamma != 0.0) c -= gamma * std::pow(1.0 - py, gamma - 1.0) * py * std::log(py);
    for (Index j = 0; j < p.cols(); ++j) g(i, j) = c * (p(i, j) - (j == y ? 1.0 : 0.0));
  }
  return g / double(p.rows());
}

LinearProbe fit(const Tensor<double>& features, std::span<const int> labels, int classes, const ProbeConfig& cfg) {
  const Index n = features.dim(0);
  const Index f = features.dim(1);
  LinearProbe probe{Tensor<double>::zeros({f, classes}), Tensor<double>::zeros({classes})};
  auto w = probe.weight.matrix();
  auto b = probe.bias.vector();
  const Index batch = cfg.batch_size > 0 ? std::min<Index>(cfg.batch_size, n) : n;
  Rng rng = make_stream(cfg.seed, "probe");
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index(0));
  const auto x = features.matrix();
  double lr = cfg.lr;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.lr_step > 0 && epoch > 0 && epoch % cfg.lr_step == 0) lr *= cfg.lr_decay;
    if (batch < n) {
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);
    }
    for (Index start = 0; start < n; start += batch) {
      const Index rows = std::min(batch, n - start);
      MatrixRd xb(rows, f);
      std::vector<int> yb(static_cast<std::size_t>(rows));
      for (Index r = 0; r < rows; ++r) {
        const Index src = order[std::size_t(start + r)];
        xb.row(r) = x.row(src);
        yb[std::size_t(r)] = labels[std::size_t(src)];
      }
      const MatrixRd logits = (xb * w).rowwise() + b.transpose();
      const MatrixRd g = focal_logit_grad(softmax_rows(logits), yb, cfg.gamma);
      const MatrixRd gw = xb.transpose() * g + cfg.weight_decay * MatrixRd(w);
      const Eigen::VectorXd gb = g.colwise().sum().transpose();
      w -= lr * gw;
      b -= lr * gb;
    }
  }
  return probe;
}

}  // namespace

double focal_loss(const Tensor<double>& logits, std::span<const int> labels, double gamma) {
  if (logits.rank() != 2 || Index(labels.size()) != logits.dim(0) || labels.empty()) {
    throw ShapeError("focal_loss: logits " + shape_str(logits.shape()) + " vs " + std::to_string(labels.size()) + " labels");
  }
  const MatrixRd l = logits.matrix();
  const MatrixRd p = softmax_rows(l);
  double acc = 0.0;
  for (Index i = 0; i < l.rows(); ++i) {
    const int y = labels[std::size_t(i)];
    if (y < 0 || y >= l.cols()) throw ConfigError("focal_loss: label out of range");
    const Eigen::RowVectorXd row = l.row(i);
    const double mx = row.maxCoeff();
    const double log_p = row(y) - mx - std::log((row.array() - mx).exp().sum());
    acc += -std::pow(1.0 - p(i, y), gamma) * log_p;
  }
  return acc / double(l.rows());
}

LinearProbe fit_linear_probe(const Tensor<double>& features, std::span<const int> labels, int classes, const ProbeConfig& cfg) {
  if (classes < 2) throw ConfigError("fit_linear_probe: need at least 2 classes");
  check_labels(features, labels, classes, "fit_linear_probe");
  return fit(features, labels, classes, cfg);
}

LinearProbe fit_logistic_probe(const Tensor<double>& features, std::span<const int> labels, const ProbeConfig& cfg) {
  check_labels(features, labels, 2, "fit_logistic_probe");
  // A two-column softmax with the first column pinned at zero is logistic regression.
  const Index n = features.dim(0);
  const Index f = features.dim(1);
  LinearProbe probe{Tensor<double>::zeros({f, 2}), Tensor<double>::zeros({2})};
  Eigen::VectorXd w = Eigen::VectorXd::Zero(f);
  double b = 0.0;
  const auto x = features.matrix();
  Eigen::VectorXd y(n);
  for (Index i = 0; i < n; ++i) y(i) = labels[std::size_t(i)];
  double lr = cfg.lr;
  for (int it = 0; it < cfg.epochs; ++it) {
    if (cfg.lr_step > 0 && it > 0 && it % cfg.lr_step == 0) lr *= cfg.lr_decay;
    const Eigen::VectorXd z = (x * w).array() + b;
    const Eigen::VectorXd p = z.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
    const Eigen::VectorXd r = (p - y) / double(n);
    w -= lr * (x.transpose() * r + cfg.weight_decay * w);
    b -= lr * r.sum();
  }
  probe.weight.matrix().col(1) = w;
  probe.bias[1] = b;
  return probe;
}

ProbeResult f1_report(std::span<const int> predictions, std::span<const int> labels, ProbeTask task, int classes) {
  if (predictions.empty()) throw ConfigError("f1_report: empty input");
  if (predictions.size() != labels.size()) {
    throw ShapeError("f1_report: " + std::to_string(predictions.size()) + " predictions for " + std::to_string(labels.size()) + " labels");
  }
  if (classes < 2) throw ConfigError("f1_report: need at least 2 classes");
  ProbeResult r;
  r.task = task;
  r.eval_size = long(labels.size());
  r.confusion.assign(std::size_t(classes), std::vector<long>(std::size_t(classes), 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i], p = predictions[i];
    if (y < 0 || y >= classes || p < 0 || p >= classes) throw ConfigError("f1_report: label out of range");
    ++r.confusion[std::size_t(y)][std::size_t(p)];
  }
  r.per_class_f1.assign(std::size_t(classes), 0.0);
  for (int c = 0; c < classes; ++c) {
    long tp = r.confusion[std::size_t(c)][std::size_t(c)], fp = 0, fn = 0;
    for (int o = 0; o < classes; ++o) {
      if (o == c) continue;
      fp += r.confusion[std::size_t(o)][std::size_t(c)];
      fn += r.confusion[std::size_t(c)][std::size_t(o)];
    }
    const long denom = 2 * tp + fp + fn;
    r.per_class_f1[std::size_t(c)] = denom == 0 ? 0.0 : 2.0 * double(tp) / double(denom);
  }
  if (task == ProbeTask::Reward) {
    r.f1 = r.per_class_f1[1];
  } else {
    double acc = 0.0;
    int present = 0;
    for (int c = 0; c < classes; ++c) {
      long support = 0;
      for (long v : r.confusion[std::size_t(c)]) support += v;
      if (support == 0) continue;
      acc += r.per_class_f1[std::size_t(c)];
      ++present;
    }
    r.f1 = acc / double(present);
  }
  return r;
}

json ProbeResult::to_json() const {
  return json{{"task", to_string(task)},       {"f1", f1},          {"per_class_f1", per_class_f1},
              {"confusion", confusion},         {"train_size", train_size}, {"eval_size", eval_size}};
}

json ProbeSummary::to_json() const {
  return json{{"act_f1", action.f1}, {"rew_f1", reward.f1}, {"action", action.to_json()}, {"reward", reward.to_json()}};
}

ProbeSummary run_probes(ModelBundle<float>& model, const Dataset& dataset, std::uint64_t seed) {
  const ProbeSplit split = extract_features(model, dataset);
  const int classes = int(dataset.header().num_actions);
  ProbeSummary s;

  ProbeConfig act_cfg = ProbeConfig::action_defaults();
  act_cfg.seed = derive_seed(seed, "probe-action");
  const LinearProbe act = fit_linear_probe(split.train_features, split.train_actions, classes, act_cfg);
  s.action = f1_report(act.predict(split.eval_features), split.eval_actions, ProbeTask::Action, classes);
  s.action.train_size = long(split.train_actions.size());

  ProbeConfig rew_cfg = ProbeConfig::reward_defaults();
  rew_cfg.seed = derive_seed(seed, "probe-reward");
  const LinearProbe rew = fit_logistic_probe(split.train_features, split.train_rewards, rew_cfg);
  s.reward = f1_report(rew.predict(split.eval_features), split.eval_rewards, ProbeTask::Reward, 2);
  s.reward.train_size = long(split.train_rewards.size());
  return s;
}

}  // namespace tpr

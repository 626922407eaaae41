// Command-line front end: dataset generation, pretraining, diagnostics,
// probing and sweeps. Machine-readable output goes to stdout, diagnostics
// to stderr. Exit codes: 0 ok, 2 usage/config, 3 I/O, 4 numeric failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "tpr/config.hpp"
#include "tpr/diagnostics.hpp"
#include "tpr/probe.hpp"
#include "tpr/synthdata.hpp"
#include "tpr/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tpr;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

json read_json(const fs::path& path) {
  const std::vector<std::uint8_t> bytes = read_bytes(path);
  json j = json::parse(bytes.begin(), bytes.end(), nullptr, false);
  if (j.is_discarded()) throw ConfigError("config: " + path.string() + " is not valid JSON");
  return j;
}

ExperimentConfig resolve_config(const std::string& config_path, const std::vector<std::string>& overrides) {
  ExperimentConfig c = config_path.empty() ? ExperimentConfig{} : ExperimentConfig::from_json(read_json(config_path));
  for (const std::string& o : overrides) c.set(o);
  c.validate();
  return c;
}

// ---- gen-data ----

struct GenDataArgs {
  std::uint64_t seed = 0;
  int trajectories = 64;
  int length = 128;
  int height = 16;
  int width = 16;
  int channels = 1;
  int goal_row = -1;
  int goal_col = -1;
  double epsilon = 0.3;
  std::string out;
};

int cmd_gen_data(const GenDataArgs& a) {
  GridworldConfig g;
  g.height = a.height;
  g.width = a.width;
  g.channels = a.channels;
  g.goal_row = a.goal_row;
  g.goal_col = a.goal_col;
  g.epsilon = a.epsilon;
  g.validate();
  const Dataset ds = generate_dataset(g, a.seed, a.trajectories, a.length);
  const std::vector<std::uint8_t> bytes = serialize_dataset(ds);
  {
    std::ofstream out(a.out, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("gen-data: cannot open " + a.out + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) throw IoError("gen-data: write failed for " + a.out);
  }
  const auto [goal_row, goal_col] = g.goal();
  json manifest = {
      {"file", fs::path(a.out).filename().string()},
      {"sha256", sha256_hex(bytes.data(), bytes.size())},
      {"bytes", bytes.size()},
      {"env", "moving-dot"},
      {"seed", a.seed},
      {"trajectories", a.trajectories},
      {"length", a.length},
      {"channels", g.channels},
      {"height", g.height},
      {"width", g.width},
      {"num_actions", kNumActions},
      {"goal", {goal_row, goal_col}},
      {"epsilon", g.epsilon},
  };
  const std::string manifest_path = a.out + ".json";
  write_text(manifest_path, manifest.dump(2) + "\n");
  std::cout << a.out << "\n" << manifest_path << "\n";
  return kExitOk;
}

// ---- pretrain ----

struct PretrainArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::string data;
  std::string out = "runs";
};

int cmd_pretrain(const PretrainArgs& a) {
  const ExperimentConfig c = resolve_config(a.config, a.overrides);
  const Dataset ds = load_dataset(a.data);
  const fs::path dir = fs::path(a.out) / c.hash();
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("pretrain: cannot create " + dir.string() + ": " + ec.message());
  write_text(dir / "config.json", c.to_json().dump(2) + "\n");
  MetricsCsv csv(dir / "metrics.csv", false);
  TrainState state = initialize(c);
  PretrainOptions opts;
  opts.checkpoint_dir = dir;
  std::cerr << "pretrain: " << c.total_steps() << " steps -> " << dir.string() << "\n";
  pretrain(c, ds, state, [&](const MetricsRecord& r) {
    csv.write(r);
    std::cerr << "step " << r.step << " rank " << r.feat_rank << " cos_k1 " << r.cos_k1 << "\n";
  }, opts);
  save_checkpoint(dir / "final.ckpt", c, state);
  std::cout << dir.string() << "\n";
  return kExitOk;
}

// ---- diagnose ----

struct DiagnoseArgs {
  std::string checkpoint;
  std::string data;
  int samples = 0;
  double epsilon = -1.0;
  int k_max = 5;
  int pairs = -1;
  bool normalized = false;
  std::string embeddings;
  std::string out;
};

json corr_json(const CorrStats& s) {
  return {{"mean_on", s.mean_on}, {"mean_abs_off", s.mean_abs_off}, {"max_abs_off", s.max_abs_off}};
}

int cmd_diagnose(const DiagnoseArgs& a) {
  LoadedCheckpoint ck = load_checkpoint(a.checkpoint);
  const ExperimentConfig& c = ck.config;
  const Dataset ds = load_dataset(a.data);
  ModelBundle<float>& m = ck.state.model;
  const int samples = a.samples > 0 ? a.samples : c.rank_samples;
  const double epsilon = a.epsilon >= 0.0 ? a.epsilon : c.rank_epsilon;
  const int pairs = a.pairs >= 0 ? a.pairs : c.cosine_pairs;

  Rng rank_rng = make_stream(c.seed, "heldout-rank");
  const std::vector<std::pair<int, int>> states = sample_states(ds, samples, rank_rng);
  const Tensor<float> z = embed_states(m, ds, states, a.normalized);
  const RankReport rank = feature_rank(z, epsilon);

  Rng cos_rng = make_stream(c.seed, "heldout-cosine");
  const std::vector<double> curve = cosine_curve(m, ds, a.k_max, pairs, cos_rng);

  Rng batch_rng = make_stream(c.seed, "heldout-views");
  Rng view1_rng = make_stream(c.seed, "heldout-view-1");
  Rng view2_rng = make_stream(c.seed, "heldout-view-2");
  const TrajectoryBatch<float> batch = sample_batch<float>(ds, std::max(c.batch_size, 32), c.seq_len, batch_rng);
  const AugmentedViews<float> views = make_views(batch.observations, c.augment, view1_rng, view2_rng);
  const CorrStats corr = corr_stats(view_correlation(m, views.view1, views.view2));

  json report = {
      {"config_hash", c.hash()},
      {"feature_rank", rank.feature_rank},
      {"singular_values", rank.singular_values},
      {"n_samples", rank.n_samples},
      {"epsilon", rank.epsilon},
      {"normalized", a.normalized},
      {"cosine_curve", curve},
      {"corr_stats", corr_json(corr)},
  };
  if (const auto pc = heldout_prediction_cosine(c, ds, m)) report["prediction_cosine"] = *pc;

  if (!a.embeddings.empty()) {
    std::vector<int> labels;
    for (const auto& [traj, t] : states) labels.push_back(ds.action(traj, t));
    export_embeddings(z, labels, a.embeddings);
    report["embeddings"] = a.embeddings;
  }
  const std::string text = report.dump(2) + "\n";
  if (a.out.empty()) {
    std::cout << text;
  } else {
    write_text(a.out, text);
    std::cout << a.out << "\n";
  }
  return kExitOk;
}

// ---- probe ----

struct ProbeArgs {
  std::string checkpoint;
  std::string data;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_probe(const ProbeArgs& a) {
  LoadedCheckpoint ck = load_checkpoint(a.checkpoint);
  const Dataset ds = load_dataset(a.data);
  const ProbeSummary s = run_probes(ck.state.model, ds, a.seed);
  json j = s.to_json();
  j["config_hash"] = ck.config.hash();
  j["seed"] = a.seed;
  const std::string text = j.dump(2) + "\n";
  if (a.out.empty()) {
    std::cout << text;
  } else {
    write_text(a.out, text);
    std::cout << a.out << "\n";
  }
  return kExitOk;
}

// ---- sweep ----

struct SweepArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::string data;
  std::string param;
  std::vector<std::string> values;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::string out;
};

constexpr const char* kSweepHeader =
    "param,value,seed,status,config_hash,feat_rank,cos_k1,cos_k3,cos_k5,pred_cos,loss_total,loss_sim,loss_decorr,"
    "loss_decorr_on,loss_decorr_off,loss_contrastive,loss_action,loss_recon,message";

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char ch : s) {
    if (ch == '"') q += '"';
    q += ch == '\n' ? ' ' : ch;
  }
  return q + "\"";
}

std::string opt_cell(const std::optional<double>& v) { return v ? format_decimal(*v) : ""; }

int cmd_sweep(const SweepArgs& a) {
  if (a.values.empty()) throw ConfigError("sweep: --values must list at least one value");
  if (a.seeds.empty()) throw ConfigError("sweep: --seeds must list at least one seed");
  const ExperimentConfig base = resolve_config(a.config, a.overrides);
  // Reject unknown parameters before running anything.
  ExperimentConfig(base).set(a.param + "=" + a.values.front());
  const Dataset ds = load_dataset(a.data);

  std::ofstream out(a.out, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("sweep: cannot open " + a.out + " for writing");
  out << kSweepHeader << '\n';
  int succeeded = 0;
  for (const std::string& value : a.values) {
    for (std::uint64_t seed : a.seeds) {
      std::string row = csv_field(a.param) + "," + csv_field(value) + "," + std::to_string(seed);
      std::string hash;
      try {
        ExperimentConfig c = base;
        c.set(a.param + "=" + value);
        c.seed = seed;
        c.validate();
        hash = c.hash();
        std::cerr << "sweep: " << a.param << "=" << value << " seed " << seed << " (" << hash << ")\n";
        TrainState state = initialize(c);
        std::optional<MetricsRecord> last;
        pretrain(c, ds, state, [&](const MetricsRecord& r) { last = r; });
        const std::optional<double> pc = heldout_prediction_cosine(c, ds, state.model);
        const LossBreakdown b = last && last->loss ? *last->loss : LossBreakdown{};
        row += ",ok," + hash + "," + std::to_string(last ? last->feat_rank : 0) + "," + format_decimal(last->cos_k1) + "," +
               format_decimal(last->cos_k3) + "," + format_decimal(last->cos_k5) + "," + opt_cell(pc) + "," +
               (last->loss ? format_decimal(b.total) : "") + "," + opt_cell(b.sim) + "," + opt_cell(b.decorr) + "," +
               opt_cell(b.decorr_on) + "," + opt_cell(b.decorr_off) + "," + opt_cell(b.contrastive) + "," +
               opt_cell(b.action) + "," + opt_cell(b.recon) + ",";
        ++succeeded;
      } catch (const Error& e) {
        const char* status = dynamic_cast<const NumericError*>(&e) ? "numeric_error"
                             : dynamic_cast<const ConfigError*>(&e) ? "config_error"
                                                                     : "error";
        std::cerr << "sweep: cell failed: " << e.what() << "\n";
        row += std::string(",") + status + "," + hash + ",,,,,,,,,,,,,," + csv_field(e.what());
      }
      out << row << '\n';
      out.flush();
    }
  }
  if (!out) throw IoError("sweep: write failed for " + a.out);
  std::cout << a.out << "\n";
  if (succeeded == 0) {
    std::cerr << "sweep: every cell failed\n";
    return kExitNumeric;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Temporally predictive representation learning on synthetic gridworld data"};
  app.require_subcommand(1);

  GenDataArgs gen;
  CLI::App* gen_cmd = app.add_subcommand("gen-data", "Generate a moving-dot gridworld dataset and its manifest");
  gen_cmd->add_option("--seed", gen.seed, "Generator seed");
  gen_cmd->add_option("--traj", gen.trajectories, "Number of trajectories");
  gen_cmd->add_option("--len", gen.length, "Steps per trajectory (>= 2)");
  gen_cmd->add_option("--height", gen.height, "Grid height");
  gen_cmd->add_option("--width", gen.width, "Grid width");
  gen_cmd->add_option("--channels", gen.channels, "Frame stack depth");
  gen_cmd->add_option("--goal-row", gen.goal_row, "Goal row (negative: centre)");
  gen_cmd->add_option("--goal-col", gen.goal_col, "Goal column (negative: centre)");
  gen_cmd->add_option("--epsilon", gen.epsilon, "Random-action probability of the behaviour policy");
  gen_cmd->add_option("--out", gen.out, "Dataset path; the manifest goes to <out>.json")->required();

  PretrainArgs pre;
  CLI::App* pre_cmd = app.add_subcommand("pretrain", "Pretrain a model; writes <out>/<config hash>/");
  pre_cmd->add_option("--config", pre.config, "Flat JSON config file");
  pre_cmd->add_option("--set", pre.overrides, "Override key=value (repeatable)");
  pre_cmd->add_option("--data", pre.data, "Dataset file")->required();
  pre_cmd->add_option("--out", pre.out, "Output root directory");

  DiagnoseArgs diag;
  CLI::App* diag_cmd = app.add_subcommand("diagnose", "Feature rank, cosine curve and correlation statistics as JSON");
  diag_cmd->add_option("--ckpt", diag.checkpoint, "Checkpoint file")->required();
  diag_cmd->add_option("--data", diag.data, "Dataset file")->required();
  diag_cmd->add_option("--samples", diag.samples, "States for the rank estimate (default: from config)");
  diag_cmd->add_option("--epsilon", diag.epsilon, "Singular-value threshold (default: from config)");
  diag_cmd->add_option("--k-max", diag.k_max, "Largest lag of the cosine curve");
  diag_cmd->add_option("--pairs", diag.pairs, "Anchors per lag; 0 enumerates every pair (default: from config)");
  diag_cmd->add_flag("--normalized", diag.normalized, "Rank of l2-normalized projections");
  diag_cmd->add_option("--embeddings", diag.embeddings, "Also export the sampled projections as CSV");
  diag_cmd->add_option("--out", diag.out, "Write the JSON report here instead of stdout");

  ProbeArgs probe;
  CLI::App* probe_cmd = app.add_subcommand("probe", "Linear action and reward probes on the frozen encoder");
  probe_cmd->add_option("--ckpt", probe.checkpoint, "Checkpoint file")->required();
  probe_cmd->add_option("--data", probe.data, "Labeled dataset file")->required();
  probe_cmd->add_option("--seed", probe.seed, "Probe shuffling seed");
  probe_cmd->add_option("--out", probe.out, "Write the JSON report here instead of stdout");

  SweepArgs sweep;
  CLI::App* sweep_cmd = app.add_subcommand("sweep", "Pretrain every (value, seed) cell and aggregate final metrics");
  sweep_cmd->add_option("--config", sweep.config, "Flat JSON base config");
  sweep_cmd->add_option("--set", sweep.overrides, "Override key=value on the base config (repeatable)");
  sweep_cmd->add_option("--data", sweep.data, "Dataset file")->required();
  sweep_cmd->add_option("--param", sweep.param, "Config key to vary")->required();
  sweep_cmd->add_option("--values", sweep.values, "Comma-separated values")->required()->delimiter(',');
  sweep_cmd->add_option("--seeds", sweep.seeds, "Comma-separated seeds")->delimiter(',');
  sweep_cmd->add_option("--out", sweep.out, "Output CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen);
    if (*pre_cmd) return cmd_pretrain(pre);
    if (*diag_cmd) return cmd_diagnose(diag);
    if (*probe_cmd) return cmd_probe(probe);
    if (*sweep_cmd) return cmd_sweep(sweep);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitUsage;
}

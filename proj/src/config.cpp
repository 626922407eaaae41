#include "tpr/config.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <functional>

namespace tpr {

using nlohmann::json;

const char* to_string(PretrainMode m) { return m == PretrainMode::Demo ? "demo" : "state"; }

std::string sha256_hex(const void* data, std::size_t size) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data, size, digest, &len, EVP_sha256(), nullptr) != 1) throw Error("sha256: digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 15]);
  }
  return out;
}

namespace {

int as_int(const json& v, const std::string& key) {
  if (v.is_number_integer()) return v.get<int>();
  if (v.is_number_float()) {
    const double d = v.get<double>();
    if (std::floor(d) == d) return int(d);
  }
  throw ConfigError("config: '" + key + "' expects an integer, got " + v.dump());
}

double as_double(const json& v, const std::string& key) {
  if (!v.is_number()) throw ConfigError("config: '" + key + "' expects a number, got " + v.dump());
  return v.get<double>();
}

bool as_bool(const json& v, const std::string& key) {
  if (!v.is_boolean()) throw ConfigError("config: '" + key + "' expects true or false, got " + v.dump());
  return v.get<bool>();
}

std::string as_string(const json& v, const std::string& key) {
  if (!v.is_string()) throw ConfigError("config: '" + key + "' expects a string, got " + v.dump());
  return v.get<std::string>();
}

std::vector<int> as_int_list(const json& v, const std::string& key) {
  if (!v.is_array()) throw ConfigError("config: '" + key + "' expects a list of integers, got " + v.dump());
  std::vector<int> out;
  for (const json& e : v) out.push_back(as_int(e, key));
  return out;
}

std::uint64_t as_u64(const json& v, const std::string& key) {
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer() && v.get<long long>() >= 0) return std::uint64_t(v.get<long long>());
  throw ConfigError("config: '" + key + "' expects a non-negative integer, got " + v.dump());
}

struct Field {
  const char* key;
  std::function<json(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const json&, const std::string&)> put;
};

#define TPR_INT(KEY, MEMBER) \
  Field{KEY, [](const ExperimentConfig& c) { return json(c.MEMBER); }, [](ExperimentConfig& c, const json& v, const std::string& k) { c.MEMBER = as_int(v, k); }}
#define TPR_DOUBLE(KEY, MEMBER) \
  Field{KEY, [](const ExperimentConfig& c) { return json(c.MEMBER); }, [](ExperimentConfig& c, const json& v, const std::string& k) { c.MEMBER = as_double(v, k); }}
#define TPR_BOOL(KEY, MEMBER) \
  Field{KEY, [](const ExperimentConfig& c) { return json(c.MEMBER); }, [](ExperimentConfig& c, const json& v, const std::string& k) { c.MEMBER = as_bool(v, k); }}
#define TPR_INTS(KEY, MEMBER) \
  Field{KEY, [](const ExperimentConfig& c) { return json(c.MEMBER); }, [](ExperimentConfig& c, const json& v, const std::string& k) { c.MEMBER = as_int_list(v, k); }}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      Field{"mode", [](const ExperimentConfig& c) { return json(to_string(c.mode)); },
            [](ExperimentConfig& c, const json& v, const std::string& k) {
              const std::string s = as_string(v, k);
              if (s == "state") c.mode = PretrainMode::State;
              else if (s == "demo") c.mode = PretrainMode::Demo;
              else throw ConfigError("config: mode must be 'state' or 'demo', got '" + s + "'");
            }},
      Field{"loss", [](const ExperimentConfig& c) { return json(to_string(c.loss.variant)); },
            [](ExperimentConfig& c, const json& v, const std::string& k) { c.loss.variant = parse_loss_variant(as_string(v, k)); }},
      Field{"transition", [](const ExperimentConfig& c) { return json(to_string(c.model.transition)); },
            [](ExperimentConfig& c, const json& v, const std::string& k) { c.model.transition = parse_transition_kind(as_string(v, k)); }},
      Field{"seed", [](const ExperimentConfig& c) { return json(c.seed); },
            [](ExperimentConfig& c, const json& v, const std::string& k) { c.seed = as_u64(v, k); }},
      TPR_DOUBLE("lambda_o", loss.lambda_o),
      TPR_DOUBLE("lambda_d", loss.lambda_d),
      TPR_DOUBLE("lambda_a", loss.lambda_a),
      TPR_DOUBLE("temperature", loss.temperature),
      TPR_INT("k", loss.k),
      TPR_DOUBLE("loss.std_floor", loss.std_floor),
      TPR_DOUBLE("mask_ratio", mask_ratio),
      TPR_BOOL("projector_bn", model.projector_bn),
      TPR_BOOL("predictor_bn", model.predictor_bn),
      TPR_INT("batch_size", batch_size),
      TPR_INT("seq_len", seq_len),
      TPR_INT("latent_dim", model.latent_dim),
      TPR_INT("epochs", epochs),
      TPR_INT("steps_per_epoch", steps_per_epoch),
      TPR_BOOL("deterministic", deterministic),
      TPR_INT("model.channels", model.channels),
      TPR_INT("model.height", model.height),
      TPR_INT("model.width", model.width),
      TPR_INT("model.num_actions", model.num_actions),
      TPR_INTS("model.conv_channels", model.conv_channels),
      TPR_INTS("model.conv_strides", model.conv_strides),
      TPR_INT("model.projector_hidden", model.projector_hidden),
      TPR_INT("model.predictor_hidden", model.predictor_hidden),
      TPR_INT("model.action_hidden", model.action_hidden),
      TPR_INT("model.layers", model.layers),
      TPR_INT("model.heads", model.heads),
      TPR_INT("model.mlp_hidden", model.mlp_hidden),
      TPR_INT("model.max_positions", model.max_positions),
      TPR_DOUBLE("optim.lr", optim.lr),
      TPR_DOUBLE("optim.beta1", optim.beta1),
      TPR_DOUBLE("optim.beta2", optim.beta2),
      TPR_DOUBLE("optim.eps", optim.eps),
      TPR_DOUBLE("optim.weight_decay", optim.weight_decay),
      TPR_DOUBLE("optim.max_grad_norm", optim.max_grad_norm),
      TPR_INT("augment.pad", augment.pad),
      TPR_DOUBLE("augment.jitter_scale", augment.jitter_scale),
      TPR_INT("log.every", log_every),
      TPR_INT("log.checkpoint_every", checkpoint_every),
      TPR_INT("log.rank_samples", rank_samples),
      TPR_DOUBLE("log.rank_epsilon", rank_epsilon),
      TPR_INT("log.cosine_pairs", cosine_pairs),
  };
  return table;
}

#undef TPR_INT
#undef TPR_DOUBLE
#undef TPR_BOOL
#undef TPR_INTS

const Field& find_field(const std::string& key) {
  for (const Field& f : fields())
    if (key == f.key) return f;
  throw ConfigError("config: unknown key '" + key + "'");
}

}  // namespace

void ExperimentConfig::validate() const {
  model.validate();
  loss.validate();
  if (batch_size < 1) throw ConfigError("config: batch_size must be >= 1");
  if (seq_len < 2) throw ConfigError("config: seq_len must be >= 2");
  if (loss.k >= seq_len) throw ConfigError("config: k must be < seq_len");
  const int tokens = mode == PretrainMode::Demo ? 2 * seq_len : seq_len;
  if (model.transition != TransitionKind::Gru && tokens > model.max_positions) {
    throw ConfigError("config: " + std::to_string(tokens) + " transition tokens exceed model.max_positions = " +
                      std::to_string(model.max_positions));
  }
  if (model.transition == TransitionKind::NonCausalTransformer) {
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ConfigError("config: mask_ratio must lie in (0, 1)");
    if (mode == PretrainMode::Demo) throw ConfigError("config: demo mode needs a causal transition");
    if (loss.uses_contrastive()) throw ConfigError("config: the contrastive variant needs a causal transition");
  }
  if (model.predictor_bn && batch_size * seq_len < 2) throw ConfigError("config: batch norm needs at least 2 rows per batch");
  if (epochs < 0) throw ConfigError("config: epochs must be >= 0");
  if (steps_per_epoch < 1) throw ConfigError("config: steps_per_epoch must be >= 1");
  if (log_every < 1) throw ConfigError("config: log.every must be >= 1");
  if (checkpoint_every < 0) throw ConfigError("config: log.checkpoint_every must be >= 0");
  if (rank_samples < 1) throw ConfigError("config: log.rank_samples must be >= 1");
  if (!(rank_epsilon >= 0.0)) throw ConfigError("config: log.rank_epsilon must be >= 0");
  if (cosine_pairs < 1) throw ConfigError("config: log.cosine_pairs must be >= 1");
  if (augment.pad < 0 || augment.pad >= std::min(model.height, model.width)) throw ConfigError("config: augment.pad out of range");
  if (augment.jitter_scale < 0.0) throw ConfigError("config: augment.jitter_scale must be >= 0");
  if (!(optim.lr >= 0.0) || !(optim.eps > 0.0) || optim.weight_decay < 0.0) throw ConfigError("config: invalid optimizer settings");
  if (!(optim.beta1 >= 0.0 && optim.beta1 < 1.0 && optim.beta2 >= 0.0 && optim.beta2 < 1.0)) {
    throw ConfigError("config: optimizer betas must lie in [0, 1)");
  }
}

json ExperimentConfig::to_json() const {
  json j = json::object();
  for (const Field& f : fields()) j[f.key] = f.get(*this);
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  ExperimentConfig c;
  for (const auto& [key, value] : j.items()) find_field(key).put(c, value, key);
  c.model.with_actions = c.mode == PretrainMode::Demo;
  return c;
}

void ExperimentConfig::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("config: override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  find_field(key).put(*this, value, key);
  model.with_actions = mode == PretrainMode::Demo;
}

std::string ExperimentConfig::hash() const {
  const std::string canonical = to_json().dump();
  return sha256_hex(canonical.data(), canonical.size()).substr(0, 12);
}

}  // namespace tpr

#include <doctest.h>

#include "tpr/config.hpp"

using namespace tpr;

TEST_CASE("config JSON round-trips and hashes canonically") {
  ExperimentConfig c;
  c.set("lambda_d=0.1");
  c.set("transition=\"gru\"");
  c.set("model.conv_channels=[8,16]");
  c.set("model.conv_strides=[2,2]");
  const nlohmann::json j = c.to_json();
  const ExperimentConfig back = ExperimentConfig::from_json(j);
  CHECK(back.to_json() == j);
  CHECK(back.hash() == c.hash());
  CHECK(c.hash().size() == 12);
  CHECK(c.hash() != ExperimentConfig{}.hash());
  // Key order in the input does not matter.
  CHECK(ExperimentConfig::from_json(nlohmann::json::parse(j.dump())).hash() == c.hash());
}

TEST_CASE("set parses JSON values and bare strings") {
  ExperimentConfig c;
  c.set("seed=7");
  CHECK(c.seed == 7);
  c.set("loss=contrastive");
  CHECK(c.loss.variant == LossVariant::Contrastive);
  c.set("mode=demo");
  CHECK(c.mode == PretrainMode::Demo);
  CHECK(c.model.with_actions);
  c.set("predictor_bn=false");
  CHECK(!c.model.predictor_bn);
  c.set("k=3");
  CHECK(c.loss.k == 3);
}

TEST_CASE("bad overrides are rejected") {
  ExperimentConfig c;
  CHECK_THROWS_AS(c.set("no_such_key=1"), ConfigError);
  CHECK_THROWS_AS(c.set("lambda_d"), ConfigError);
  CHECK_THROWS_AS(c.set("=1"), ConfigError);
  CHECK_THROWS_AS(c.set("batch_size=1.5"), ConfigError);
  CHECK_THROWS_AS(c.set("batch_size=\"eight\""), ConfigError);
  CHECK_THROWS_AS(c.set("seed=-1"), ConfigError);
  CHECK_THROWS_AS(c.set("predictor_bn=1"), ConfigError);
  CHECK_THROWS_AS(c.set("mode=offline"), ConfigError);
  CHECK_THROWS_AS(c.set("model.conv_channels=[1.5]"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(nlohmann::json::array()), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(nlohmann::json{{"bogus", 1}}), ConfigError);
}

TEST_CASE("validation catches inconsistent settings") {
  CHECK_NOTHROW(ExperimentConfig{}.validate());
  for (const char* a : {"batch_size=0", "seq_len=1", "k=10", "mask_ratio=1.0", "epochs=-1", "steps_per_epoch=0", "log.every=0",
                        "log.rank_samples=0", "log.cosine_pairs=0", "augment.pad=16", "optim.eps=0", "lambda_d=-1",
                        "temperature=0", "model.heads=3"}) {
    INFO(a);
    ExperimentConfig c;
    // mask_ratio only matters for the non-causal transition.
    if (std::string(a).rfind("mask_ratio", 0) == 0) c.set("transition=non-causal");
    c.set(a);
    CHECK_THROWS_AS(c.validate(), ConfigError);
  }
  ExperimentConfig state;
  state.set("seq_len=64");
  CHECK_NOTHROW(state.validate());
  ExperimentConfig demo;
  demo.set("mode=demo");
  demo.set("seq_len=33");
  CHECK_THROWS_AS(demo.validate(), ConfigError);
  ExperimentConfig nc;
  nc.set("transition=non-causal");
  nc.set("loss=contrastive");
  CHECK_THROWS_AS(nc.validate(), ConfigError);
  nc.set("loss=decorrelation");
  nc.set("mode=demo");
  CHECK_THROWS_AS(nc.validate(), ConfigError);
}

TEST_CASE("sha256 of known inputs") {
  CHECK(sha256_hex("", 0) == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex("abc", 3) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "vistaformer/config.hpp"

#ifndef VF_CONFIG_DIR
#error "VF_CONFIG_DIR must point at the bundled configs"
#endif

using namespace vf;

namespace {
std::string cfg_path(const char* name) { return std::string(VF_CONFIG_DIR) + "/" + name; }
}  // namespace

TEST_CASE("defaults validate and round-trip through text", "[config]") {
  RunConfig c;
  REQUIRE_NOTHROW(c.validate());
  const auto back = RunConfig::parse(c.serialize());
  CHECK(back == c);
  CHECK(back.serialize() == c.serialize());
}

TEST_CASE("bundled PASTIS config", "[config]") {
  const auto c = RunConfig::load(cfg_path("paper_pastis.cfg"));
  CHECK(c.model.in_channels == 10);
  CHECK(c.model.num_classes == 20);
  CHECK(c.model.max_seq_len == 60);
  CHECK(c.train.batch_size == 32);
  CHECK(c.data.image_height == 32);
  CHECK(c.data.image_width == 32);
  CHECK(c.model.attention == AttentionKind::MHSA);
  CHECK(c.model.na_kernel == 13);
  CHECK(c.model.decoder_channels == 64);
  CHECK(c.model.dropout_rate == 0.175);
  CHECK(c.model.drop_path_rate == 0.175);
  CHECK(c.train.lr_start == 0.0004);
  CHECK(c.train.lr_max == 0.01);
  CHECK(c.train.lr_final == 0.001);
  CHECK(c.train.beta1 == 0.9);
  CHECK(c.train.beta2 == 0.999);
  REQUIRE(c.model.stages.size() == 3);
  CHECK(c.model.stages[0].embed_dim == 32);
  CHECK(c.model.stages[1].embed_dim == 64);
  CHECK(c.model.stages[2].embed_dim == 128);
  CHECK(c.model.stages[0].num_heads == 2);
  CHECK(c.model.stages[2].num_heads == 8);
  CHECK(c.model.stages[1].num_blocks == 2);
  CHECK(c.model.stages[1].mlp_mult == 4);
}

TEST_CASE("bundled MTLCC config", "[config]") {
  const auto c = RunConfig::load(cfg_path("paper_mtlcc.cfg"));
  CHECK(c.model.in_channels == 13);
  CHECK(c.model.num_classes == 18);
  CHECK(c.model.max_seq_len == 46);
  CHECK(c.train.batch_size == 16);
  CHECK(c.data.image_height == 24);
  CHECK(c.data.image_width == 24);
  CHECK_FALSE(c.train.include_background);
}

TEST_CASE("unknown, duplicate and malformed keys are rejected with a location", "[config]") {
  try {
    RunConfig::parse("num_classes = 5\nbogus_key = 1\n", "x.cfg");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("x.cfg:2") != std::string::npos);
    CHECK(std::string(e.what()).find("bogus_key") != std::string::npos);
  }
  CHECK_THROWS_AS(RunConfig::parse("seed = 1\nseed = 2\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("seed 1\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("epochs = ten\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("epochs = 3x\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("augment = maybe\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("attention = linear\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("seed = -1\n"), ConfigError);
}

TEST_CASE("semantic validation", "[config]") {
  CHECK_THROWS_AS(RunConfig::parse("num_classes = 0\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("batch_size = 0\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("warm_fraction = 1.5\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("num_classes = 4\nbackground_class = 4\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("cloud_prob = -0.1\n"), ConfigError);
  // stage lists must agree with embed_dims
  CHECK_THROWS_AS(RunConfig::parse("embed_dims = 8,16\nnum_heads = 1,2,4\n"), ConfigError);
  const auto two = RunConfig::parse("embed_dims = 8,16\nnum_heads = 1,2\nnum_blocks = 1,1\nmlp_mult = 2,2\nspatial_patch = 2,2\n");
  CHECK(two.model.stages.size() == 2);
}

TEST_CASE("comments, blank lines and overrides", "[config]") {
  auto c = RunConfig::parse("# header\n\n  epochs = 7   # trailing\nattention = na\n");
  CHECK(c.train.epochs == 7);
  CHECK(c.model.attention == AttentionKind::Neighbourhood);
  c.set("na_kernel", "5");
  CHECK(c.model.na_kernel == 5);
  c.set("seed", "18446744073709551615");
  CHECK(c.train.seed == 18446744073709551615ull);
  CHECK(RunConfig::parse(c.serialize()) == c);
  CHECK_THROWS_AS(c.set("nope", "1"), ConfigError);
}

TEST_CASE("doubles survive serialization exactly", "[config]") {
  RunConfig c;
  c.train.lr_max = 0.1 + 0.2;
  c.model.dropout_rate = 1.0 / 3.0;
  const auto back = RunConfig::parse(c.serialize());
  CHECK(back.train.lr_max == c.train.lr_max);
  CHECK(back.model.dropout_rate == c.model.dropout_rate);
}

TEST_CASE("file IO errors", "[config]") {
  CHECK_THROWS_AS(RunConfig::load("/nonexistent/run.cfg"), IoError);
  const auto p = std::filesystem::temp_directory_path() / "vf_test_cfg.cfg";
  RunConfig c;
  c.train.epochs = 3;
  c.save(p.string());
  CHECK(RunConfig::load(p.string()) == c);
}

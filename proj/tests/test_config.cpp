#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "id2face/config.hpp"
#include "id2face/error.hpp"

using namespace id2face;
using namespace id2face::config;
namespace fs = std::filesystem;

namespace {

fs::path write_file(const std::string& name, const std::string& text) {
  const auto p = fs::temp_directory_path() / ("id2face_test_" + name);
  std::ofstream(p) << text;
  return p;
}

}  // namespace

TEST_SUITE("config") {

TEST_CASE("defaults survive a JSON round trip") {
  const RunConfig a;
  const auto b = RunConfig::from_json(a.to_json());
  CHECK(a.to_json() == b.to_json());
  CHECK(a.hash() == b.hash());
  CHECK(a.hash().size() == 64);
  CHECK(a.train.train.lr == 1e-4);
  CHECK(a.anonymize.steps == 40);
  CHECK(a.train.train.weights.recon == 0.1);
  CHECK(a.train.train.weights.region == 0.1);
  CHECK(a.train.train.weights.kl == 1e-5);
}

TEST_CASE("partial input merges over defaults and changes the hash") {
  const auto c = RunConfig::from_json({{"train", {{"steps", 12}, {"model", {{"d_lat", 8}}}}}});
  CHECK(c.train.train.steps == 12);
  CHECK(c.train.train.model.d_lat == 8);
  CHECK(c.train.train.batch == 8);
  CHECK(c.hash() != RunConfig{}.hash());
}

TEST_CASE("TOML and JSON give the same configuration") {
  const auto toml = write_file("cfg.toml", R"(# comment
[gen_data]
n_identities = 6
renders_per_identity = 2
seed = 9
write_png = true

[train]
steps = 25
lr = 2.5e-4
[train.model]
channels = [16, 32, 32]
encoder_attention = [2]

[anonymize]
out = "anon dir"
)");
  const auto json = write_file("cfg.json", R"({
  "gen_data": {"n_identities": 6, "renders_per_identity": 2, "seed": 9, "write_png": true},
  "train": {"steps": 25, "lr": 2.5e-4, "model": {"channels": [16, 32, 32], "encoder_attention": [2]}},
  "anonymize": {"out": "anon dir"}
})");
  const auto a = load(toml);
  const auto b = load(json);
  CHECK(a.to_json() == b.to_json());
  CHECK(a.hash() == b.hash());
  CHECK(a.gen_data.corpus.n_identities == 6);
  CHECK(a.train.train.model.channels == std::vector<int64_t>{16, 32, 32});
  CHECK(a.anonymize.out == "anon dir");
  fs::remove(toml);
  fs::remove(json);
}

TEST_CASE("TOML dotted keys and inline values") {
  const auto j = parse_toml("a.b = 1\n[c]\nd = \"x\\ty\"\ne = [1.5, -2]\nf = false\n");
  CHECK(j["a"]["b"] == 1);
  CHECK(j["c"]["d"] == "x\ty");
  CHECK(j["c"]["e"][0] == 1.5);
  CHECK(j["c"]["e"][1] == -2);
  CHECK(j["c"]["f"] == false);
  CHECK_THROWS_AS(parse_toml("[unterminated\n"), ValidationError);
  CHECK_THROWS_AS(parse_toml("a = \n"), ValidationError);
}

TEST_CASE("unknown keys and bad values are rejected") {
  try {
    RunConfig::from_json({{"train", {{"stpes", 3}}}});
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("train.stpes") != std::string::npos);
  }
  CHECK_THROWS_AS(RunConfig::from_json({{"bogus", 1}}), ValidationError);
  CHECK_THROWS_AS(RunConfig::from_json({{"train", {{"steps", "ten"}}}}), ValidationError);
  CHECK_THROWS_AS(RunConfig::from_json({{"train", {{"lr", -1.0}}}}), ValidationError);
  CHECK_THROWS_AS(RunConfig::from_json({{"anonymize", {{"seed", -4}}}}), ValidationError);
  CHECK_THROWS_AS(RunConfig::from_json({{"evaluate", {{"pairing", "median"}}}}), ValidationError);
  CHECK_THROWS_AS(load(fs::temp_directory_path() / "id2face_test_nope.json"), IoError);
}

}  // TEST_SUITE

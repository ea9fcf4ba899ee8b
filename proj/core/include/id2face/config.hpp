#pragma once

// Run configuration shared by all commands. Files are JSON or a TOML subset
// (tables, dotted tables, strings, numbers, booleans, single-line arrays);
// both map onto the same schema and unknown keys are rejected.

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "id2face/metrics.hpp"
#include "id2face/perception.hpp"
#include "id2face/pipeline.hpp"

namespace id2face::config {

struct GenDataConfig {
  perception::CorpusConfig corpus;
  int test_renders_per_identity = 0;  // extra held-out renders, fresh nuisances
  std::string out = "data";
  bool write_png = false;
  bool overwrite = false;
};

struct TrainCommandConfig {
  pipeline::TrainConfig train;
  std::string out = "checkpoint";
  std::string log = "train_log.csv";
  std::string resume;  // checkpoint directory to continue from
};

struct AnonymizeConfig {
  std::string checkpoint = "checkpoint";
  std::string input;  // manifest (.jsonl), PNG file or directory of PNGs
  std::string out = "anonymized";
  int64_t steps = 40;
  int64_t num_variants = 1;
  uint64_t seed = 0;
  bool write_grid = false;  // input | degraded | anonymized triplets
};

struct EvaluateConfig {
  std::string originals;   // manifest of the source renders (gallery)
  std::string anonymized;  // anonymize.jsonl, or a manifest for self-evaluation
  std::string out = "report.json";
  std::string embeddings;  // optional CSV dump of query embeddings
  double residual_threshold = metrics::kFitResidualThreshold;
  std::string pairing = "centroid";  // or "nearest"
};

struct SampleIdentityConfig {
  std::string checkpoint = "checkpoint";
  std::string input;
  std::string out = "identities.jsonl";
  int64_t count = 1;
  uint64_t seed = 0;
};

struct RunConfig {
  GenDataConfig gen_data;
  TrainCommandConfig train;
  AnonymizeConfig anonymize;
  EvaluateConfig evaluate;
  SampleIdentityConfig sample_identity;

  nlohmann::json to_json() const;
  /// Merges `j` over the defaults; throws ValidationError on unknown keys,
  /// wrong types or invalid values.
  static RunConfig from_json(const nlohmann::json& j);
  /// SHA-256 of the canonical JSON form.
  std::string hash() const;
};

nlohmann::json parse_toml(const std::string& text);
/// Dispatches on the extension: .toml is TOML, anything else JSON.
RunConfig load(const std::filesystem::path& path);

}  // namespace id2face::config

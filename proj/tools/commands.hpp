#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "id2face/config.hpp"

namespace id2face::cli {

struct Context {
  config::RunConfig config;
  std::filesystem::path workdir = ".";

  std::filesystem::path resolve(const std::string& p) const;
};

void gen_data(const Context& ctx);
void train(const Context& ctx);
void anonymize(const Context& ctx);
void evaluate(const Context& ctx);
void sample_identity(const Context& ctx);

/// Images named by a manifest (.jsonl), a PNG file, or a directory of PNGs.
struct InputSet {
  torch::Tensor images;  // (N, 3, S, S)
  std::vector<std::string> ids;
  std::vector<int64_t> source_ids;  // identity ids; -1 when unknown
};
InputSet load_inputs(const std::filesystem::path& path);

std::string record_id(const perception::ManifestRecord& r);

/// Parses arguments, runs the subcommand and maps errors onto exit codes.
int run(int argc, char** argv);

}  // namespace id2face::cli

#pragma once

// Identity-masked training and the forward-only anonymization path.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "id2face/diffusion.hpp"
#include "id2face/idlr.hpp"
#include "id2face/idvae.hpp"
#include "id2face/iglh.hpp"
#include "id2face/losses.hpp"
#include "id2face/perception.hpp"

namespace id2face::pipeline {

inline constexpr const char* kCodeVersion = "0.1.0";

// Seed streams; every random draw is keyed by (user seed, stream).
inline constexpr uint64_t kBatchStream = 0xBA7C;
inline constexpr uint64_t kStepStream = 0x57E9;
inline constexpr uint64_t kIdentityStream = 1;
inline constexpr uint64_t kDegradeStream = 2;
inline constexpr uint64_t kNoiseStream = 3;

struct ModelConfig {
  int64_t image_size = 32;
  int64_t num_landmarks = 16;
  int64_t d_id = 64;
  int64_t d_tok = 64;
  int64_t d_lat = 32;
  int64_t vae_hidden = 128;
  int64_t n_id_tokens = 4;
  int64_t n_freq = 6;
  int64_t d_attn = 64;
  int64_t heads = 4;
  std::vector<int64_t> channels = {32, 64, 64};
  int64_t time_dim = 128;
  std::vector<int64_t> encoder_attention = {1, 2};

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

struct ScheduleConfig {
  int64_t T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  diffusion::NoiseSchedule build() const { return diffusion::NoiseSchedule::linear(T, beta_start, beta_end); }
  nlohmann::json to_json() const;
  static ScheduleConfig from_json(const nlohmann::json& j);
};

struct TrainConfig {
  int64_t steps = 1000;
  int64_t batch = 8;
  double lr = 1e-4;
  double weight_decay = 1e-2;
  uint64_t seed = 0;
  losses::LossWeights weights;
  ScheduleConfig schedule;
  ModelConfig model;
  idlr::DegradeConfig degrade;
  std::string manifest;             // dataset manifest path
  int64_t checkpoint_interval = 0;  // 0: only the final checkpoint

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Everything trainable plus the fixed providers and schedule.
struct Models {
  ModelConfig config;
  diffusion::NoiseSchedule schedule;
  iglh::Denoiser denoiser{nullptr};
  idlr::Idlr idlr{nullptr};
  idvae::IdVae idvae{nullptr};
  perception::Providers providers;
  idlr::DegradeConfig degrade;  // also used at inference

  /// Parameter initialization is seeded, so equal (config, seed) give equal models.
  static Models create(const ModelConfig& config, const ScheduleConfig& schedule, uint64_t seed);

  std::vector<torch::Tensor> parameters() const;
  void train(bool on = true);
  void eval() { train(false); }
};

/// Named parameter groups used by checkpoints and the gradient audit.
std::vector<std::pair<std::string, std::vector<std::pair<std::string, torch::Tensor>>>> parameter_groups(
    const Models& models);

// ---------------------------------------------------------------------------
// Data

/// Rendered corpus with per-sample masks and landmarks cached.
class Dataset {
 public:
  Dataset(std::vector<perception::ManifestRecord> records, int64_t num_landmarks = 16);

  int64_t size() const { return static_cast<int64_t>(records_.size()); }
  int64_t num_identities() const { return static_cast<int64_t>(identities_.size()); }
  const std::vector<perception::ManifestRecord>& records() const { return records_; }
  const torch::Tensor& images() const { return images_; }        // (N, 3, S, S)
  const torch::Tensor& masks() const { return masks_; }          // (N, S, S)
  const torch::Tensor& landmarks() const { return landmarks_; }  // (N, K, 2)
  const std::vector<int64_t>& identities() const { return identities_; }
  const std::vector<int64_t>& renders_of(int64_t identity_slot) const { return by_identity_.at(identity_slot); }

 private:
  std::vector<perception::ManifestRecord> records_;
  std::vector<int64_t> identities_;                // distinct identity ids
  std::vector<std::vector<int64_t>> by_identity_;  // row indices per identity slot
  torch::Tensor images_, masks_, landmarks_;
};

struct Pair {
  int64_t x_index = 0;
  int64_t y_index = 0;
  int64_t identity_id = 0;
};

/// Uniform identity, then two distinct renders of it (or a self-pair when the
/// identity has one render).
Pair sample_pair(const Dataset& data, torch::Generator& gen);

struct TrainBatch {
  torch::Tensor x, y;      // (B, 3, S, S)
  torch::Tensor mask;      // (B, S, S), of x
  torch::Tensor landmarks; // (B, K, 2), of x
  std::vector<Pair> pairs;
};

TrainBatch make_batch(const Dataset& data, int64_t batch, torch::Generator& gen);

// ---------------------------------------------------------------------------
// Training

struct StepOutput {
  losses::TotalLoss loss;
  iglh::DenoiserOutput denoiser;
};

/// Forward pass and losses for one batch; no optimizer involvement.
StepOutput compute_losses(const TrainBatch& batch, Models& models, const TrainConfig& config, uint64_t step_seed);

class Trainer {
 public:
  Trainer(Models& models, TrainConfig config);

  /// One joint optimizer step on a fresh batch from `data`.
  losses::LossBreakdown step(const Dataset& data);
  /// One joint optimizer step on a caller-provided batch.
  losses::LossBreakdown step(const TrainBatch& batch);

  int64_t step_count() const { return step_; }
  void set_step_count(int64_t step) { step_ = step; }
  torch::optim::AdamW& optimizer() { return *optimizer_; }
  const TrainConfig& config() const { return config_; }

 private:
  Models& models_;
  TrainConfig config_;
  std::unique_ptr<torch::optim::AdamW> optimizer_;
  int64_t step_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoints
//
// A checkpoint is a directory holding manifest.json and one parameter archive
// per module namespace (denoiser, iglh, idlr, idvae). Archive layout, all
// integers little-endian:
//   magic "ID2FPARM" (8 bytes), u32 version (1), u64 tensor count, then per
//   tensor: u32 name length, name bytes (UTF-8), u32 ndim, i64 dims[ndim],
//   float32 values in row-major order.
// The manifest records the SHA-256 of every archive.

void save_checkpoint(const std::filesystem::path& dir, const Models& models, const TrainConfig& config,
                     int64_t step, const torch::optim::AdamW* optimizer = nullptr);

struct LoadedCheckpoint {
  Models models;
  TrainConfig config;
  int64_t step = 0;
  nlohmann::json manifest;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);
/// Restores optimizer moments saved next to the archives, if present.
bool load_optimizer_state(const std::filesystem::path& dir, torch::optim::AdamW& optimizer);

void write_param_archive(const std::filesystem::path& path,
                         const std::vector<std::pair<std::string, torch::Tensor>>& tensors);
std::vector<std::pair<std::string, torch::Tensor>> read_param_archive(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Inference

/// Face mask and landmarks for each image, from the fitted nuisance parameters.
struct FaceConditions {
  torch::Tensor mask;       // (B, S, S)
  torch::Tensor landmarks;  // (B, K, 2)
};
FaceConditions estimate_conditions(const torch::Tensor& images, int64_t num_landmarks = 16);

/// Counters filled by the inference path. A pure forward pass leaves
/// parameter_updates and gradient_passes at zero.
struct InferenceAudit {
  int64_t parameter_updates = 0;  // in-place modifications observed on parameters
  int64_t gradient_passes = 0;    // denoiser calls with autograd on, or gradients materialized
  int64_t denoiser_calls = 0;
};

struct GenerateOptions {
  int64_t steps = 40;
  double clip = 1.0;  // clean-estimate clamp during sampling; images live in [-1, 1]. 0 disables.
  const FaceConditions* conditions = nullptr;  // estimated from the images when null
  InferenceAudit* audit = nullptr;
};

/// Conditions the denoiser on (images' non-identity content, e_ctrl) and runs
/// DDIM. One seed per image drives its degradation and starting noise.
torch::Tensor generate(Models& models, const torch::Tensor& images, const torch::Tensor& e_ctrl,
                       const std::vector<uint64_t>& seeds, const GenerateOptions& options = {});

struct AnonymizeResult {
  torch::Tensor x_hat;         // (B, 3, S, S)
  torch::Tensor e_ctrl;        // (B, d_id)
  torch::Tensor oim_latent;    // (B, d_lat), orthogonal to source_latent
  torch::Tensor source_latent; // (B, d_lat)
};

/// Anonymous identity per image from the orthogonal mapping, then generate.
AnonymizeResult anonymize(Models& models, const torch::Tensor& images, const std::vector<uint64_t>& seeds,
                          const GenerateOptions& options = {});
/// Single image (3, S, S) convenience overload.
AnonymizeResult anonymize(Models& models, const torch::Tensor& image, uint64_t seed,
                          const GenerateOptions& options = {});

/// Positive control: condition on the image's own identity decode(encode(embed(x)).mu).
torch::Tensor reconstruct(Models& models, const torch::Tensor& images, const std::vector<uint64_t>& seeds,
                          const GenerateOptions& options = {});

}  // namespace id2face::pipeline

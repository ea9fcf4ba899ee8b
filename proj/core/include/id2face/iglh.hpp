#pragma once

// Identity-guided latent harmonizer blocks and the U-shaped denoiser that
// hosts them on its decoder path.

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "id2face/attention.hpp"
#include "id2face/types.hpp"

namespace id2face::iglh {

/// Group count for GroupNorm: largest of {8, 4, 2, 1} dividing `channels`.
int64_t norm_groups(int64_t channels);

struct IglhBlockOptions {
  int64_t channels = 64;
  int64_t spatial = 8;  // side length of the feature map, for the positional bias
  int64_t d_tok = 64;
  int64_t d_attn = 64;
  int64_t heads = 4;
  std::string name = "iglh";
};

struct IglhOutput {
  torch::Tensor f_next;  // (B, C, h, w)
  torch::Tensor logits;  // (B, 1, h, w), before the sigmoid
  torch::Tensor mask;    // sigmoid(logits)
  torch::Tensor f_id;
  torch::Tensor f_non_id;
};

/// Self-attention over positions, a per-location gate on the result, two
/// token-conditioned cross-attention branches and their convex fusion
///   f_next = m * f_id + (1 - m) * f_non_id.
class IglhBlockImpl : public torch::nn::Module {
 public:
  explicit IglhBlockImpl(const IglhBlockOptions& options);

  IglhOutput forward(const torch::Tensor& f, const ConditionTokens& cond);

  /// Replaces the gate logits with a constant; std::nullopt restores the map.
  void force_gate_logit(std::optional<double> value) { forced_logit_ = value; }

  const IglhBlockOptions& options() const { return options_; }

 private:
  IglhBlockOptions options_;
  std::optional<double> forced_logit_;
  torch::nn::GroupNorm norm_{nullptr};
  torch::Tensor pos_bias_;
  Attention self_attn_{nullptr};
  Mlp gate_{nullptr};
  torch::nn::LayerNorm tok_norm_non_id_{nullptr}, tok_norm_id_{nullptr};
  Attention tok_attn_non_id_{nullptr}, tok_attn_id_{nullptr};
  torch::nn::GroupNorm cross_norm_{nullptr};
  Attention cross_non_id_{nullptr}, cross_id_{nullptr};
};
TORCH_MODULE(IglhBlock);

/// Pre-norm residual self-attention over flattened positions.
class SpatialSelfAttentionImpl : public torch::nn::Module {
 public:
  SpatialSelfAttentionImpl(int64_t channels, int64_t spatial, int64_t d_attn, int64_t heads);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::GroupNorm norm_{nullptr};
  torch::Tensor pos_bias_;
  Attention attn_{nullptr};
};
TORCH_MODULE(SpatialSelfAttention);

class ResBlockImpl : public torch::nn::Module {
 public:
  ResBlockImpl(int64_t in_channels, int64_t out_channels, int64_t time_dim);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& t_emb);

 private:
  torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
  torch::nn::Linear time_proj_{nullptr};
  torch::nn::Conv2d skip_{nullptr};
};
TORCH_MODULE(ResBlock);

/// (B) timesteps -> (B, dim) sinusoidal features.
torch::Tensor timestep_embedding(const torch::Tensor& t, int64_t dim);

struct DenoiserOptions {
  int64_t in_channels = 3;
  int64_t image_size = 32;
  std::vector<int64_t> channels = {32, 64, 64};
  int64_t time_dim = 128;
  int64_t d_tok = 64;
  int64_t d_attn = 64;
  int64_t heads = 4;
  /// Encoder scales (0 = full resolution) that get plain self-attention.
  std::vector<int64_t> encoder_attention = {1, 2};
  int64_t T = 1000;  // valid timesteps are [1, T]

  void validate() const;
  nlohmann::json to_json() const;
  static DenoiserOptions from_json(const nlohmann::json& j);
};

struct DenoiserOutput {
  torch::Tensor eps_hat;
  std::vector<torch::Tensor> gate_logits;  // decoder order, coarsest first
  std::vector<torch::Tensor> gate_masks;
};

class DenoiserImpl : public torch::nn::Module {
 public:
  explicit DenoiserImpl(const DenoiserOptions& options = {});

  /// t: (B) int64 timesteps, or a single element broadcast over the batch.
  DenoiserOutput forward(const torch::Tensor& z_t, const torch::Tensor& t, const ConditionTokens& cond);
  DenoiserOutput forward(const torch::Tensor& z_t, int64_t t, const ConditionTokens& cond);

  const DenoiserOptions& options() const { return options_; }
  int64_t num_scales() const { return static_cast<int64_t>(options_.channels.size()); }
  IglhBlock iglh(int64_t decoder_index) const { return iglh_.at(decoder_index); }
  torch::nn::Conv2d output_conv() const { return out_conv_; }
  /// Parameters of the IGLH blocks only.
  std::vector<torch::Tensor> iglh_parameters() const;
  /// Parameters outside the IGLH blocks.
  std::vector<torch::Tensor> backbone_parameters() const;

 private:
  DenoiserOptions options_;
  torch::nn::Sequential time_mlp_{nullptr};
  torch::nn::Conv2d in_conv_{nullptr};
  std::vector<ResBlock> enc_blocks_;
  std::vector<SpatialSelfAttention> enc_attn_;  // null where a scale has none
  std::vector<torch::nn::Conv2d> down_;
  ResBlock mid_{nullptr};
  std::vector<ResBlock> dec_blocks_;
  std::vector<IglhBlock> iglh_;
  std::vector<torch::nn::Conv2d> up_;
  torch::nn::GroupNorm out_norm_{nullptr};
  torch::nn::Conv2d out_conv_{nullptr};
};
TORCH_MODULE(Denoiser);

}  // namespace id2face::iglh

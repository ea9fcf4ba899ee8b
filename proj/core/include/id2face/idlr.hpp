#pragma once

// Identity-decoupled latent recomposer: identity-masked degradation, the
// identity-agnostic spatial embedding, identity token projection and the
// bidirectional alignment of the two token streams.

#include <cstdint>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "id2face/attention.hpp"
#include "id2face/perception.hpp"
#include "id2face/types.hpp"

namespace id2face::idlr {

/// Ranges for the randomized degradation applied inside the face mask. A
/// resample factor below 2 disables resampling; zero sigma/noise disables
/// blur/noise.
struct DegradeConfig {
  double blur_sigma_min = 1.0;
  double blur_sigma_max = 2.0;
  int resample_min = 2;
  int resample_max = 4;
  double noise_min = 0.1;
  double noise_max = 0.3;

  static DegradeConfig none() { return {0.0, 0.0, 0, 0, 0.0, 0.0}; }
  void validate() const;
  nlohmann::json to_json() const;
  static DegradeConfig from_json(const nlohmann::json& j);
};

/// Normalized 1-D Gaussian taps with radius ceil(3 sigma).
torch::Tensor gaussian_kernel1d(double sigma);

/// Depthwise 2-D convolution with reflect padding; kernel (kh, kw), odd sizes.
torch::Tensor blur2d(const torch::Tensor& images, const torch::Tensor& kernel);

/// image (3, H, W) or (B, 3, H, W); mask (H, W) or (B, H, W). Pixels outside
/// the mask are returned untouched. Batched inputs use per-row derived seeds.
ImageTensor degrade(const ImageTensor& image, const torch::Tensor& mask, uint64_t seed,
                    const DegradeConfig& cfg);

/// Raw Fourier features, (..., K, 2) -> (..., K, 4 * n_freq). Per keypoint the
/// layout is coordinate-major: for c in (x, y), for j < n_freq,
/// (sin(2^j pi c), cos(2^j pi c)).
torch::Tensor fourier_features(const torch::Tensor& points, int64_t n_freq);

struct IdlrOptions {
  int64_t d_id = 64;
  int64_t d_tok = 64;
  int64_t n_id_tokens = 4;
  int64_t n_freq = 6;
  int64_t d_attn = 64;
  int64_t heads = 4;
  bool id_proj_bias = true;
};

class IdlrImpl : public torch::nn::Module {
 public:
  explicit IdlrImpl(const IdlrOptions& options = {});

  /// Landmarks (B, K, 2) in [0, 1] -> (B, K, d_tok).
  torch::Tensor fourier_landmark_embed(const torch::Tensor& landmarks);

  /// e_non_id = q + CrossAttn(q = Proj(semantic), k = v = Proj(landmark tokens)).
  torch::Tensor nonid_embedding(const torch::Tensor& semantic_tokens, const torch::Tensor& landmarks,
                                torch::Tensor* weights = nullptr);

  /// (B, d_id) -> (B, N_id, d_tok)
  torch::Tensor project_identity(const torch::Tensor& e_ctrl);

  /// Residual bidirectional cross-attention between the two streams.
  ConditionTokens align(const torch::Tensor& e_non_id, const torch::Tensor& e_id,
                        torch::Tensor* nonid_weights = nullptr, torch::Tensor* id_weights = nullptr);

  const IdlrOptions& options() const { return options_; }
  Attention nonid_attention() const { return nonid_attn_; }
  Attention align_nonid_attention() const { return align_nonid_; }
  Attention align_id_attention() const { return align_id_; }
  torch::nn::Linear landmark_linear() const { return landmark_linear_; }

 private:
  IdlrOptions options_;
  torch::nn::Linear landmark_linear_{nullptr};
  Mlp semantic_proj_{nullptr};
  Mlp landmark_proj_{nullptr};
  Attention nonid_attn_{nullptr};
  Mlp id_proj_{nullptr};
  Attention align_nonid_{nullptr};
  Attention align_id_{nullptr};
};
TORCH_MODULE(Idlr);

/// Runs the semantic provider on the degraded image, then the recomposer.
torch::Tensor build_nonid_embedding(const ImageTensor& x_d, const torch::Tensor& landmarks,
                                    Idlr& idlr, const perception::SemanticProvider& semantic,
                                    torch::Tensor* weights = nullptr);

}  // namespace id2face::idlr

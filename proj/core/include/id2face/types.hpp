#pragma once

#include <torch/torch.h>

#include <cstdint>

namespace id2face {

// Images are float32 tensors shaped (3, H, W) or (B, 3, H, W) with values in
// [-1, 1]. Latents share the layout: the default diffusion autoencoder is the
// identity map, so diffusion runs directly in pixel space.
using ImageTensor = torch::Tensor;
using LatentTensor = torch::Tensor;

/// Unit-norm identity vector, (d_id) or batched (B, d_id).
struct IdentityEmbedding {
  torch::Tensor vector;
  bool normalized = true;
};

/// Aligned conditioning streams consumed by the denoiser.
struct ConditionTokens {
  torch::Tensor non_id;  // (B, N_s, d_tok)
  torch::Tensor id;      // (B, N_id, d_tok)

  ConditionTokens index(int64_t i) const {
    return {non_id.slice(0, i, i + 1), id.slice(0, i, i + 1)};
  }
  ConditionTokens repeat(int64_t n) const {
    return {non_id.repeat({n, 1, 1}), id.repeat({n, 1, 1})};
  }
};

// Seeded CPU generator; every random draw in the library goes through one.
torch::Generator make_generator(uint64_t seed);

// Mixes a stream tag into a user seed so independent draws stay decorrelated.
uint64_t derive_seed(uint64_t seed, uint64_t stream);

bool all_finite(const torch::Tensor& t);

}  // namespace id2face

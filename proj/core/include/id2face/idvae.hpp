#pragma once

// Identity VAE over recognizer embeddings, and the orthogonal identity mapping
// used to draw anonymous identities at inference.

#include <cstdint>

#include <torch/torch.h>

#include "id2face/types.hpp"

namespace id2face::idvae {

inline constexpr double kLogVarClamp = 20.0;
inline constexpr double kNearParallelTolerance = 1e-4;
inline constexpr int kMaxProjectionAttempts = 16;

struct IdVaeOptions {
  int64_t d_id = 64;
  int64_t d_lat = 32;
  int64_t hidden = 128;
};

/// Posterior parameters; log_var is already clamped to [-20, 20].
struct IdLatent {
  torch::Tensor mu;
  torch::Tensor log_var;
};

class IdVaeImpl : public torch::nn::Module {
 public:
  explicit IdVaeImpl(const IdVaeOptions& options = {});

  /// (d_id) or (B, d_id) -> mu, log_var of matching rank.
  IdLatent encode(const torch::Tensor& e_id);
  /// Raw decoder output, no normalization.
  torch::Tensor decode_raw(const torch::Tensor& latent);
  /// Decoder output re-normalized to the unit sphere.
  torch::Tensor decode(const torch::Tensor& latent);

  const IdVaeOptions& options() const { return options_; }
  torch::nn::Sequential encoder() const { return encoder_; }
  torch::nn::Sequential decoder() const { return decoder_; }

 private:
  IdVaeOptions options_;
  torch::nn::Sequential encoder_{nullptr};
  torch::nn::Sequential decoder_{nullptr};
};
TORCH_MODULE(IdVae);

/// mu + exp(log_var / 2) * noise when training; mu otherwise.
torch::Tensor reparameterize(const IdLatent& lat, const torch::Tensor& noise, bool training);

struct Projection {
  torch::Tensor u;
  bool near_parallel = false;  // caller should resample r
};

/// u = r - <r, v> / |v|^2 * v. Throws DegenerateError when |v| <= 1e-8.
Projection orthogonal_project(const torch::Tensor& r, const torch::Tensor& v,
                              double tau_min = kNearParallelTolerance);

struct AnonymousIdentity {
  IdentityEmbedding embedding;  // normalized decode(u)
  torch::Tensor u;              // projected latent, orthogonal to v
  torch::Tensor r;              // accepted Gaussian draw
  torch::Tensor v;              // posterior mean of the source identity
  int attempts = 0;
};

/// Orthogonal identity mapping: v = encode(e_x).mu, r ~ N(0, I) from `seed`,
/// u = r projected off v (resampling on near-parallel draws), output decode(u).
AnonymousIdentity sample_anonymous_identity(const IdentityEmbedding& e_x, IdVae& vae, uint64_t seed);

}  // namespace id2face::idvae

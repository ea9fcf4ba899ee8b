#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "id2face/diffusion.hpp"
#include "id2face/idvae.hpp"
#include "id2face/perception.hpp"

namespace id2face::losses {

// All reductions are means over elements (or over the batch for the per-vector
// terms), so magnitudes do not depend on resolution.

torch::Tensor loss_diff_noise(const torch::Tensor& eps, const torch::Tensor& eps_hat);
torch::Tensor loss_diff_recon(const torch::Tensor& z0, const torch::Tensor& z0_hat);

/// 1 - cos(a, b) per row, averaged over rows. Inputs (d) or (B, d).
torch::Tensor cosine_distance(const torch::Tensor& a, const torch::Tensor& b);

/// 1 - cos(embedder(x_hat), e_ctrl), batch mean. x_hat is the decoded image;
/// with the identity latent decoder that is the recovered clean latent itself.
torch::Tensor loss_id_sim(const torch::Tensor& x_hat, const torch::Tensor& e_ctrl,
                          const perception::IdentityProvider& embedder);

/// Area-average the full-resolution mask down to (h, w), then threshold at 0.5.
/// mask (H, W) or (B, H, W) -> (B, 1, h, w) float in {0, 1}.
torch::Tensor downsample_mask(const torch::Tensor& mask, int64_t h, int64_t w);

/// Mean binary cross-entropy of sigmoid(logits) against the downsampled mask,
/// per scale, then averaged over scales.
torch::Tensor loss_id_region(const std::vector<torch::Tensor>& gate_logits, const torch::Tensor& gt_mask);

struct VaeLoss {
  torch::Tensor recon;  // squared L2 between e_y and e_ctrl, batch mean
  torch::Tensor kl;     // KL(N(mu, sigma^2) || N(0, I)) summed over dims, batch mean
};
VaeLoss loss_vae(const torch::Tensor& e_y, const torch::Tensor& e_ctrl, const idvae::IdLatent& lat);

/// Closed-form Gaussian KL against the standard normal, summed over the last dim.
torch::Tensor gaussian_kl(const torch::Tensor& mu, const torch::Tensor& log_var);

struct LossWeights {
  double recon = 0.1;   // on the clean-latent reconstruction term
  double region = 0.1;  // on the identity-region term
  double kl = 1e-5;

  nlohmann::json to_json() const;
  static LossWeights from_json(const nlohmann::json& j);
};

/// Differentiable per-term values for one step.
struct LossTerms {
  torch::Tensor diff_noise, diff_recon, id_sim, id_region, vae_recon, kl;
};

struct LossBreakdown {
  double diff_noise = 0, diff_recon = 0, id_sim = 0, id_region = 0, vae_recon = 0, kl = 0, total = 0;
  int64_t t = 0;
  double alpha_bar_t = 0;

  static std::string csv_header();
  std::string csv_row(int64_t step) const;
  nlohmann::json to_json() const;
};

struct TotalLoss {
  torch::Tensor total;
  LossBreakdown breakdown;
};

/// total = noise + w.recon * abar * recon + abar * id_sim + w.region * region
///       + vae_recon + w.kl * kl
TotalLoss total_loss(const LossTerms& terms, int64_t t, const diffusion::NoiseSchedule& schedule,
                     const LossWeights& weights = {});

}  // namespace id2face::losses

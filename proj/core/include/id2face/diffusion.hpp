#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include <nlohmann/json.hpp>

#include "id2face/types.hpp"

namespace id2face::diffusion {

/// Linear beta schedule. Timesteps are 1-based: t in [1, T].
class NoiseSchedule {
 public:
  static NoiseSchedule linear(int64_t T, double beta_start, double beta_end);
  static NoiseSchedule from_json(const nlohmann::json& j);
  /// Explicit betas; used for hand-built schedules.
  static NoiseSchedule from_betas(std::vector<double> betas);

  int64_t T() const { return static_cast<int64_t>(beta_.size()); }
  double beta(int64_t t) const { return beta_.at(index(t)); }
  double alpha(int64_t t) const { return alpha_.at(index(t)); }
  double alpha_bar(int64_t t) const { return alpha_bar_.at(index(t)); }
  const std::vector<double>& alpha_bars() const { return alpha_bar_; }

  nlohmann::json to_json() const;

 private:
  size_t index(int64_t t) const;

  double beta_start_ = 0.0;
  double beta_end_ = 0.0;
  std::vector<double> beta_;
  std::vector<double> alpha_;
  std::vector<double> alpha_bar_;
};

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps
LatentTensor add_noise(const LatentTensor& z0, int64_t t, const LatentTensor& eps,
                       const NoiseSchedule& s);

/// Closed-form clean-latent estimate from a noise prediction.
LatentTensor recover_z0(const LatentTensor& z_t, const LatentTensor& eps_hat, int64_t t,
                        const NoiseSchedule& s);

/// Evenly strided timesteps from T down to 1, endpoints included; rounding
/// ties go to the larger timestep. steps == 1 yields {T}.
std::vector<int64_t> ddim_timesteps(int64_t T, int64_t steps);

using EpsPredictor =
    std::function<torch::Tensor(const LatentTensor& z_t, int64_t t, const ConditionTokens& cond)>;

/// Deterministic (eta = 0) DDIM. Starts from seeded Gaussian noise of `shape`
/// and returns the predicted clean latent. `visited`, when given, receives the
/// timesteps in evaluation order.
LatentTensor ddim_sample(const EpsPredictor& denoiser, const ConditionTokens& cond,
                         torch::IntArrayRef shape, int64_t steps, uint64_t seed,
                         const NoiseSchedule& s, std::vector<int64_t>* visited = nullptr);

/// Same trajectory from a caller-provided starting latent. A positive `clip`
/// clamps every clean-latent estimate to [-clip, clip] and re-derives the noise
/// estimate from it, which keeps an imperfect predictor on the data range.
LatentTensor ddim_sample_from(const EpsPredictor& denoiser, const ConditionTokens& cond,
                              LatentTensor z, int64_t steps, const NoiseSchedule& s,
                              std::vector<int64_t>* visited = nullptr, double clip = 0.0);

}  // namespace id2face::diffusion

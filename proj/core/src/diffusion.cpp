#include "id2face/diffusion.hpp"

#include <cmath>
#include <string>

#include "id2face/error.hpp"

namespace id2face::diffusion {

NoiseSchedule NoiseSchedule::linear(int64_t T, double beta_start, double beta_end) {
  if (T < 1) throw ValidationError("schedule needs T >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw ValidationError("schedule needs 0 < beta_start <= beta_end < 1");
  std::vector<double> betas(static_cast<size_t>(T));
  for (int64_t i = 0; i < T; ++i) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(T - 1);
    betas[static_cast<size_t>(i)] = beta_start + (beta_end - beta_start) * frac;
  }
  auto s = from_betas(std::move(betas));
  s.beta_start_ = beta_start;
  s.beta_end_ = beta_end;
  return s;
}

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas) {
  if (betas.empty()) throw ValidationError("schedule needs T >= 1");
  NoiseSchedule s;
  s.beta_ = std::move(betas);
  s.alpha_.resize(s.beta_.size());
  s.alpha_bar_.resize(s.beta_.size());
  double prod = 1.0;
  for (size_t i = 0; i < s.beta_.size(); ++i) {
    if (!(s.beta_[i] > 0.0 && s.beta_[i] < 1.0))
      throw ValidationError("every beta must lie in (0, 1)");
    s.alpha_[i] = 1.0 - s.beta_[i];
    prod *= s.alpha_[i];
    s.alpha_bar_[i] = prod;
  }
  s.beta_start_ = s.beta_.front();
  s.beta_end_ = s.beta_.back();
  return s;
}

NoiseSchedule NoiseSchedule::from_json(const nlohmann::json& j) {
  try {
    return linear(j.at("T").get<int64_t>(), j.at("beta_start").get<double>(),
                  j.at("beta_end").get<double>());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed schedule: ") + e.what());
  }
}

nlohmann::json NoiseSchedule::to_json() const {
  return {{"T", T()}, {"beta_start", beta_start_}, {"beta_end", beta_end_}, {"kind", "linear"}};
}

size_t NoiseSchedule::index(int64_t t) const {
  if (t < 1 || t > T())
    throw RangeError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T()) + "]");
  return static_cast<size_t>(t - 1);
}

LatentTensor add_noise(const LatentTensor& z0, int64_t t, const LatentTensor& eps,
                       const NoiseSchedule& s) {
  if (!z0.sizes().equals(eps.sizes())) throw ValidationError("add_noise: shape mismatch");
  const double ab = s.alpha_bar(t);
  return std::sqrt(ab) * z0 + std::sqrt(1.0 - ab) * eps;
}

LatentTensor recover_z0(const LatentTensor& z_t, const LatentTensor& eps_hat, int64_t t,
                        const NoiseSchedule& s) {
  if (!z_t.sizes().equals(eps_hat.sizes())) throw ValidationError("recover_z0: shape mismatch");
  const double ab = s.alpha_bar(t);
  if (ab <= 1e-12)
    throw NumericalError("recover_z0: alpha_bar at t=" + std::to_string(t) + " is too small");
  return (z_t - std::sqrt(1.0 - ab) * eps_hat) / std::sqrt(ab);
}

std::vector<int64_t> ddim_timesteps(int64_t T, int64_t steps) {
  if (steps < 1 || steps > T)
    throw RangeError("DDIM steps must lie in [1, " + std::to_string(T) + "]");
  if (steps == 1) return {T};
  std::vector<int64_t> ts;
  ts.reserve(static_cast<size_t>(steps));
  for (int64_t i = 0; i < steps; ++i) {
    // Position along [T, 1]; exact integer arithmetic, half rounds up.
    const int64_t num = (T - 1) * (steps - 1 - i);
    const int64_t den = steps - 1;
    const int64_t q = num / den;
    const int64_t rem = num % den;
    ts.push_back(1 + q + (2 * rem >= den ? 1 : 0));
  }
  return ts;
}

LatentTensor ddim_sample(const EpsPredictor& denoiser, const ConditionTokens& cond,
                         torch::IntArrayRef shape, int64_t steps, uint64_t seed,
                         const NoiseSchedule& s, std::vector<int64_t>* visited) {
  auto gen = make_generator(seed);
  auto z = torch::randn(shape, gen, torch::kFloat32);
  return ddim_sample_from(denoiser, cond, std::move(z), steps, s, visited);
}

LatentTensor ddim_sample_from(const EpsPredictor& denoiser, const ConditionTokens& cond,
                              LatentTensor z, int64_t steps, const NoiseSchedule& s,
                              std::vector<int64_t>* visited, double clip) {
  const auto ts = ddim_timesteps(s.T(), steps);
  LatentTensor z0_hat;
  for (size_t k = 0; k < ts.size(); ++k) {
    const int64_t t = ts[k];
    if (visited) visited->push_back(t);
    auto eps_hat = denoiser(z, t, cond);
    if (!all_finite(eps_hat))
      throw NumericalError("denoiser produced non-finite values at timestep " + std::to_string(t));
    z0_hat = recover_z0(z, eps_hat, t, s);
    if (clip > 0.0) {
      z0_hat = z0_hat.clamp(-clip, clip);
      const double ab = s.alpha_bar(t);
      eps_hat = (z - std::sqrt(ab) * z0_hat) / std::sqrt(1.0 - ab);
    }
    if (k + 1 < ts.size()) {
      const double ab_prev = s.alpha_bar(ts[k + 1]);
      z = std::sqrt(ab_prev) * z0_hat + std::sqrt(1.0 - ab_prev) * eps_hat;
    }
  }
  return z0_hat;
}

}  // namespace id2face::diffusion

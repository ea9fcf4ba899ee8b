#include "id2face/losses.hpp"

#include <sstream>

#include "id2face/error.hpp"

namespace id2face::losses {

namespace F = torch::nn::functional;

namespace {

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (!a.sizes().equals(b.sizes())) {
    std::ostringstream os;
    os << what << ": shape mismatch " << a.sizes() << " vs " << b.sizes();
    throw ValidationError(os.str());
  }
}

double scalar(const torch::Tensor& t) { return t.defined() ? t.detach().item<double>() : 0.0; }

}  // namespace

torch::Tensor loss_diff_noise(const torch::Tensor& eps, const torch::Tensor& eps_hat) {
  require_same_shape(eps, eps_hat, "noise loss");
  return (eps_hat - eps).pow(2).mean();
}

torch::Tensor loss_diff_recon(const torch::Tensor& z0, const torch::Tensor& z0_hat) {
  require_same_shape(z0, z0_hat, "reconstruction loss");
  return (z0_hat - z0).pow(2).mean();
}

torch::Tensor cosine_distance(const torch::Tensor& a, const torch::Tensor& b) {
  require_same_shape(a, b, "cosine distance");
  auto a2 = a.dim() == 1 ? a.unsqueeze(0) : a;
  auto b2 = b.dim() == 1 ? b.unsqueeze(0) : b;
  const auto cos = F::cosine_similarity(a2, b2, F::CosineSimilarityFuncOptions().dim(1).eps(1e-12));
  return (1.0 - cos).mean();
}

torch::Tensor loss_id_sim(const torch::Tensor& x_hat, const torch::Tensor& e_ctrl,
                          const perception::IdentityProvider& embedder) {
  auto x = x_hat.dim() == 3 ? x_hat.unsqueeze(0) : x_hat;
  auto e = e_ctrl.dim() == 1 ? e_ctrl.unsqueeze(0) : e_ctrl;
  const auto emb = embedder.embed(x);
  if (!all_finite(emb)) throw DegenerateError("identity loss: embedder produced non-finite values");
  return cosine_distance(emb, e.to(emb.dtype()));
}

torch::Tensor downsample_mask(const torch::Tensor& mask, int64_t h, int64_t w) {
  auto m = mask.dim() == 2 ? mask.unsqueeze(0) : mask;
  if (m.dim() != 3) throw ValidationError("mask must be (H, W) or (B, H, W)");
  if (m.size(1) % h != 0 || m.size(2) % w != 0)
    throw ValidationError("mask resolution is not a multiple of the gate resolution");
  auto pooled = F::adaptive_avg_pool2d(m.unsqueeze(1).to(torch::kFloat64), F::AdaptiveAvgPool2dFuncOptions({h, w}));
  return (pooled >= 0.5).to(torch::kFloat32);
}

torch::Tensor loss_id_region(const std::vector<torch::Tensor>& gate_logits, const torch::Tensor& gt_mask) {
  if (gate_logits.empty()) throw ValidationError("region loss needs at least one scale");
  torch::Tensor sum;
  for (const auto& logits : gate_logits) {
    if (logits.dim() != 4 || logits.size(1) != 1) throw ValidationError("gate logits must be (B, 1, h, w)");
    auto target = downsample_mask(gt_mask, logits.size(2), logits.size(3)).to(logits.dtype());
    if (target.size(0) == 1 && logits.size(0) > 1) target = target.expand_as(logits);
    if (target.size(0) != logits.size(0)) throw ValidationError("region loss: mask batch mismatch");
    auto bce = F::binary_cross_entropy_with_logits(logits, target);
    sum = sum.defined() ? sum + bce : bce;
  }
  return sum / static_cast<double>(gate_logits.size());
}

torch::Tensor gaussian_kl(const torch::Tensor& mu, const torch::Tensor& log_var) {
  require_same_shape(mu, log_var, "KL");
  if (!all_finite(log_var)) throw ValidationError("KL: non-finite log variance");
  return -0.5 * (1.0 + log_var - mu.pow(2) - log_var.exp()).sum(-1);
}

VaeLoss loss_vae(const torch::Tensor& e_y, const torch::Tensor& e_ctrl, const idvae::IdLatent& lat) {
  require_same_shape(e_y, e_ctrl, "VAE reconstruction");
  VaeLoss out;
  out.recon = (e_y - e_ctrl).pow(2).sum(-1).mean();
  out.kl = gaussian_kl(lat.mu, lat.log_var).mean();
  return out;
}

nlohmann::json LossWeights::to_json() const { return {{"recon", recon}, {"region", region}, {"kl", kl}}; }

LossWeights LossWeights::from_json(const nlohmann::json& j) {
  LossWeights w;
  w.recon = j.value("recon", w.recon);
  w.region = j.value("region", w.region);
  w.kl = j.value("kl", w.kl);
  if (w.recon < 0 || w.region < 0 || w.kl < 0) throw ValidationError("loss weights must be nonnegative");
  return w;
}

std::string LossBreakdown::csv_header() {
  return "step,t,alpha_bar_t,diff_noise,diff_recon,id_sim,id_region,vae_recon,kl,total";
}

std::string LossBreakdown::csv_row(int64_t step) const {
  std::ostringstream os;
  os.precision(9);
  os << step << ',' << t << ',' << alpha_bar_t << ',' << diff_noise << ',' << diff_recon << ',' << id_sim
     << ',' << id_region << ',' << vae_recon << ',' << kl << ',' << total;
  return os.str();
}

nlohmann::json LossBreakdown::to_json() const {
  return {{"t", t},         {"alpha_bar_t", alpha_bar_t}, {"diff_noise", diff_noise},
          {"diff_recon", diff_recon}, {"id_sim", id_sim}, {"id_region", id_region},
          {"vae_recon", vae_recon},   {"kl", kl},         {"total", total}};
}

TotalLoss total_loss(const LossTerms& terms, int64_t t, const diffusion::NoiseSchedule& schedule,
                     const LossWeights& weights) {
  const double abar = schedule.alpha_bar(t);
  const auto diff = terms.diff_noise + weights.recon * abar * terms.diff_recon;
  const auto id = abar * terms.id_sim + weights.region * terms.id_region;
  const auto vae = terms.vae_recon + weights.kl * terms.kl;
  TotalLoss out;
  out.total = diff + id + vae;
  auto& b = out.breakdown;
  b.t = t;
  b.alpha_bar_t = abar;
  b.diff_noise = scalar(terms.diff_noise);
  b.diff_recon = scalar(terms.diff_recon);
  b.id_sim = scalar(terms.id_sim);
  b.id_region = scalar(terms.id_region);
  b.vae_recon = scalar(terms.vae_recon);
  b.kl = scalar(terms.kl);
  b.total = scalar(out.total);
  if (!all_finite(out.total)) {
    std::ostringstream os;
    os << "non-finite total loss at t=" << t << ": " << b.to_json().dump();
    throw NumericalError(os.str());
  }
  return out;
}

}  // namespace id2face::losses

#include "id2face/idlr.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "id2face/error.hpp"

namespace id2face::idlr {

namespace F = torch::nn::functional;

void DegradeConfig::validate() const {
  if (blur_sigma_min < 0.0 || blur_sigma_max < blur_sigma_min)
    throw ValidationError("degrade: need 0 <= blur_sigma_min <= blur_sigma_max");
  if (resample_min < 0 || resample_max < resample_min)
    throw ValidationError("degrade: need 0 <= resample_min <= resample_max");
  if (noise_min < 0.0 || noise_max < noise_min)
    throw ValidationError("degrade: need 0 <= noise_min <= noise_max");
}

nlohmann::json DegradeConfig::to_json() const {
  return {{"blur_sigma_min", blur_sigma_min}, {"blur_sigma_max", blur_sigma_max},
          {"resample_min", resample_min},     {"resample_max", resample_max},
          {"noise_min", noise_min},           {"noise_max", noise_max}};
}

DegradeConfig DegradeConfig::from_json(const nlohmann::json& j) {
  DegradeConfig c;
  c.blur_sigma_min = j.value("blur_sigma_min", c.blur_sigma_min);
  c.blur_sigma_max = j.value("blur_sigma_max", c.blur_sigma_max);
  c.resample_min = j.value("resample_min", c.resample_min);
  c.resample_max = j.value("resample_max", c.resample_max);
  c.noise_min = j.value("noise_min", c.noise_min);
  c.noise_max = j.value("noise_max", c.noise_max);
  c.validate();
  return c;
}

torch::Tensor gaussian_kernel1d(double sigma) {
  if (sigma <= 0.0) return torch::ones({1}, torch::kFloat32);
  const int64_t radius = static_cast<int64_t>(std::ceil(3.0 * sigma));
  auto x = torch::arange(-radius, radius + 1, torch::kFloat64);
  auto k = torch::exp(-x.pow(2) / (2.0 * sigma * sigma));
  return (k / k.sum()).to(torch::kFloat32);
}

torch::Tensor blur2d(const torch::Tensor& images, const torch::Tensor& kernel) {
  auto x = images.dim() == 3 ? images.unsqueeze(0) : images;
  const int64_t c = x.size(1);
  const int64_t kh = kernel.size(0);
  const int64_t kw = kernel.size(1);
  if (kh % 2 == 0 || kw % 2 == 0) throw ValidationError("blur kernel sizes must be odd");
  const int64_t ph = kh / 2;
  const int64_t pw = kw / 2;
  if (ph >= x.size(2) || pw >= x.size(3)) throw ValidationError("blur kernel larger than image");
  auto padded = F::pad(x, F::PadFuncOptions({pw, pw, ph, ph}).mode(torch::kReflect));
  auto weight = kernel.to(x.options()).view({1, 1, kh, kw}).repeat({c, 1, 1, 1});
  auto out = F::conv2d(padded, weight, F::Conv2dFuncOptions().groups(c));
  return images.dim() == 3 ? out.squeeze(0) : out;
}

namespace {

torch::Tensor degrade_one(const torch::Tensor& image, uint64_t seed, const DegradeConfig& cfg) {
  auto gen = make_generator(seed);
  const auto u = torch::rand({3}, gen, torch::kFloat64);
  const double sigma = cfg.blur_sigma_min + (cfg.blur_sigma_max - cfg.blur_sigma_min) * u[0].item<double>();
  const int span = cfg.resample_max - cfg.resample_min + 1;
  const int factor = cfg.resample_min + std::min(span - 1, static_cast<int>(u[1].item<double>() * span));
  const double noise = cfg.noise_min + (cfg.noise_max - cfg.noise_min) * u[2].item<double>();

  auto x = image.unsqueeze(0);
  if (sigma > 0.0) {
    const auto k = gaussian_kernel1d(sigma);
    x = blur2d(blur2d(x, k.view({1, -1})), k.view({-1, 1}));
  }
  if (factor >= 2) {
    const int64_t h = x.size(2);
    const int64_t w = x.size(3);
    const int64_t dh = std::max<int64_t>(1, (h + factor / 2) / factor);
    const int64_t dw = std::max<int64_t>(1, (w + factor / 2) / factor);
    auto small = F::interpolate(x, F::InterpolateFuncOptions().size(std::vector<int64_t>{dh, dw}).mode(torch::kArea));
    x = F::interpolate(small, F::InterpolateFuncOptions()
                                  .size(std::vector<int64_t>{h, w})
                                  .mode(torch::kBilinear)
                                  .align_corners(false));
  }
  if (noise > 0.0) x = x + noise * torch::randn(x.sizes(), gen, x.options());
  return x.squeeze(0);
}

}  // namespace

ImageTensor degrade(const ImageTensor& image, const torch::Tensor& mask, uint64_t seed,
                    const DegradeConfig& cfg) {
  cfg.validate();
  const bool batched = image.dim() == 4;
  auto x = batched ? image : image.unsqueeze(0);
  auto m = mask.dim() == 2 ? mask.unsqueeze(0).expand({x.size(0), mask.size(0), mask.size(1)}) : mask;
  if (m.size(0) != x.size(0) || m.size(1) != x.size(2) || m.size(2) != x.size(3))
    throw ValidationError("degrade: image and mask shapes differ");
  std::vector<torch::Tensor> rows;
  for (int64_t i = 0; i < x.size(0); ++i) {
    const uint64_t s = batched ? derive_seed(seed, static_cast<uint64_t>(i)) : seed;
    const auto degraded = degrade_one(x[i], s, cfg);
    const auto inside = (m[i] > 0.5).unsqueeze(0).expand_as(x[i]);
    rows.push_back(torch::where(inside, degraded, x[i]));
  }
  auto out = torch::stack(rows);
  return batched ? out : out.squeeze(0);
}

torch::Tensor fourier_features(const torch::Tensor& points, int64_t n_freq) {
  if (points.size(-1) != 2) throw ValidationError("landmarks must have two coordinates");
  if (n_freq < 1) throw ValidationError("n_freq must be >= 1");
  if ((points < 0).any().item<bool>() || (points > 1).any().item<bool>())
    throw ValidationError("landmark coordinates must lie in [0, 1]");
  auto freqs = torch::pow(2.0, torch::arange(n_freq, points.options())) * std::numbers::pi;
  auto angles = points.unsqueeze(-1) * freqs;  // (..., K, 2, n_freq)
  auto feats = torch::stack({torch::sin(angles), torch::cos(angles)}, -1);  // (..., K, 2, n_freq, 2)
  return feats.flatten(-3);
}

IdlrImpl::IdlrImpl(const IdlrOptions& options) : options_(options) {
  const auto d = options_.d_tok;
  landmark_linear_ = register_module("landmark_linear", torch::nn::Linear(4 * options_.n_freq, d));
  semantic_proj_ = register_module("semantic_proj", Mlp(d, d, d));
  landmark_proj_ = register_module("landmark_proj", Mlp(d, d, d));
  nonid_attn_ = register_module("nonid_attn", Attention(AttentionOptions(d, d, options_.d_attn, options_.heads)));
  id_proj_ = register_module("id_proj", Mlp(options_.d_id, d, options_.n_id_tokens * d, options_.id_proj_bias));
  align_nonid_ = register_module("align_nonid", Attention(AttentionOptions(d, d, options_.d_attn, options_.heads)));
  align_id_ = register_module("align_id", Attention(AttentionOptions(d, d, options_.d_attn, options_.heads)));
}

torch::Tensor IdlrImpl::fourier_landmark_embed(const torch::Tensor& landmarks) {
  const auto feats = fourier_features(landmarks.to(landmark_linear_->weight.dtype()), options_.n_freq);
  return landmark_linear_(feats);
}

torch::Tensor IdlrImpl::nonid_embedding(const torch::Tensor& semantic_tokens,
                                        const torch::Tensor& landmarks, torch::Tensor* weights) {
  if (semantic_tokens.dim() != 3 || semantic_tokens.size(-1) != options_.d_tok)
    throw ValidationError("semantic tokens must be (B, N_s, d_tok)");
  if (landmarks.dim() != 3 || landmarks.size(0) != semantic_tokens.size(0))
    throw ValidationError("landmarks must be (B, K, 2) with a matching batch");
  const auto q = semantic_proj_(semantic_tokens);
  const auto kv = landmark_proj_(fourier_landmark_embed(landmarks));
  return q + nonid_attn_(q, kv, weights);
}

torch::Tensor IdlrImpl::project_identity(const torch::Tensor& e_ctrl) {
  auto e = e_ctrl.dim() == 1 ? e_ctrl.unsqueeze(0) : e_ctrl;
  if (e.size(-1) != options_.d_id) throw ValidationError("identity projection: wrong embedding dim");
  return id_proj_(e).view({e.size(0), options_.n_id_tokens, options_.d_tok});
}

ConditionTokens IdlrImpl::align(const torch::Tensor& e_non_id, const torch::Tensor& e_id,
                                torch::Tensor* nonid_weights, torch::Tensor* id_weights) {
  ConditionTokens out;
  out.non_id = e_non_id + align_nonid_(e_non_id, e_id, nonid_weights);
  out.id = e_id + align_id_(e_id, e_non_id, id_weights);
  return out;
}

torch::Tensor build_nonid_embedding(const ImageTensor& x_d, const torch::Tensor& landmarks,
                                    Idlr& idlr, const perception::SemanticProvider& semantic,
                                    torch::Tensor* weights) {
  auto x = x_d.dim() == 3 ? x_d.unsqueeze(0) : x_d;
  auto lm = landmarks.dim() == 2 ? landmarks.unsqueeze(0) : landmarks;
  if (semantic.token_dim() != idlr->options().d_tok)
    throw ValidationError("semantic provider token dim differs from d_tok");
  return idlr->nonid_embedding(semantic.features(x), lm, weights);
}

}  // namespace id2face::idlr

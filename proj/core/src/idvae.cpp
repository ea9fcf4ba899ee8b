#include "id2face/idvae.hpp"

#include <string>

#include "id2face/error.hpp"

namespace id2face::idvae {

IdVaeImpl::IdVaeImpl(const IdVaeOptions& options) : options_(options) {
  if (options_.d_id <= 0 || options_.d_lat <= 0 || options_.hidden <= 0)
    throw ValidationError("ID-VAE dims must be positive");
  using torch::nn::Linear;
  using torch::nn::SiLU;
  encoder_ = register_module(
      "encoder", torch::nn::Sequential(Linear(options_.d_id, options_.hidden), SiLU(),
                                       Linear(options_.hidden, options_.hidden), SiLU(),
                                       Linear(options_.hidden, 2 * options_.d_lat)));
  decoder_ = register_module(
      "decoder", torch::nn::Sequential(Linear(options_.d_lat, options_.hidden), SiLU(),
                                       Linear(options_.hidden, options_.hidden), SiLU(),
                                       Linear(options_.hidden, options_.d_id)));
}

IdLatent IdVaeImpl::encode(const torch::Tensor& e_id) {
  if (e_id.size(-1) != options_.d_id)
    throw ValidationError("ID-VAE encode: expected last dim " + std::to_string(options_.d_id));
  if (!all_finite(e_id)) throw ValidationError("ID-VAE encode: non-finite input");
  const auto out = encoder_->forward(e_id);
  auto halves = out.chunk(2, -1);
  return {halves[0], halves[1].clamp(-kLogVarClamp, kLogVarClamp)};
}

torch::Tensor IdVaeImpl::decode_raw(const torch::Tensor& latent) {
  if (latent.size(-1) != options_.d_lat)
    throw ValidationError("ID-VAE decode: expected last dim " + std::to_string(options_.d_lat));
  return decoder_->forward(latent);
}

torch::Tensor IdVaeImpl::decode(const torch::Tensor& latent) {
  namespace F = torch::nn::functional;
  return F::normalize(decode_raw(latent), F::NormalizeFuncOptions().dim(-1).eps(1e-12));
}

torch::Tensor reparameterize(const IdLatent& lat, const torch::Tensor& noise, bool training) {
  if (!training || !noise.defined()) return lat.mu;
  if (!noise.sizes().equals(lat.mu.sizes())) throw ValidationError("reparameterize: noise shape mismatch");
  const auto log_var = lat.log_var.clamp(-kLogVarClamp, kLogVarClamp);
  return lat.mu + torch::exp(0.5 * log_var) * noise;
}

Projection orthogonal_project(const torch::Tensor& r, const torch::Tensor& v, double tau_min) {
  if (!r.sizes().equals(v.sizes())) throw ValidationError("orthogonal_project: shape mismatch");
  const auto vv = torch::dot(v.flatten(), v.flatten());
  if (std::sqrt(vv.item<double>()) <= 1e-8)
    throw DegenerateError("orthogonal_project: direction vector has (near) zero norm");
  const auto coeff = torch::dot(r.flatten(), v.flatten()) / vv;
  Projection p;
  p.u = r - coeff * v;
  p.near_parallel = p.u.norm().item<double>() <= tau_min;
  return p;
}

AnonymousIdentity sample_anonymous_identity(const IdentityEmbedding& e_x, IdVae& vae, uint64_t seed) {
  torch::NoGradGuard no_grad;
  auto vec = e_x.vector;
  if (vec.dim() != 1) throw ValidationError("sample_anonymous_identity expects a single (d_id) vector");
  const auto v = vae->encode(vec.to(torch::kFloat32)).mu;
  auto gen = make_generator(seed);
  AnonymousIdentity out;
  out.v = v;
  for (int attempt = 1; attempt <= kMaxProjectionAttempts; ++attempt) {
    auto r = torch::randn({vae->options().d_lat}, gen, torch::kFloat32);
    auto proj = orthogonal_project(r, v);
    if (proj.near_parallel) continue;
    out.r = r;
    out.u = proj.u;
    out.attempts = attempt;
    out.embedding = {vae->decode(proj.u), true};
    return out;
  }
  throw SamplingFailure("orthogonal identity mapping: " + std::to_string(kMaxProjectionAttempts) +
                        " consecutive near-parallel draws");
}

}  // namespace id2face::idvae

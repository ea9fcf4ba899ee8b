#include "id2face/iglh.hpp"

#include <cmath>
#include <numeric>
#include <unordered_set>

#include "id2face/error.hpp"

namespace id2face::iglh {

namespace F = torch::nn::functional;

int64_t norm_groups(int64_t channels) {
  for (int64_t g : {8, 4, 2}) {
    if (channels % g == 0) return g;
  }
  return 1;
}

namespace {

torch::nn::GroupNorm group_norm(int64_t channels) {
  return torch::nn::GroupNorm(torch::nn::GroupNormOptions(norm_groups(channels), channels));
}

torch::nn::Conv2d conv3x3(int64_t in, int64_t out, int64_t stride = 1) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

// (B, C, h, w) <-> (B, h*w, C)
torch::Tensor to_tokens(const torch::Tensor& f) { return f.flatten(2).transpose(1, 2); }
torch::Tensor to_map(const torch::Tensor& tokens, int64_t h, int64_t w) {
  return tokens.transpose(1, 2).reshape({tokens.size(0), tokens.size(2), h, w});
}

}  // namespace

IglhBlockImpl::IglhBlockImpl(const IglhBlockOptions& options) : options_(options) {
  const auto c = options_.channels;
  const auto d = options_.d_tok;
  norm_ = register_module("norm", group_norm(c));
  pos_bias_ = register_parameter("pos_bias", 0.02 * torch::randn({1, options_.spatial * options_.spatial, c}));
  self_attn_ = register_module("self_attn", Attention(AttentionOptions(c, c, options_.d_attn, options_.heads)));
  gate_ = register_module("gate", Mlp(c, c, 1));
  tok_norm_non_id_ = register_module("tok_norm_non_id", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
  tok_norm_id_ = register_module("tok_norm_id", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
  tok_attn_non_id_ = register_module("tok_attn_non_id", Attention(AttentionOptions(d, d, options_.d_attn, options_.heads)));
  tok_attn_id_ = register_module("tok_attn_id", Attention(AttentionOptions(d, d, options_.d_attn, options_.heads)));
  cross_norm_ = register_module("cross_norm", group_norm(c));
  cross_non_id_ = register_module("cross_non_id", Attention(AttentionOptions(c, d, options_.d_attn, options_.heads)));
  cross_id_ = register_module("cross_id", Attention(AttentionOptions(c, d, options_.d_attn, options_.heads)));
}

IglhOutput IglhBlockImpl::forward(const torch::Tensor& f, const ConditionTokens& cond) {
  if (f.dim() != 4 || f.size(1) != options_.channels || f.size(2) != options_.spatial ||
      f.size(3) != options_.spatial)
    throw ValidationError(options_.name + ": feature map shape does not match the block");
  const int64_t h = f.size(2);
  const int64_t w = f.size(3);

  const auto normed = to_tokens(norm_(f)) + pos_bias_;
  const auto x = to_tokens(f) + self_attn_(normed, normed);
  const auto f_prime = to_map(x, h, w);

  IglhOutput out;
  out.logits = to_map(gate_(x), h, w);
  if (forced_logit_) out.logits = torch::full_like(out.logits, *forced_logit_);
  out.mask = torch::sigmoid(out.logits);

  const auto nt = tok_norm_non_id_(cond.non_id);
  const auto it = tok_norm_id_(cond.id);
  const auto t_non_id = cond.non_id + tok_attn_non_id_(nt, nt);
  const auto t_id = cond.id + tok_attn_id_(it, it);

  const auto q = to_tokens(cross_norm_(f_prime));
  out.f_non_id = f_prime + to_map(cross_non_id_(q, t_non_id), h, w);
  out.f_id = f_prime + to_map(cross_id_(q, t_id), h, w);
  out.f_next = out.mask * out.f_id + (1.0 - out.mask) * out.f_non_id;

  if (!all_finite(out.f_next) || !all_finite(out.logits))
    throw NumericalError(options_.name + ": non-finite activations");
  return out;
}

SpatialSelfAttentionImpl::SpatialSelfAttentionImpl(int64_t channels, int64_t spatial, int64_t d_attn,
                                                   int64_t heads) {
  norm_ = register_module("norm", group_norm(channels));
  pos_bias_ = register_parameter("pos_bias", 0.02 * torch::randn({1, spatial * spatial, channels}));
  attn_ = register_module("attn", Attention(AttentionOptions(channels, channels, d_attn, heads)));
}

torch::Tensor SpatialSelfAttentionImpl::forward(const torch::Tensor& x) {
  const auto tokens = to_tokens(norm_(x)) + pos_bias_;
  return x + to_map(attn_(tokens, tokens), x.size(2), x.size(3));
}

ResBlockImpl::ResBlockImpl(int64_t in_channels, int64_t out_channels, int64_t time_dim) {
  norm1_ = register_module("norm1", group_norm(in_channels));
  conv1_ = register_module("conv1", conv3x3(in_channels, out_channels));
  time_proj_ = register_module("time_proj", torch::nn::Linear(time_dim, out_channels));
  norm2_ = register_module("norm2", group_norm(out_channels));
  conv2_ = register_module("conv2", conv3x3(out_channels, out_channels));
  if (in_channels != out_channels)
    skip_ = register_module("skip", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, out_channels, 1)));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& t_emb) {
  auto h = conv1_(torch::silu(norm1_(x)));
  h = h + time_proj_(t_emb).unsqueeze(-1).unsqueeze(-1);
  h = conv2_(torch::silu(norm2_(h)));
  return (skip_ ? skip_(x) : x) + h;
}

torch::Tensor timestep_embedding(const torch::Tensor& t, int64_t dim) {
  const int64_t half = dim / 2;
  auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, torch::kFloat32) / half);
  auto args = t.to(torch::kFloat32).unsqueeze(-1) * freqs.unsqueeze(0);
  auto emb = torch::cat({torch::sin(args), torch::cos(args)}, -1);
  if (dim % 2 == 1) emb = F::pad(emb, F::PadFuncOptions({0, 1}));
  return emb;
}

void DenoiserOptions::validate() const {
  if (channels.empty()) throw ValidationError("denoiser needs at least one scale");
  if (image_size % (int64_t{1} << (channels.size() - 1)) != 0)
    throw ValidationError("image size must be divisible by 2^(scales - 1)");
  if (in_channels <= 0 || time_dim <= 0 || d_tok <= 0 || T <= 0)
    throw ValidationError("denoiser dims must be positive");
  for (auto s : encoder_attention) {
    if (s < 0 || s >= static_cast<int64_t>(channels.size()))
      throw ValidationError("encoder attention scale out of range");
  }
}

nlohmann::json DenoiserOptions::to_json() const {
  return {{"in_channels", in_channels}, {"image_size", image_size}, {"channels", channels},
          {"time_dim", time_dim},       {"d_tok", d_tok},           {"d_attn", d_attn},
          {"heads", heads},             {"encoder_attention", encoder_attention}, {"T", T}};
}

DenoiserOptions DenoiserOptions::from_json(const nlohmann::json& j) {
  DenoiserOptions o;
  o.in_channels = j.value("in_channels", o.in_channels);
  o.image_size = j.value("image_size", o.image_size);
  o.channels = j.value("channels", o.channels);
  o.time_dim = j.value("time_dim", o.time_dim);
  o.d_tok = j.value("d_tok", o.d_tok);
  o.d_attn = j.value("d_attn", o.d_attn);
  o.heads = j.value("heads", o.heads);
  o.encoder_attention = j.value("encoder_attention", o.encoder_attention);
  o.T = j.value("T", o.T);
  o.validate();
  return o;
}

DenoiserImpl::DenoiserImpl(const DenoiserOptions& options) : options_(options) {
  options_.validate();
  const auto& c = options_.channels;
  const auto J = static_cast<int64_t>(c.size());
  const auto td = options_.time_dim;
  time_mlp_ = register_module("time_mlp", torch::nn::Sequential(torch::nn::Linear(c[0], td), torch::nn::SiLU(),
                                                                torch::nn::Linear(td, td)));
  in_conv_ = register_module("in_conv", conv3x3(options_.in_channels, c[0]));

  const std::unordered_set<int64_t> attn_scales(options_.encoder_attention.begin(),
                                                options_.encoder_attention.end());
  for (int64_t i = 0; i < J; ++i) {
    const auto si = std::to_string(i);
    const int64_t spatial = options_.image_size >> i;
    enc_blocks_.push_back(register_module("enc" + si, ResBlock(i == 0 ? c[0] : c[i - 1], c[i], td)));
    if (attn_scales.count(i)) {
      enc_attn_.push_back(register_module(
          "enc_attn" + si, SpatialSelfAttention(c[i], spatial, options_.d_attn, options_.heads)));
    } else {
      enc_attn_.emplace_back(nullptr);
    }
    if (i + 1 < J) down_.push_back(register_module("down" + si, conv3x3(c[i], c[i], 2)));
  }
  mid_ = register_module("mid", ResBlock(c[J - 1], c[J - 1], td));

  for (int64_t d = 0; d < J; ++d) {
    const int64_t i = J - 1 - d;
    const auto sd = std::to_string(d);
    const int64_t in_ch = (d == 0 ? c[J - 1] : c[i + 1]) + c[i];
    dec_blocks_.push_back(register_module("dec" + sd, ResBlock(in_ch, c[i], td)));
    IglhBlockOptions bo;
    bo.channels = c[i];
    bo.spatial = options_.image_size >> i;
    bo.d_tok = options_.d_tok;
    bo.d_attn = options_.d_attn;
    bo.heads = options_.heads;
    bo.name = "iglh" + sd + " (" + std::to_string(bo.spatial) + "x" + std::to_string(bo.spatial) + ")";
    iglh_.push_back(register_module("iglh" + sd, IglhBlock(bo)));
    if (i > 0) up_.push_back(register_module("up" + sd, conv3x3(c[i], c[i])));
  }
  out_norm_ = register_module("out_norm", group_norm(c[0]));
  out_conv_ = register_module("out_conv", conv3x3(c[0], options_.in_channels));
  torch::NoGradGuard no_grad;
  out_conv_->weight.zero_();
  out_conv_->bias.zero_();
}

DenoiserOutput DenoiserImpl::forward(const torch::Tensor& z_t, int64_t t, const ConditionTokens& cond) {
  return forward(z_t, torch::full({z_t.size(0)}, t, torch::kInt64), cond);
}

DenoiserOutput DenoiserImpl::forward(const torch::Tensor& z_t, const torch::Tensor& t,
                                     const ConditionTokens& cond) {
  const auto S = options_.image_size;
  if (z_t.dim() != 4 || z_t.size(1) != options_.in_channels || z_t.size(2) != S || z_t.size(3) != S)
    throw ValidationError("denoiser: latent must be (B, " + std::to_string(options_.in_channels) + ", " +
                          std::to_string(S) + ", " + std::to_string(S) + ")");
  const int64_t B = z_t.size(0);
  if (!cond.non_id.defined() || !cond.id.defined() || cond.non_id.size(0) != B || cond.id.size(0) != B)
    throw ValidationError("denoiser: conditioning batch does not match the latent batch");
  if (cond.non_id.size(-1) != options_.d_tok || cond.id.size(-1) != options_.d_tok)
    throw ValidationError("denoiser: conditioning token dim differs from d_tok");
  auto tt = t.numel() == 1 ? t.reshape({1}).expand({B}) : t;
  if (tt.numel() != B) throw ValidationError("denoiser: one timestep per sample expected");
  if ((tt < 1).any().item<bool>() || (tt > options_.T).any().item<bool>())
    throw RangeError("denoiser: timestep outside [1, " + std::to_string(options_.T) + "]");

  const auto J = num_scales();
  const auto t_emb = time_mlp_->forward(timestep_embedding(tt, options_.channels[0]).to(z_t.dtype()));

  auto h = in_conv_(z_t);
  std::vector<torch::Tensor> skips;
  for (int64_t i = 0; i < J; ++i) {
    h = enc_blocks_[i](h, t_emb);
    if (enc_attn_[i]) h = enc_attn_[i](h);
    skips.push_back(h);
    if (i + 1 < J) h = down_[i](h);
  }
  h = mid_(h, t_emb);

  DenoiserOutput out;
  for (int64_t d = 0; d < J; ++d) {
    const int64_t i = J - 1 - d;
    h = dec_blocks_[d](torch::cat({h, skips[i]}, 1), t_emb);
    auto g = iglh_[d](h, cond);
    h = g.f_next;
    out.gate_logits.push_back(g.logits);
    out.gate_masks.push_back(g.mask);
    if (i > 0) {
      h = F::interpolate(h, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
      h = up_[d](h);
    }
  }
  out.eps_hat = out_conv_(torch::silu(out_norm_(h)));
  return out;
}

std::vector<torch::Tensor> DenoiserImpl::iglh_parameters() const {
  std::vector<torch::Tensor> params;
  for (const auto& b : iglh_) {
    for (const auto& p : b->parameters()) params.push_back(p);
  }
  return params;
}

std::vector<torch::Tensor> DenoiserImpl::backbone_parameters() const {
  std::vector<torch::Tensor> params;
  for (const auto& item : named_parameters()) {
    if (item.key().rfind("iglh", 0) != 0) params.push_back(item.value());
  }
  return params;
}

}  // namespace id2face::iglh

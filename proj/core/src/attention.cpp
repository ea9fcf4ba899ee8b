#include "id2face/attention.hpp"

#include <cmath>

#include "id2face/error.hpp"

namespace id2face {

AttentionImpl::AttentionImpl(const AttentionOptions& options) : options_(options) {
  if (options_.attn_dim() % options_.heads() != 0)
    throw ValidationError("attention dim must be divisible by the head count");
  if (options_.out_dim() < 0) options_.out_dim(options_.query_dim());
  q_ = register_module("q", torch::nn::Linear(options_.query_dim(), options_.attn_dim()));
  k_ = register_module("k", torch::nn::Linear(options_.kv_dim(), options_.attn_dim()));
  v_ = register_module("v", torch::nn::Linear(options_.kv_dim(), options_.attn_dim()));
  o_ = register_module("o", torch::nn::Linear(options_.attn_dim(), options_.out_dim()));
}

torch::Tensor AttentionImpl::forward(const torch::Tensor& query, const torch::Tensor& context,
                                     torch::Tensor* weights) {
  const int64_t b = query.size(0);
  const int64_t nq = query.size(1);
  const int64_t nk = context.size(1);
  const int64_t h = options_.heads();
  const int64_t dh = options_.attn_dim() / h;

  auto split = [&](const torch::Tensor& x, int64_t n) {
    return x.view({b, n, h, dh}).transpose(1, 2);  // (B, h, N, dh)
  };
  const auto qh = split(q_(query), nq);
  const auto kh = split(k_(context), nk);
  const auto vh = split(v_(context), nk);

  torch::Tensor out;
  if (weights) {
    const auto scores = torch::matmul(qh, kh.transpose(-2, -1)) / std::sqrt(static_cast<double>(dh));
    *weights = torch::softmax(scores, -1);
    out = torch::matmul(*weights, vh);
  } else {
    out = at::scaled_dot_product_attention(qh, kh, vh);
  }
  out = out.transpose(1, 2).reshape({b, nq, options_.attn_dim()});
  return o_(out);
}

torch::Tensor AttentionImpl::projected_values(const torch::Tensor& context) {
  return o_(v_(context));
}

MlpImpl::MlpImpl(int64_t in_dim, int64_t hidden, int64_t out_dim, bool bias) {
  fc1_ = register_module("fc1", torch::nn::Linear(torch::nn::LinearOptions(in_dim, hidden).bias(bias)));
  fc2_ = register_module("fc2", torch::nn::Linear(torch::nn::LinearOptions(hidden, out_dim).bias(bias)));
}

torch::Tensor MlpImpl::forward(const torch::Tensor& x) { return fc2_(torch::relu(fc1_(x))); }

}  // namespace id2face

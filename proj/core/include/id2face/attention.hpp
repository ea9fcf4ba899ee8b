#pragma once

#include <torch/torch.h>

namespace id2face {

struct AttentionOptions {
  AttentionOptions(int64_t query_dim, int64_t kv_dim, int64_t attn_dim, int64_t heads)
      : query_dim_(query_dim), kv_dim_(kv_dim), attn_dim_(attn_dim), heads_(heads) {}
  TORCH_ARG(int64_t, query_dim);
  TORCH_ARG(int64_t, kv_dim);
  TORCH_ARG(int64_t, attn_dim);
  TORCH_ARG(int64_t, heads);
  // Output projection width; defaults to query_dim.
  TORCH_ARG(int64_t, out_dim) = -1;
};

/// Multi-head scaled dot-product attention with learned Q/K/V/O projections.
/// Inputs are token-major: query (B, Nq, query_dim), context (B, Nk, kv_dim).
class AttentionImpl : public torch::nn::Module {
 public:
  explicit AttentionImpl(const AttentionOptions& options);

  /// When `weights` is non-null the attention probabilities (B, heads, Nq, Nk)
  /// are written there and the explicit softmax path is used.
  torch::Tensor forward(const torch::Tensor& query, const torch::Tensor& context,
                        torch::Tensor* weights = nullptr);

  /// Per-key value vectors after the value and output projections, i.e. the
  /// output each query would receive if it attended to that key alone.
  torch::Tensor projected_values(const torch::Tensor& context);

  const AttentionOptions& options() const { return options_; }
  torch::nn::Linear q() { return q_; }
  torch::nn::Linear k() { return k_; }
  torch::nn::Linear v() { return v_; }
  torch::nn::Linear o() { return o_; }

 private:
  AttentionOptions options_;
  torch::nn::Linear q_{nullptr}, k_{nullptr}, v_{nullptr}, o_{nullptr};
};
TORCH_MODULE(Attention);

/// Small perceptron used for token projections: Linear -> ReLU -> Linear.
class MlpImpl : public torch::nn::Module {
 public:
  MlpImpl(int64_t in_dim, int64_t hidden, int64_t out_dim, bool bias = true);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Linear fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(Mlp);

}  // namespace id2face

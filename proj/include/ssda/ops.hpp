#pragma once

#include <string>
#include <vector>

#include "ssda/rng.hpp"
#include "ssda/tensor.hpp"

namespace ssda {

/// y = x W + b applied along the trailing dimension. x is treated as
/// [rows, Cin] with rows = numel / Cin; the output keeps the leading dims.
Tensor linear_forward(const Tensor& x, const Parameter& weight, const Parameter& bias);

/// Returns grad wrt x and accumulates grads into weight and bias.
Tensor linear_backward(const Tensor& x, Parameter& weight, Parameter& bias,
                       const Tensor& grad_out);

/// 3x3 convolution, stride 2, zero padding 1, channel-preserving.
/// input [H,W,C], kernel [3,3,C,C] (ky,kx,cin,cout), bias [C].
/// Output [ceil(H/2), ceil(W/2), C].
Tensor conv2d_stride2_forward(const Tensor& input, const Parameter& kernel,
                              const Parameter& bias);
Tensor conv2d_stride2_backward(const Tensor& input, Parameter& kernel, Parameter& bias,
                               const Tensor& grad_out);

/// Row-wise softmax over the trailing dimension, stabilized by max-subtraction.
Tensor softmax(const Tensor& logits);
/// Given softmax output p and upstream grad, returns grad wrt logits.
Tensor softmax_backward(const Tensor& probs, const Tensor& grad_out);

double sigmoid(double x);
double softplus(double x);
double gelu(double x);
double gelu_grad(double x);

Parameter make_weight(const std::string& name, int fan_in, int fan_out, RandomStream& rng);
Parameter make_bias(const std::string& name, int n, double fill = 0.0);
Parameter make_conv_kernel(const std::string& name, int channels, RandomStream& rng);

/// Standard multi-head scaled dot-product self-attention over N queries with
/// output projection and residual add.
struct SelfAttention {
  int channels = 0;
  int heads = 0;
  Parameter wq, bq, wk, bk, wv, bv, wo, bo;

  SelfAttention() = default;
  SelfAttention(int channels, int heads, const std::string& prefix, RandomStream& rng);
  std::vector<Parameter*> parameters();
};

struct SelfAttentionCache {
  Tensor x;       // [N,C]
  Tensor q, k, v; // [N,C]
  Tensor attn;    // [heads,N,N], rows sum to 1
  Tensor concat;  // [N,C]
};

Tensor self_attention_forward(const SelfAttention& layer, const Tensor& x,
                              SelfAttentionCache* cache);
Tensor self_attention_backward(SelfAttention& layer, const SelfAttentionCache& cache,
                               const Tensor& grad_out);

}  // namespace ssda

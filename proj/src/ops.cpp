#include "ssda/ops.hpp"

#include <cmath>

namespace ssda {

namespace {

void require_matrix(const Parameter& p, const std::string& context) {
  if (p.tensor.rank() != 2) {
    throw DimensionError(context + ": parameter " + p.name + " must be rank 2, got shape " +
                         shape_str(p.tensor.shape));
  }
}

}  // namespace

Tensor linear_forward(const Tensor& x, const Parameter& weight, const Parameter& bias) {
  require_matrix(weight, "linear");
  const int cin = weight.tensor.dim(0);
  const int cout = weight.tensor.dim(1);
  if (x.rank() == 0 || x.shape.back() != cin) {
    throw DimensionError("linear: input shape " + shape_str(x.shape) +
                         " incompatible with weight shape " + shape_str(weight.tensor.shape));
  }
  if (bias.tensor.shape != Shape{cout}) {
    throw DimensionError("linear: bias shape " + shape_str(bias.tensor.shape) +
                         " does not match output dim " + std::to_string(cout));
  }
  const int rows = x.numel() / cin;
  Shape out_shape = x.shape;
  out_shape.back() = cout;
  Tensor out(out_shape);
  const double* xv = x.values.data();
  const double* wv = weight.tensor.values.data();
  const double* bv = bias.tensor.values.data();
  double* ov = out.values.data();
  for (int r = 0; r < rows; ++r) {
    const double* xr = xv + static_cast<std::size_t>(r) * cin;
    double* orow = ov + static_cast<std::size_t>(r) * cout;
    for (int j = 0; j < cout; ++j) orow[j] = bv[j];
    for (int i = 0; i < cin; ++i) {
      const double xi = xr[i];
      const double* wrow = wv + static_cast<std::size_t>(i) * cout;
      for (int j = 0; j < cout; ++j) orow[j] += xi * wrow[j];
    }
  }
  out.check_finite("linear");
  return out;
}

Tensor linear_backward(const Tensor& x, Parameter& weight, Parameter& bias,
                       const Tensor& grad_out) {
  const int cin = weight.tensor.dim(0);
  const int cout = weight.tensor.dim(1);
  const int rows = x.numel() / cin;
  if (grad_out.numel() != rows * cout) {
    throw DimensionError("linear backward: grad shape " + shape_str(grad_out.shape) +
                         " incompatible with weight shape " + shape_str(weight.tensor.shape));
  }
  weight.ensure_grad();
  bias.ensure_grad();
  Tensor grad_x(x.shape);
  const double* xv = x.values.data();
  const double* wv = weight.tensor.values.data();
  const double* gv = grad_out.values.data();
  double* gx = grad_x.values.data();
  double* gw = weight.tensor.grad.data();
  double* gb = bias.tensor.grad.data();
  for (int r = 0; r < rows; ++r) {
    const double* xr = xv + static_cast<std::size_t>(r) * cin;
    const double* grow = gv + static_cast<std::size_t>(r) * cout;
    double* gxr = gx + static_cast<std::size_t>(r) * cin;
    for (int j = 0; j < cout; ++j) gb[j] += grow[j];
    for (int i = 0; i < cin; ++i) {
      const double* wrow = wv + static_cast<std::size_t>(i) * cout;
      double* gwrow = gw + static_cast<std::size_t>(i) * cout;
      double acc = 0.0;
      const double xi = xr[i];
      for (int j = 0; j < cout; ++j) {
        acc += grow[j] * wrow[j];
        gwrow[j] += xi * grow[j];
      }
      gxr[i] += acc;
    }
  }
  return grad_x;
}

Tensor conv2d_stride2_forward(const Tensor& input, const Parameter& kernel,
                              const Parameter& bias) {
  if (input.rank() != 3) {
    throw DimensionError("conv2d: input must be [H,W,C], got " + shape_str(input.shape));
  }
  const int h = input.dim(0), w = input.dim(1), c = input.dim(2);
  if (h < 3 || w < 3) {
    throw DimensionError("conv2d: input " + shape_str(input.shape) +
                         " smaller than 3x3 kernel after padding");
  }
  if (kernel.tensor.shape != Shape{3, 3, c, c}) {
    throw DimensionError("conv2d: kernel shape " + shape_str(kernel.tensor.shape) +
                         " does not match input " + shape_str(input.shape));
  }
  if (bias.tensor.shape != Shape{c}) {
    throw DimensionError("conv2d: bias shape " + shape_str(bias.tensor.shape) +
                         " does not match channels " + std::to_string(c));
  }
  const int ho = (h + 1) / 2;
  const int wo = (w + 1) / 2;
  Tensor out(Shape{ho, wo, c});
  const double* in = input.values.data();
  const double* kv = kernel.tensor.values.data();
  const double* bv = bias.tensor.values.data();
  double* ov = out.values.data();
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      double* orow = ov + (static_cast<std::size_t>(oy) * wo + ox) * c;
      for (int co = 0; co < c; ++co) orow[co] = bv[co];
      for (int ky = 0; ky < 3; ++ky) {
        const int iy = 2 * oy + ky - 1;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int ix = 2 * ox + kx - 1;
          if (ix < 0 || ix >= w) continue;
          const double* irow = in + (static_cast<std::size_t>(iy) * w + ix) * c;
          const double* krow = kv + (static_cast<std::size_t>(ky) * 3 + kx) * c * c;
          for (int ci = 0; ci < c; ++ci) {
            const double xi = irow[ci];
            const double* kk = krow + static_cast<std::size_t>(ci) * c;
            for (int co = 0; co < c; ++co) orow[co] += xi * kk[co];
          }
        }
      }
    }
  }
  out.check_finite("conv2d");
  return out;
}

Tensor conv2d_stride2_backward(const Tensor& input, Parameter& kernel, Parameter& bias,
                               const Tensor& grad_out) {
  const int h = input.dim(0), w = input.dim(1), c = input.dim(2);
  const int ho = (h + 1) / 2;
  const int wo = (w + 1) / 2;
  require_shape(grad_out, Shape{ho, wo, c}, "conv2d backward");
  kernel.ensure_grad();
  bias.ensure_grad();
  Tensor grad_in(input.shape);
  const double* in = input.values.data();
  const double* kv = kernel.tensor.values.data();
  const double* gv = grad_out.values.data();
  double* gi = grad_in.values.data();
  double* gk = kernel.tensor.grad.data();
  double* gb = bias.tensor.grad.data();
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      const double* grow = gv + (static_cast<std::size_t>(oy) * wo + ox) * c;
      for (int co = 0; co < c; ++co) gb[co] += grow[co];
      for (int ky = 0; ky < 3; ++ky) {
        const int iy = 2 * oy + ky - 1;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int ix = 2 * ox + kx - 1;
          if (ix < 0 || ix >= w) continue;
          const double* irow = in + (static_cast<std::size_t>(iy) * w + ix) * c;
          double* girow = gi + (static_cast<std::size_t>(iy) * w + ix) * c;
          const double* krow = kv + (static_cast<std::size_t>(ky) * 3 + kx) * c * c;
          double* gkrow = gk + (static_cast<std::size_t>(ky) * 3 + kx) * c * c;
          for (int ci = 0; ci < c; ++ci) {
            const double xi = irow[ci];
            const double* kk = krow + static_cast<std::size_t>(ci) * c;
            double* gkk = gkrow + static_cast<std::size_t>(ci) * c;
            double acc = 0.0;
            for (int co = 0; co < c; ++co) {
              acc += grow[co] * kk[co];
              gkk[co] += xi * grow[co];
            }
            girow[ci] += acc;
          }
        }
      }
    }
  }
  return grad_in;
}

Tensor softmax(const Tensor& logits) {
  if (logits.rank() == 0) {
    throw DimensionError("softmax: scalar input");
  }
  const int k = logits.shape.back();
  const int rows = logits.numel() / k;
  Tensor out(logits.shape);
  for (int r = 0; r < rows; ++r) {
    const double* lrow = logits.values.data() + static_cast<std::size_t>(r) * k;
    double* orow = out.values.data() + static_cast<std::size_t>(r) * k;
    double m = lrow[0];
    for (int i = 1; i < k; ++i) m = std::max(m, lrow[i]);
    double sum = 0.0;
    for (int i = 0; i < k; ++i) {
      orow[i] = std::exp(lrow[i] - m);
      sum += orow[i];
    }
    for (int i = 0; i < k; ++i) orow[i] /= sum;
  }
  out.check_finite("softmax");
  return out;
}

Tensor softmax_backward(const Tensor& probs, const Tensor& grad_out) {
  require_same_shape(probs, grad_out, "softmax backward");
  const int k = probs.shape.back();
  const int rows = probs.numel() / k;
  Tensor grad(probs.shape);
  for (int r = 0; r < rows; ++r) {
    const double* p = probs.values.data() + static_cast<std::size_t>(r) * k;
    const double* g = grad_out.values.data() + static_cast<std::size_t>(r) * k;
    double* out = grad.values.data() + static_cast<std::size_t>(r) * k;
    double dot = 0.0;
    for (int i = 0; i < k; ++i) dot += p[i] * g[i];
    for (int i = 0; i < k; ++i) out[i] = p[i] * (g[i] - dot);
  }
  return grad;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double softplus(double x) {
  if (x > 30.0) return x;
  return std::log1p(std::exp(x));
}

namespace {
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
}  // namespace

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
  const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
  return cdf + x * pdf;
}

Parameter make_weight(const std::string& name, int fan_in, int fan_out, RandomStream& rng) {
  Tensor t(Shape{fan_in, fan_out});
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  for (double& v : t.values) v = rng.uniform(-limit, limit);
  return Parameter(name, std::move(t));
}

Parameter make_bias(const std::string& name, int n, double fill) {
  return Parameter(name, Tensor(Shape{n}, fill));
}

Parameter make_conv_kernel(const std::string& name, int channels, RandomStream& rng) {
  Tensor t(Shape{3, 3, channels, channels});
  const double limit = std::sqrt(6.0 / (9.0 * channels + 9.0 * channels));
  for (double& v : t.values) v = rng.uniform(-limit, limit);
  return Parameter(name, std::move(t));
}

SelfAttention::SelfAttention(int channels_, int heads_, const std::string& prefix,
                             RandomStream& rng)
    : channels(channels_), heads(heads_) {
  if (heads <= 0 || channels % heads != 0) {
    throw ConfigError("self-attention: channels " + std::to_string(channels) +
                      " not divisible by heads " + std::to_string(heads));
  }
  wq = make_weight(prefix + ".wq", channels, channels, rng);
  bq = make_bias(prefix + ".bq", channels);
  wk = make_weight(prefix + ".wk", channels, channels, rng);
  bk = make_bias(prefix + ".bk", channels);
  wv = make_weight(prefix + ".wv", channels, channels, rng);
  bv = make_bias(prefix + ".bv", channels);
  wo = make_weight(prefix + ".wo", channels, channels, rng);
  bo = make_bias(prefix + ".bo", channels);
}

std::vector<Parameter*> SelfAttention::parameters() {
  return {&wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo};
}

Tensor self_attention_forward(const SelfAttention& layer, const Tensor& x,
                              SelfAttentionCache* cache) {
  if (x.rank() != 2 || x.dim(1) != layer.channels) {
    throw DimensionError("self-attention: input shape " + shape_str(x.shape) +
                         " does not match channels " + std::to_string(layer.channels));
  }
  const int n = x.dim(0);
  const int c = layer.channels;
  const int heads = layer.heads;
  const int d = c / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  Tensor q = linear_forward(x, layer.wq, layer.bq);
  Tensor k = linear_forward(x, layer.wk, layer.bk);
  Tensor v = linear_forward(x, layer.wv, layer.bv);

  Tensor attn(Shape{heads, n, n});
  Tensor concat(Shape{n, c});
  std::vector<double> logits(static_cast<std::size_t>(n));
  for (int h = 0; h < heads; ++h) {
    const int off = h * d;
    for (int i = 0; i < n; ++i) {
      const double* qi = q.values.data() + static_cast<std::size_t>(i) * c + off;
      double m = -1e300;
      for (int j = 0; j < n; ++j) {
        const double* kj = k.values.data() + static_cast<std::size_t>(j) * c + off;
        double dot = 0.0;
        for (int e = 0; e < d; ++e) dot += qi[e] * kj[e];
        logits[static_cast<std::size_t>(j)] = dot * scale;
        m = std::max(m, logits[static_cast<std::size_t>(j)]);
      }
      double sum = 0.0;
      double* arow = attn.values.data() + (static_cast<std::size_t>(h) * n + i) * n;
      for (int j = 0; j < n; ++j) {
        arow[j] = std::exp(logits[static_cast<std::size_t>(j)] - m);
        sum += arow[j];
      }
      for (int j = 0; j < n; ++j) arow[j] /= sum;
      double* orow = concat.values.data() + static_cast<std::size_t>(i) * c + off;
      for (int e = 0; e < d; ++e) orow[e] = 0.0;
      for (int j = 0; j < n; ++j) {
        const double a = arow[j];
        const double* vj = v.values.data() + static_cast<std::size_t>(j) * c + off;
        for (int e = 0; e < d; ++e) orow[e] += a * vj[e];
      }
    }
  }

  Tensor out = linear_forward(concat, layer.wo, layer.bo);
  for (int i = 0; i < out.numel(); ++i) out[i] += x[i];
  out.check_finite("self-attention");

  if (cache) {
    cache->x = x;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->attn = std::move(attn);
    cache->concat = std::move(concat);
  }
  return out;
}

Tensor self_attention_backward(SelfAttention& layer, const SelfAttentionCache& cache,
                               const Tensor& grad_out) {
  const int n = cache.x.dim(0);
  const int c = layer.channels;
  const int heads = layer.heads;
  const int d = c / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  require_shape(grad_out, Shape{n, c}, "self-attention backward");

  Tensor grad_concat = linear_backward(cache.concat, layer.wo, layer.bo, grad_out);

  Tensor grad_q(Shape{n, c});
  Tensor grad_k(Shape{n, c});
  Tensor grad_v(Shape{n, c});
  std::vector<double> grad_arow(static_cast<std::size_t>(n));
  for (int h = 0; h < heads; ++h) {
    const int off = h * d;
    for (int i = 0; i < n; ++i) {
      const double* grow = grad_concat.values.data() + static_cast<std::size_t>(i) * c + off;
      const double* arow = cache.attn.values.data() + (static_cast<std::size_t>(h) * n + i) * n;
      // grad wrt attention weights and values
      for (int j = 0; j < n; ++j) {
        const double* vj = cache.v.values.data() + static_cast<std::size_t>(j) * c + off;
        double dot = 0.0;
        for (int e = 0; e < d; ++e) dot += grow[e] * vj[e];
        grad_arow[static_cast<std::size_t>(j)] = dot;
        double* gvj = grad_v.values.data() + static_cast<std::size_t>(j) * c + off;
        const double a = arow[j];
        for (int e = 0; e < d; ++e) gvj[e] += a * grow[e];
      }
      // softmax backward for this row
      double dsum = 0.0;
      for (int j = 0; j < n; ++j) dsum += arow[j] * grad_arow[static_cast<std::size_t>(j)];
      const double* qi = cache.q.values.data() + static_cast<std::size_t>(i) * c + off;
      double* gqi = grad_q.values.data() + static_cast<std::size_t>(i) * c + off;
      for (int j = 0; j < n; ++j) {
        const double gl = arow[j] * (grad_arow[static_cast<std::size_t>(j)] - dsum) * scale;
        const double* kj = cache.k.values.data() + static_cast<std::size_t>(j) * c + off;
        double* gkj = grad_k.values.data() + static_cast<std::size_t>(j) * c + off;
        for (int e = 0; e < d; ++e) {
          gqi[e] += gl * kj[e];
          gkj[e] += gl * qi[e];
        }
      }
    }
  }

  Tensor grad_x = linear_backward(cache.x, layer.wq, layer.bq, grad_q);
  Tensor gk = linear_backward(cache.x, layer.wk, layer.bk, grad_k);
  Tensor gv = linear_backward(cache.x, layer.wv, layer.bv, grad_v);
  for (int i = 0; i < grad_x.numel(); ++i) {
    grad_x[i] += gk[i] + gv[i] + grad_out[i];  // grad_out term is the residual path
  }
  return grad_x;
}

}  // namespace ssda

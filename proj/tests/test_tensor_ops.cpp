#include <cmath>
#include <vector>

#include <doctest.h>

#include "ssda/grad_check.hpp"
#include "ssda/ops.hpp"
#include "ssda/rng.hpp"

using namespace ssda;

namespace {

Tensor random_tensor(const Shape& shape, RandomStream& rng, double scale = 1.0) {
  Tensor t(shape);
  for (double& v : t.values) v = rng.normal(0.0, scale);
  return t;
}

Parameter identity_weight(const std::string& name, int n) {
  Tensor t(Shape{n, n});
  for (int i = 0; i < n; ++i) t[i * n + i] = 1.0;
  return Parameter(name, std::move(t));
}

// Literal per-element dot-product oracle for the linear map.
Tensor linear_oracle(const Tensor& x, const Tensor& w, const Tensor& b) {
  const int cin = w.dim(0), cout = w.dim(1);
  const int rows = x.numel() / cin;
  Tensor out(Shape{rows, cout});
  for (int r = 0; r < rows; ++r) {
    for (int j = 0; j < cout; ++j) {
      double acc = b[j];
      for (int i = 0; i < cin; ++i) acc += x[r * cin + i] * w[i * cout + j];
      out[r * cout + j] = acc;
    }
  }
  return out;
}

// Direct convolution sum with explicit padding/stride arithmetic.
Tensor conv_oracle(const Tensor& in, const Tensor& kernel, const Tensor& bias) {
  const int h = in.dim(0), w = in.dim(1), c = in.dim(2);
  const int ho = (h + 1) / 2, wo = (w + 1) / 2;
  Tensor out(Shape{ho, wo, c});
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      for (int co = 0; co < c; ++co) {
        double acc = bias[co];
        for (int ky = 0; ky < 3; ++ky) {
          for (int kx = 0; kx < 3; ++kx) {
            const int iy = 2 * oy + ky - 1;
            const int ix = 2 * ox + kx - 1;
            if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
            for (int ci = 0; ci < c; ++ci) {
              acc += in[(iy * w + ix) * c + ci] * kernel[((ky * 3 + kx) * c + ci) * c + co];
            }
          }
        }
        out[(oy * wo + ox) * c + co] = acc;
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("linear: identity weight and zero bias is the identity") {
  RandomStream rng(11);
  const Tensor x = random_tensor({3, 4}, rng);
  Parameter w = identity_weight("w", 4);
  Parameter b = make_bias("b", 4);
  const Tensor y = linear_forward(x, w, b);
  for (int i = 0; i < x.numel(); ++i) CHECK(y[i] == doctest::Approx(x[i]).epsilon(1e-15));
}

TEST_CASE("linear: zero weight broadcasts the bias") {
  RandomStream rng(12);
  const Tensor x = random_tensor({5, 3}, rng);
  Parameter w("w", Tensor(Shape{3, 2}));
  Parameter b("b", Tensor(Shape{2}, {1.5, -2.25}));
  const Tensor y = linear_forward(x, w, b);
  for (int r = 0; r < 5; ++r) {
    CHECK(y[r * 2] == 1.5);
    CHECK(y[r * 2 + 1] == -2.25);
  }
}

TEST_CASE("linear: matches the per-element dot-product oracle") {
  RandomStream rng(13);
  const Tensor x = random_tensor({6, 3}, rng);
  Parameter w("w", random_tensor({3, 4}, rng));
  Parameter b("b", random_tensor({4}, rng));
  const Tensor y = linear_forward(x, w, b);
  const Tensor ref = linear_oracle(x, w.tensor, b.tensor);
  for (int i = 0; i < y.numel(); ++i) CHECK(std::abs(y[i] - ref[i]) < 1e-12);
}

TEST_CASE("linear: shape mismatch names both shapes") {
  RandomStream rng(14);
  const Tensor x = random_tensor({2, 5}, rng);
  Parameter w("w", random_tensor({3, 4}, rng));
  Parameter b("b", Tensor(Shape{4}));
  CHECK_THROWS_WITH_AS(linear_forward(x, w, b),
                       doctest::Contains("[2x5]"), DimensionError);
}

TEST_CASE("conv2d: zero kernel gives a constant-bias output") {
  RandomStream rng(21);
  const Tensor x = random_tensor({7, 6, 2}, rng);
  Parameter k("k", Tensor(Shape{3, 3, 2, 2}));
  Parameter b("b", Tensor(Shape{2}, {0.75, -1.0}));
  const Tensor y = conv2d_stride2_forward(x, k, b);
  CHECK(y.shape == Shape{4, 3, 2});
  for (int i = 0; i < y.numel(); i += 2) {
    CHECK(y[i] == 0.75);
    CHECK(y[i + 1] == -1.0);
  }
}

TEST_CASE("conv2d: two applications take 64x64 to 16x16") {
  RandomStream rng(22);
  const Tensor x = random_tensor({64, 64, 2}, rng);
  Parameter k = make_conv_kernel("k", 2, rng);
  Parameter b = make_bias("b", 2);
  const Tensor mid = conv2d_stride2_forward(x, k, b);
  CHECK(mid.shape == Shape{32, 32, 2});
  const Tensor out = conv2d_stride2_forward(mid, k, b);
  CHECK(out.shape == Shape{16, 16, 2});
}

TEST_CASE("conv2d: unit impulse reproduces kernel taps; random input matches oracle") {
  RandomStream rng(23);
  Parameter k("k", random_tensor({3, 3, 2, 2}, rng));
  Parameter b("b", Tensor(Shape{2}));
  Tensor impulse(Shape{5, 5, 2});
  impulse[(2 * 5 + 2) * 2 + 0] = 1.0;  // impulse at (y=2, x=2), channel 0
  const Tensor y = conv2d_stride2_forward(impulse, k, b);
  const Tensor ref = conv_oracle(impulse, k.tensor, b.tensor);
  for (int i = 0; i < y.numel(); ++i) CHECK(std::abs(y[i] - ref[i]) < 1e-12);
  // Aligned tap: output (1,1) reads input (2,2) through kernel center (1,1).
  CHECK(y[(1 * 3 + 1) * 2 + 0] == doctest::Approx(k.tensor[((1 * 3 + 1) * 2 + 0) * 2 + 0]));

  const Tensor x = random_tensor({6, 7, 2}, rng);
  const Tensor y2 = conv2d_stride2_forward(x, k, b);
  const Tensor ref2 = conv_oracle(x, k.tensor, b.tensor);
  for (int i = 0; i < y2.numel(); ++i) CHECK(std::abs(y2[i] - ref2[i]) < 1e-12);
}

TEST_CASE("conv2d: rejects inputs smaller than the kernel") {
  RandomStream rng(24);
  Parameter k = make_conv_kernel("k", 1, rng);
  Parameter b = make_bias("b", 1);
  CHECK_THROWS_AS(conv2d_stride2_forward(Tensor(Shape{2, 5, 1}), k, b), DimensionError);
}

TEST_CASE("softmax: uniform, saturated, and closed-form rows") {
  Tensor equal(Shape{1, 6}, 3.25);
  const Tensor p1 = softmax(equal);
  for (int i = 0; i < 6; ++i) CHECK(p1[i] == doctest::Approx(1.0 / 6.0).epsilon(1e-12));

  Tensor spiked(Shape{1, 4});
  spiked[2] = 1e4;
  const Tensor p2 = softmax(spiked);
  CHECK(std::abs(p2[2] - 1.0) < 1e-9);
  CHECK(p2[0] < 1e-9);

  Tensor pair(Shape{1, 2}, {0.0, std::log(2.0)});
  const Tensor p3 = softmax(pair);
  CHECK(p3[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(p3[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("softmax: rows sum to one and shift invariance holds") {
  RandomStream rng(31);
  Tensor logits = random_tensor({7, 5}, rng, 3.0);
  const Tensor p = softmax(logits);
  for (int r = 0; r < 7; ++r) {
    double sum = 0.0;
    for (int i = 0; i < 5; ++i) sum += p[r * 5 + i];
    CHECK(std::abs(sum - 1.0) < 1e-9);
  }
  Tensor shifted = logits;
  for (int r = 0; r < 7; ++r) {
    const double c = rng.uniform(-5.0, 5.0);
    for (int i = 0; i < 5; ++i) shifted[r * 5 + i] += c;
  }
  const Tensor p2 = softmax(shifted);
  for (int i = 0; i < p.numel(); ++i) CHECK(std::abs(p[i] - p2[i]) < 1e-9);
}

TEST_CASE("self-attention: single query has weight one and reduces to value+residual") {
  RandomStream rng(41);
  SelfAttention layer(4, 2, "sa", rng);
  layer.wq = identity_weight("sa.wq", 4);
  layer.wk = identity_weight("sa.wk", 4);
  layer.wv = Parameter("sa.wv", random_tensor({4, 4}, rng));
  layer.wo = identity_weight("sa.wo", 4);
  for (Parameter* p : {&layer.bq, &layer.bk, &layer.bv, &layer.bo}) {
    p->tensor = Tensor(Shape{4});
  }
  const Tensor x = random_tensor({1, 4}, rng);
  SelfAttentionCache cache;
  const Tensor y = self_attention_forward(layer, x, &cache);
  for (int i = 0; i < cache.attn.numel(); ++i) CHECK(cache.attn[i] == 1.0);
  Parameter b0 = make_bias("b0", 4);
  const Tensor v = linear_forward(x, layer.wv, b0);
  for (int i = 0; i < 4; ++i) CHECK(y[i] == doctest::Approx(v[i] + x[i]).epsilon(1e-12));
}

TEST_CASE("self-attention: identical queries produce identical outputs") {
  RandomStream rng(42);
  SelfAttention layer(6, 3, "sa", rng);
  Tensor x(Shape{2, 6});
  for (int i = 0; i < 6; ++i) {
    const double v = rng.normal();
    x[i] = v;
    x[6 + i] = v;
  }
  const Tensor y = self_attention_forward(layer, x, nullptr);
  for (int i = 0; i < 6; ++i) CHECK(y[i] == doctest::Approx(y[6 + i]).epsilon(1e-12));
}

TEST_CASE("self-attention: matches the literal four-loop oracle") {
  RandomStream rng(43);
  const int n = 3, c = 4, heads = 2, d = c / heads;
  SelfAttention layer(c, heads, "sa", rng);
  for (Parameter* p : {&layer.bq, &layer.bk, &layer.bv, &layer.bo}) {
    p->tensor = random_tensor({c}, rng, 0.3);
  }
  const Tensor x = random_tensor({n, c}, rng);
  const Tensor y = self_attention_forward(layer, x, nullptr);

  const Tensor q = linear_oracle(x, layer.wq.tensor, layer.bq.tensor);
  const Tensor k = linear_oracle(x, layer.wk.tensor, layer.bk.tensor);
  const Tensor v = linear_oracle(x, layer.wv.tensor, layer.bv.tensor);
  Tensor concat(Shape{n, c});
  for (int h = 0; h < heads; ++h) {
    for (int i = 0; i < n; ++i) {
      std::vector<double> weights(n);
      double denom = 0.0;
      for (int j = 0; j < n; ++j) {
        double dot = 0.0;
        for (int e = 0; e < d; ++e) dot += q[i * c + h * d + e] * k[j * c + h * d + e];
        weights[static_cast<std::size_t>(j)] = std::exp(dot / std::sqrt(double(d)));
        denom += weights[static_cast<std::size_t>(j)];
      }
      for (int e = 0; e < d; ++e) {
        double acc = 0.0;
        for (int j = 0; j < n; ++j) {
          acc += weights[static_cast<std::size_t>(j)] / denom * v[j * c + h * d + e];
        }
        concat[i * c + h * d + e] = acc;
      }
    }
  }
  const Tensor ref = linear_oracle(concat, layer.wo.tensor, layer.bo.tensor);
  for (int i = 0; i < y.numel(); ++i) {
    CHECK(y[i] == doctest::Approx(ref[i] + x[i]).epsilon(1e-9));
  }
}

TEST_CASE("grad_check: constant function returns zero error and zero gradient") {
  Tensor x(Shape{3}, {1.0, -2.0, 0.5});
  auto loss = [] { return 4.0; };
  auto backward = [&] {
    x.ensure_grad();
    x.zero_grad();
  };
  Tensor* inputs[] = {&x};
  CHECK(grad_check(loss, backward, inputs, 1e-5) == 0.0);
  for (double g : x.grad) CHECK(g == 0.0);
}

TEST_CASE("grad_check: scalar square at x=3 gives analytic 6") {
  Tensor x(Shape{1}, 3.0);
  auto loss = [&] { return x[0] * x[0]; };
  auto backward = [&] {
    x.ensure_grad();
    x.grad[0] = 2.0 * x[0];
  };
  Tensor* inputs[] = {&x};
  CHECK(grad_check(loss, backward, inputs, 1e-5) < 1e-6);
  CHECK(x.grad[0] == doctest::Approx(6.0));
}

TEST_CASE("grad_check: rejects non-positive epsilon") {
  Tensor x(Shape{1}, 1.0);
  auto loss = [&] { return x[0]; };
  auto backward = [&] {
    x.ensure_grad();
    x.grad[0] = 1.0;
  };
  Tensor* inputs[] = {&x};
  CHECK_THROWS_AS(grad_check(loss, backward, inputs, 0.0), ConfigError);
}

TEST_CASE("grad_check: random linear under sum-of-squares stays below 1e-4") {
  RandomStream rng(51);
  Tensor x = random_tensor({3, 4}, rng);
  Parameter w("w", random_tensor({4, 2}, rng));
  Parameter b("b", random_tensor({2}, rng, 0.2));
  auto loss = [&] {
    const Tensor y = linear_forward(x, w, b);
    double s = 0.0;
    for (int i = 0; i < y.numel(); ++i) s += y[i] * y[i];
    return s;
  };
  auto backward = [&] {
    x.ensure_grad();
    x.zero_grad();
    w.tensor.ensure_grad();
    w.tensor.zero_grad();
    b.tensor.ensure_grad();
    b.tensor.zero_grad();
    const Tensor y = linear_forward(x, w, b);
    Tensor gy(y.shape);
    for (int i = 0; i < y.numel(); ++i) gy[i] = 2.0 * y[i];
    x.grad = linear_backward(x, w, b, gy).values;
  };
  Tensor* inputs[] = {&x, &w.tensor, &b.tensor};
  CHECK(grad_check(loss, backward, inputs, 1e-5) < 1e-4);
}

#include "ssda/fusion.hpp"

#include <cmath>

namespace ssda {

MapReducer::MapReducer(int channels, const std::string& prefix, RandomStream& rng) {
  kernel1 = make_conv_kernel(prefix + ".k1", channels, rng);
  bias1 = make_bias(prefix + ".b1", channels);
  kernel2 = make_conv_kernel(prefix + ".k2", channels, rng);
  bias2 = make_bias(prefix + ".b2", channels);
}

std::vector<Parameter*> MapReducer::parameters() { return {&kernel1, &bias1, &kernel2, &bias2}; }

FeatureMap reduce_feature_map(const MapReducer& reducer, const FeatureMap& map,
                              MapReducerCache* cache) {
  if (map.stride_to_image != 16) {
    throw ConfigError("reduce_feature_map: requires a stride-16 map, got stride " +
                      std::to_string(map.stride_to_image));
  }
  Tensor mid = conv2d_stride2_forward(map.data, reducer.kernel1, reducer.bias1);
  Tensor act(mid.shape);
  for (int i = 0; i < mid.numel(); ++i) act[i] = gelu(mid[i]);
  Tensor out = conv2d_stride2_forward(act, reducer.kernel2, reducer.bias2);
  FeatureMap reduced;
  reduced.height = out.dim(0);
  reduced.width = out.dim(1);
  reduced.channels = out.dim(2);
  reduced.stride_to_image = 64;
  reduced.data = std::move(out);
  if (cache) {
    cache->input = map.data;
    cache->mid = std::move(mid);
    cache->act = std::move(act);
  }
  return reduced;
}

Tensor reduce_feature_map_backward(MapReducer& reducer, const MapReducerCache& cache,
                                   const Tensor& grad_out) {
  Tensor grad_act =
      conv2d_stride2_backward(cache.act, reducer.kernel2, reducer.bias2, grad_out);
  Tensor grad_mid(grad_act.shape);
  for (int i = 0; i < grad_act.numel(); ++i) {
    grad_mid[i] = grad_act[i] * gelu_grad(cache.mid[i]);
  }
  return conv2d_stride2_backward(cache.input, reducer.kernel1, reducer.bias1, grad_mid);
}

FusionWeights::FusionWeights(int count, const std::string& name) {
  w = Parameter(name, Tensor(Shape{count, 1}, 0.5));
}

Tensor fuse_query_features(const Tensor& fv, const Tensor& fd, const FusionWeights& weights) {
  require_same_shape(fv, fd, "fuse_query_features");
  const int n = fv.dim(0);
  const int c = fv.dim(1);
  require_shape(weights.w.tensor, Shape{n, 1}, "fuse_query_features weights");
  Tensor out(fv.shape);
  for (int q = 0; q < n; ++q) {
    const double wq = weights.w.tensor[q];
    const double* a = fv.values.data() + static_cast<std::size_t>(q) * c;
    const double* b = fd.values.data() + static_cast<std::size_t>(q) * c;
    double* o = out.values.data() + static_cast<std::size_t>(q) * c;
    for (int ch = 0; ch < c; ++ch) o[ch] = wq * a[ch] + (1.0 - wq) * b[ch];
  }
  out.check_finite("fuse_query_features");
  return out;
}

FuseGrads fuse_query_features_backward(const Tensor& fv, const Tensor& fd,
                                       FusionWeights& weights, const Tensor& grad_out) {
  require_same_shape(fv, grad_out, "fuse_query_features backward");
  const int n = fv.dim(0);
  const int c = fv.dim(1);
  weights.w.ensure_grad();
  FuseGrads grads{Tensor(fv.shape), Tensor(fd.shape)};
  for (int q = 0; q < n; ++q) {
    const double wq = weights.w.tensor[q];
    const double* a = fv.values.data() + static_cast<std::size_t>(q) * c;
    const double* b = fd.values.data() + static_cast<std::size_t>(q) * c;
    const double* g = grad_out.values.data() + static_cast<std::size_t>(q) * c;
    double* ga = grads.fv.values.data() + static_cast<std::size_t>(q) * c;
    double* gb = grads.fd.values.data() + static_cast<std::size_t>(q) * c;
    double gw = 0.0;
    for (int ch = 0; ch < c; ++ch) {
      ga[ch] = wq * g[ch];
      gb[ch] = (1.0 - wq) * g[ch];
      gw += g[ch] * (a[ch] - b[ch]);
    }
    weights.w.tensor.grad[static_cast<std::size_t>(q)] += gw;
  }
  return grads;
}

MatchingHead::MatchingHead(int channels, int preset_count, const std::string& prefix,
                           RandomStream& rng) {
  weight = make_weight(prefix + ".weight", channels, preset_count, rng);
  bias = make_bias(prefix + ".bias", preset_count);
}

std::vector<Parameter*> MatchingHead::parameters() { return {&weight, &bias}; }

MatchingDistribution predict_matching_distribution(const Tensor& fused,
                                                   const MatchingHead& head) {
  MatchingDistribution dist;
  dist.logits = linear_forward(fused, head.weight, head.bias);
  dist.p = softmax(dist.logits);
  // Row-stochasticity is a postcondition, checked rather than assumed.
  const int i_count = dist.p.shape.back();
  const int rows = dist.p.numel() / i_count;
  for (int r = 0; r < rows; ++r) {
    double sum = 0.0;
    for (int i = 0; i < i_count; ++i) sum += dist.p[r * i_count + i];
    if (std::abs(sum - 1.0) > 1e-6) {
      throw NumericError("matching distribution row " + std::to_string(r) +
                         " sums to " + std::to_string(sum));
    }
  }
  return dist;
}

Tensor matching_head_backward(const Tensor& fused, MatchingHead& head,
                              const Tensor& grad_logits) {
  return linear_backward(fused, head.weight, head.bias, grad_logits);
}

Tensor expected_shape_scale(const MatchingDistribution& dist, const ShapeScalePreset& presets) {
  const int i_count = presets.size();
  if (dist.p.rank() != 2 || dist.p.dim(1) != i_count) {
    throw DimensionError("expected_shape_scale: distribution shape " + shape_str(dist.p.shape) +
                         " does not match preset count " + std::to_string(i_count));
  }
  const int n = dist.p.dim(0);
  Tensor out(Shape{n, 2});
  for (int q = 0; q < n; ++q) {
    double er = 0.0, ew = 0.0;
    for (int i = 0; i < i_count; ++i) {
      const double p = dist.p[q * i_count + i];
      er += p * presets.entries[static_cast<std::size_t>(i)].ratio;
      ew += p * presets.entries[static_cast<std::size_t>(i)].width;
    }
    out[q * 2] = er;
    out[q * 2 + 1] = ew;
  }
  return out;
}

}  // namespace ssda

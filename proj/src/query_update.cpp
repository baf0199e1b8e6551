#include "ssda/query_update.hpp"

#include <algorithm>
#include <cmath>

namespace ssda {

AdaptiveFilterLayer::AdaptiveFilterLayer(int channels, const std::string& prefix,
                                         RandomStream& rng) {
  weight = make_weight(prefix + ".weight", channels, channels, rng);
  bias = make_bias(prefix + ".bias", channels);
}

std::vector<Parameter*> AdaptiveFilterLayer::parameters() { return {&weight, &bias}; }

Tensor build_filter(const LocalFeatureStack& local, const Tensor& p,
                    const AdaptiveFilterLayer& layer, BuildFilterCache* cache) {
  if (local.data.rank() != 3) {
    throw DimensionError("build_filter: local stack must be [N,I,C], got " +
                         shape_str(local.data.shape));
  }
  const int n = local.data.dim(0);
  const int i_count = local.data.dim(1);
  const int c = local.data.dim(2);
  require_shape(p, Shape{n, i_count}, "build_filter distribution");
  Tensor context(Shape{n, c});
  for (int q = 0; q < n; ++q) {
    double* ctx = context.values.data() + static_cast<std::size_t>(q) * c;
    for (int i = 0; i < i_count; ++i) {
      const double pi = p[q * i_count + i];
      const double* row =
          local.data.values.data() + (static_cast<std::size_t>(q) * i_count + i) * c;
      for (int ch = 0; ch < c; ++ch) ctx[ch] += pi * row[ch];
    }
  }
  Tensor pre = linear_forward(context, layer.weight, layer.bias);
  Tensor filter(pre.shape);
  for (int i = 0; i < pre.numel(); ++i) filter[i] = sigmoid(pre[i]);
  if (cache) {
    cache->context = std::move(context);
    cache->filter = filter;
  }
  return filter;
}

BuildFilterGrads build_filter_backward(const LocalFeatureStack& local, const Tensor& p,
                                       AdaptiveFilterLayer& layer, const BuildFilterCache& cache,
                                       const Tensor& grad_filter) {
  const int n = local.data.dim(0);
  const int i_count = local.data.dim(1);
  const int c = local.data.dim(2);
  require_shape(grad_filter, Shape{n, c}, "build_filter backward");
  Tensor grad_pre(grad_filter.shape);
  for (int i = 0; i < grad_filter.numel(); ++i) {
    const double f = cache.filter[i];
    grad_pre[i] = grad_filter[i] * f * (1.0 - f);
  }
  Tensor grad_context = linear_backward(cache.context, layer.weight, layer.bias, grad_pre);
  BuildFilterGrads grads{Tensor(local.data.shape), Tensor(p.shape)};
  for (int q = 0; q < n; ++q) {
    const double* gctx = grad_context.values.data() + static_cast<std::size_t>(q) * c;
    for (int i = 0; i < i_count; ++i) {
      const double pi = p[q * i_count + i];
      const double* lrow =
          local.data.values.data() + (static_cast<std::size_t>(q) * i_count + i) * c;
      double* glrow =
          grads.local.values.data() + (static_cast<std::size_t>(q) * i_count + i) * c;
      double gp = 0.0;
      for (int ch = 0; ch < c; ++ch) {
        glrow[ch] = pi * gctx[ch];
        gp += gctx[ch] * lrow[ch];
      }
      grads.p[q * i_count + i] = gp;
    }
  }
  return grads;
}

Tensor augment_queries(const Tensor& features, const Tensor& filter) {
  require_same_shape(features, filter, "augment_queries");
  Tensor out(features.shape);
  for (int i = 0; i < features.numel(); ++i) out[i] = features[i] * filter[i];
  return out;
}

DeformableAttention::DeformableAttention(int channels_, const DeformableConfig& cfg_,
                                         const std::string& prefix, RandomStream& rng)
    : cfg(cfg_), channels(channels_) {
  if (cfg.heads <= 0 || channels % cfg.heads != 0) {
    throw ConfigError("deformable attention: channels " + std::to_string(channels) +
                      " not divisible by heads " + std::to_string(cfg.heads));
  }
  if (cfg.points_per_head < 1) {
    throw ConfigError("deformable attention: points_per_head must be >= 1");
  }
  const int hk = cfg.heads * cfg.points_per_head;
  // Offsets start at a deterministic ring around the reference point: weights
  // zero, bias pointing outward per head with radius growing per point.
  offset_weight = Parameter(prefix + ".offset_weight", Tensor(Shape{channels, hk * 2}));
  Tensor ob(Shape{hk * 2});
  constexpr double kTwoPi = 6.283185307179586476925286766559;
  for (int h = 0; h < cfg.heads; ++h) {
    const double angle = kTwoPi * h / cfg.heads;
    for (int k = 0; k < cfg.points_per_head; ++k) {
      const double radius = 0.5 * (k + 1);
      ob[(h * cfg.points_per_head + k) * 2 + 0] = std::cos(angle) * radius;
      ob[(h * cfg.points_per_head + k) * 2 + 1] = std::sin(angle) * radius;
    }
  }
  offset_bias = Parameter(prefix + ".offset_bias", std::move(ob));
  score_weight = Parameter(prefix + ".score_weight", Tensor(Shape{channels, hk}));
  score_bias = make_bias(prefix + ".score_bias", hk);
  value_weight = make_weight(prefix + ".value_weight", channels, channels, rng);
  value_bias = make_bias(prefix + ".value_bias", channels);
  out_weight = make_weight(prefix + ".out_weight", channels, channels, rng);
  out_bias = make_bias(prefix + ".out_bias", channels);
}

std::vector<Parameter*> DeformableAttention::parameters() {
  return {&offset_weight, &offset_bias, &score_weight, &score_bias,
          &value_weight,  &value_bias,  &out_weight,   &out_bias};
}

DeformableResult deformable_aggregate(const DeformableAttention& layer, const FeatureMap& map,
                                      const QuerySet& queries, const Tensor& augmented,
                                      DeformableCache* cache) {
  if (map.stride_to_image != 16) {
    throw ConfigError("deformable_aggregate: requires a stride-16 map, got stride " +
                      std::to_string(map.stride_to_image));
  }
  const int n = queries.count;
  const int c = layer.channels;
  const int heads = layer.cfg.heads;
  const int kpts = layer.cfg.points_per_head;
  const int d = c / heads;
  require_shape(augmented, Shape{n, c}, "deformable_aggregate input");

  Tensor offsets = linear_forward(augmented, layer.offset_weight, layer.offset_bias);
  Tensor scores = linear_forward(augmented, layer.score_weight, layer.score_bias);

  // Per (query, head) softmax over the K points.
  Tensor attn(scores.shape);
  for (int q = 0; q < n; ++q) {
    for (int h = 0; h < heads; ++h) {
      const int base = q * heads * kpts + h * kpts;
      double m = scores[base];
      for (int k = 1; k < kpts; ++k) m = std::max(m, scores[base + k]);
      double sum = 0.0;
      for (int k = 0; k < kpts; ++k) {
        attn[base + k] = std::exp(scores[base + k] - m);
        sum += attn[base + k];
      }
      for (int k = 0; k < kpts; ++k) attn[base + k] /= sum;
    }
  }

  const int total = n * heads * kpts;
  std::vector<Point> coords(static_cast<std::size_t>(total));
  for (int q = 0; q < n; ++q) {
    const Point ref = map.denormalize(queries.positions[static_cast<std::size_t>(q)]);
    for (int h = 0; h < heads; ++h) {
      for (int k = 0; k < kpts; ++k) {
        const int s = (q * heads + h) * kpts + k;
        coords[static_cast<std::size_t>(s)] = {ref[0] + offsets[s * 2],
                                               ref[1] + offsets[s * 2 + 1]};
      }
    }
  }

  Tensor raw = bilinear_sample(map, coords);

  // Value projection restricted to each sample's own head slice; identical to
  // projecting the whole map and sampling, since both maps are linear.
  Tensor head_values(Shape{total, d});
  const double* vw = layer.value_weight.tensor.values.data();
  const double* vb = layer.value_bias.tensor.values.data();
  for (int s = 0; s < total; ++s) {
    const int h = (s / kpts) % heads;
    const int off = h * d;
    const double* rrow = raw.values.data() + static_cast<std::size_t>(s) * c;
    double* vrow = head_values.values.data() + static_cast<std::size_t>(s) * d;
    for (int e = 0; e < d; ++e) vrow[e] = vb[off + e];
    for (int ci = 0; ci < c; ++ci) {
      const double x = rrow[ci];
      const double* wrow = vw + static_cast<std::size_t>(ci) * c + off;
      for (int e = 0; e < d; ++e) vrow[e] += x * wrow[e];
    }
  }

  Tensor concat(Shape{n, c});
  for (int q = 0; q < n; ++q) {
    for (int h = 0; h < heads; ++h) {
      double* orow = concat.values.data() + static_cast<std::size_t>(q) * c + h * d;
      for (int k = 0; k < kpts; ++k) {
        const int s = (q * heads + h) * kpts + k;
        const double a = attn[s];
        const double* vrow = head_values.values.data() + static_cast<std::size_t>(s) * d;
        for (int e = 0; e < d; ++e) orow[e] += a * vrow[e];
      }
    }
  }

  Tensor out = linear_forward(concat, layer.out_weight, layer.out_bias);
  for (int i = 0; i < out.numel(); ++i) out[i] += augmented[i];
  out.check_finite("deformable_aggregate");

  DeformableResult result;
  result.features = std::move(out);
  result.records.reserve(static_cast<std::size_t>(total));
  for (int q = 0; q < n; ++q) {
    for (int h = 0; h < heads; ++h) {
      for (int k = 0; k < kpts; ++k) {
        const int s = (q * heads + h) * kpts + k;
        KeyPointRecord rec;
        rec.position = {std::clamp(coords[static_cast<std::size_t>(s)][0], 0.0,
                                   static_cast<double>(map.width - 1)),
                        std::clamp(coords[static_cast<std::size_t>(s)][1], 0.0,
                                   static_cast<double>(map.height - 1))};
        rec.attention_weight = attn[s];
        rec.head = h;
        rec.query = q;
        result.records.push_back(rec);
      }
    }
  }

  if (cache) {
    cache->augmented = augmented;
    cache->offsets = std::move(offsets);
    cache->attn = std::move(attn);
    cache->coords = std::move(coords);
    cache->raw_samples = std::move(raw);
    cache->head_values = std::move(head_values);
    cache->concat = std::move(concat);
  }
  return result;
}

Tensor deformable_aggregate_backward(DeformableAttention& layer, const FeatureMap& map,
                                     const QuerySet& queries, const DeformableCache& cache,
                                     const Tensor& grad_out, Tensor* grad_map) {
  const int n = queries.count;
  const int c = layer.channels;
  const int heads = layer.cfg.heads;
  const int kpts = layer.cfg.points_per_head;
  const int d = c / heads;
  const int total = n * heads * kpts;
  require_shape(grad_out, Shape{n, c}, "deformable backward");

  // Residual path.
  Tensor grad_aug = grad_out;

  Tensor grad_concat = linear_backward(cache.concat, layer.out_weight, layer.out_bias, grad_out);

  Tensor grad_values(Shape{total, d});
  Tensor grad_attn(Shape{n, heads * kpts});
  for (int q = 0; q < n; ++q) {
    for (int h = 0; h < heads; ++h) {
      const double* grow = grad_concat.values.data() + static_cast<std::size_t>(q) * c + h * d;
      for (int k = 0; k < kpts; ++k) {
        const int s = (q * heads + h) * kpts + k;
        const double a = cache.attn[s];
        const double* vrow = cache.head_values.values.data() + static_cast<std::size_t>(s) * d;
        double* gvrow = grad_values.values.data() + static_cast<std::size_t>(s) * d;
        double dot = 0.0;
        for (int e = 0; e < d; ++e) {
          gvrow[e] = a * grow[e];
          dot += grow[e] * vrow[e];
        }
        grad_attn[s] = dot;
      }
    }
  }

  // Softmax backward per (query, head) row of K.
  Tensor grad_scores(grad_attn.shape);
  for (int q = 0; q < n; ++q) {
    for (int h = 0; h < heads; ++h) {
      const int base = q * heads * kpts + h * kpts;
      double dot = 0.0;
      for (int k = 0; k < kpts; ++k) dot += cache.attn[base + k] * grad_attn[base + k];
      for (int k = 0; k < kpts; ++k) {
        grad_scores[base + k] = cache.attn[base + k] * (grad_attn[base + k] - dot);
      }
    }
  }
  {
    Tensor g = linear_backward(cache.augmented, layer.score_weight, layer.score_bias, grad_scores);
    for (int i = 0; i < g.numel(); ++i) grad_aug[i] += g[i];
  }

  // Head-sliced value projection backward.
  layer.value_weight.ensure_grad();
  layer.value_bias.ensure_grad();
  Tensor grad_raw(Shape{total, c});
  {
    const double* vw = layer.value_weight.tensor.values.data();
    double* gw = layer.value_weight.tensor.grad.data();
    double* gb = layer.value_bias.tensor.grad.data();
    for (int s = 0; s < total; ++s) {
      const int h = (s / kpts) % heads;
      const int off = h * d;
      const double* rrow = cache.raw_samples.values.data() + static_cast<std::size_t>(s) * c;
      const double* grow = grad_values.values.data() + static_cast<std::size_t>(s) * d;
      double* graw = grad_raw.values.data() + static_cast<std::size_t>(s) * c;
      for (int e = 0; e < d; ++e) gb[off + e] += grow[e];
      for (int ci = 0; ci < c; ++ci) {
        const double* wrow = vw + static_cast<std::size_t>(ci) * c + off;
        double* gwrow = gw + static_cast<std::size_t>(ci) * c + off;
        double acc = 0.0;
        const double x = rrow[ci];
        for (int e = 0; e < d; ++e) {
          acc += grow[e] * wrow[e];
          gwrow[e] += x * grow[e];
        }
        graw[ci] = acc;
      }
    }
  }

  std::vector<Point> grad_coords;
  bilinear_sample_backward(map, cache.coords, grad_raw, grad_map, &grad_coords);

  Tensor grad_offsets(cache.offsets.shape);
  for (int s = 0; s < total; ++s) {
    grad_offsets[s * 2] = grad_coords[static_cast<std::size_t>(s)][0];
    grad_offsets[s * 2 + 1] = grad_coords[static_cast<std::size_t>(s)][1];
  }
  {
    Tensor g =
        linear_backward(cache.augmented, layer.offset_weight, layer.offset_bias, grad_offsets);
    for (int i = 0; i < g.numel(); ++i) grad_aug[i] += g[i];
  }
  return grad_aug;
}

DecoderLayer::DecoderLayer(int channels_, int preset_count_, int query_count,
                           const DeformableConfig& dcfg, int ffn_hidden,
                           const std::string& prefix, RandomStream& rng)
    : channels(channels_), preset_count(preset_count_) {
  self_attn = SelfAttention(channels, dcfg.heads, prefix + ".self_attn", rng);
  reduce_v = MapReducer(channels, prefix + ".reduce_v", rng);
  reduce_d = MapReducer(channels, prefix + ".reduce_d", rng);
  fusion = FusionWeights(query_count, prefix + ".fusion.w");
  matching = MatchingHead(channels, preset_count, prefix + ".matching", rng);
  filter_layer = AdaptiveFilterLayer(channels, prefix + ".filter", rng);
  deform = DeformableAttention(channels, dcfg, prefix + ".deform", rng);
  const int hidden = ffn_hidden > 0 ? ffn_hidden : 4 * channels;
  ffn_w1 = make_weight(prefix + ".ffn.w1", channels, hidden, rng);
  ffn_b1 = make_bias(prefix + ".ffn.b1", hidden);
  ffn_w2 = make_weight(prefix + ".ffn.w2", hidden, channels, rng);
  ffn_b2 = make_bias(prefix + ".ffn.b2", channels);
}

std::vector<Parameter*> DecoderLayer::parameters() {
  std::vector<Parameter*> out;
  for (Parameter* p : self_attn.parameters()) out.push_back(p);
  for (Parameter* p : reduce_v.parameters()) out.push_back(p);
  for (Parameter* p : reduce_d.parameters()) out.push_back(p);
  out.push_back(&fusion.w);
  for (Parameter* p : matching.parameters()) out.push_back(p);
  for (Parameter* p : filter_layer.parameters()) out.push_back(p);
  for (Parameter* p : deform.parameters()) out.push_back(p);
  out.push_back(&ffn_w1);
  out.push_back(&ffn_b1);
  out.push_back(&ffn_w2);
  out.push_back(&ffn_b2);
  return out;
}

DecoderOutput decoder_layer_forward(const DecoderLayer& layer, const FeatureMap& map_v,
                                    const FeatureMap& map_d, const QuerySet& queries,
                                    const ShapeScalePreset& presets, DecoderLayerCache* cache) {
  queries.validate();
  DecoderLayerCache local_cache;
  DecoderLayerCache& cc = cache ? *cache : local_cache;

  Tensor x1 = self_attention_forward(layer.self_attn, queries.features, &cc.sa);
  cc.x1 = x1;

  cc.local = extract_local_features(map_v, queries, presets);

  cc.rv = reduce_feature_map(layer.reduce_v, map_v, &cc.rv_cache);
  cc.rd = reduce_feature_map(layer.reduce_d, map_d, &cc.rd_cache);
  cc.fv = sample_queries_from_map(cc.rv, queries);
  cc.fd = sample_queries_from_map(cc.rd, queries);
  cc.fused = fuse_query_features(cc.fv, cc.fd, layer.fusion);
  cc.dist = predict_matching_distribution(cc.fused, layer.matching);

  Tensor filter = build_filter(cc.local, cc.dist.p, layer.filter_layer, &cc.filter_cache);
  cc.augmented = augment_queries(x1, filter);

  DeformableResult agg =
      deformable_aggregate(layer.deform, map_v, queries, cc.augmented, &cc.deform_cache);
  cc.x2 = agg.features;

  cc.ffn_raw = linear_forward(cc.x2, layer.ffn_w1, layer.ffn_b1);
  cc.ffn_act = Tensor(cc.ffn_raw.shape);
  for (int i = 0; i < cc.ffn_raw.numel(); ++i) cc.ffn_act[i] = gelu(cc.ffn_raw[i]);
  Tensor out = linear_forward(cc.ffn_act, layer.ffn_w2, layer.ffn_b2);
  for (int i = 0; i < out.numel(); ++i) out[i] += cc.x2[i];
  out.check_finite("decoder layer");

  DecoderOutput result;
  result.features = std::move(out);
  result.dist = cc.dist;
  result.records = std::move(agg.records);
  return result;
}

Tensor decoder_layer_backward(DecoderLayer& layer, const FeatureMap& map_v,
                              const FeatureMap& map_d, const QuerySet& queries,
                              const ShapeScalePreset& presets, const DecoderLayerCache& cache,
                              const Tensor& grad_features, const Tensor& grad_logits_external,
                              Tensor* grad_map_v, Tensor* grad_map_d) {
  // FFN with residual.
  Tensor grad_act = linear_backward(cache.ffn_act, layer.ffn_w2, layer.ffn_b2, grad_features);
  Tensor grad_raw(grad_act.shape);
  for (int i = 0; i < grad_act.numel(); ++i) {
    grad_raw[i] = grad_act[i] * gelu_grad(cache.ffn_raw[i]);
  }
  Tensor grad_x2 = linear_backward(cache.x2, layer.ffn_w1, layer.ffn_b1, grad_raw);
  for (int i = 0; i < grad_x2.numel(); ++i) grad_x2[i] += grad_features[i];

  Tensor grad_aug = deformable_aggregate_backward(layer.deform, map_v, queries,
                                                  cache.deform_cache, grad_x2, grad_map_v);

  // augment_queries backward: x1 (.) filter
  const Tensor& filter = cache.filter_cache.filter;
  Tensor grad_x1(cache.x1.shape);
  Tensor grad_filter(filter.shape);
  for (int i = 0; i < grad_aug.numel(); ++i) {
    grad_x1[i] = grad_aug[i] * filter[i];
    grad_filter[i] = grad_aug[i] * cache.x1[i];
  }

  BuildFilterGrads fg = build_filter_backward(cache.local, cache.dist.p, layer.filter_layer,
                                              cache.filter_cache, grad_filter);
  if (grad_map_v) {
    extract_local_features_backward(map_v, queries, presets, fg.local, grad_map_v);
  }

  Tensor grad_logits = softmax_backward(cache.dist.p, fg.p);
  require_same_shape(grad_logits, grad_logits_external, "decoder backward logits");
  for (int i = 0; i < grad_logits.numel(); ++i) grad_logits[i] += grad_logits_external[i];

  Tensor grad_fused = matching_head_backward(cache.fused, layer.matching, grad_logits);
  FuseGrads fuse_grads =
      fuse_query_features_backward(cache.fv, cache.fd, layer.fusion, grad_fused);

  {
    Tensor grad_rv(cache.rv.data.shape);
    sample_queries_from_map_backward(cache.rv, queries, fuse_grads.fv, &grad_rv);
    Tensor gv = reduce_feature_map_backward(layer.reduce_v, cache.rv_cache, grad_rv);
    if (grad_map_v) {
      for (int i = 0; i < gv.numel(); ++i) (*grad_map_v)[i] += gv[i];
    }
  }
  {
    Tensor grad_rd(cache.rd.data.shape);
    sample_queries_from_map_backward(cache.rd, queries, fuse_grads.fd, &grad_rd);
    Tensor gd = reduce_feature_map_backward(layer.reduce_d, cache.rd_cache, grad_rd);
    if (grad_map_d) {
      for (int i = 0; i < gd.numel(); ++i) (*grad_map_d)[i] += gd[i];
    }
  }

  return self_attention_backward(layer.self_attn, cache.sa, grad_x1);
}

}  // namespace ssda

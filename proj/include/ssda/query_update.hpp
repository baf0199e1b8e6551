#pragma once

#include <string>
#include <vector>

#include "ssda/fusion.hpp"
#include "ssda/geometry.hpp"
#include "ssda/msm.hpp"
#include "ssda/ops.hpp"

namespace ssda {

/// Per-query linear map C->C followed by a sigmoid; output entries in (0,1).
struct AdaptiveFilterLayer {
  Parameter weight, bias;

  AdaptiveFilterLayer() = default;
  AdaptiveFilterLayer(int channels, const std::string& prefix, RandomStream& rng);
  std::vector<Parameter*> parameters();
};

struct BuildFilterCache {
  Tensor context;  // [N,C]
  Tensor filter;   // [N,C]
};

/// context[q] = sum_i p[q,i] * local[q,i,:]; filter = sigmoid(linear(context)).
Tensor build_filter(const LocalFeatureStack& local, const Tensor& p,
                    const AdaptiveFilterLayer& layer, BuildFilterCache* cache);

struct BuildFilterGrads {
  Tensor local;  // [N,I,C]
  Tensor p;      // [N,I]
};
BuildFilterGrads build_filter_backward(const LocalFeatureStack& local, const Tensor& p,
                                       AdaptiveFilterLayer& layer, const BuildFilterCache& cache,
                                       const Tensor& grad_filter);

/// Element-wise product of query features and filter.
Tensor augment_queries(const Tensor& features, const Tensor& filter);

struct DeformableConfig {
  int heads = 8;
  int points_per_head = 4;
};

/// One sampled key point: position in stride-16 feature pixels (clamped to the
/// map), its normalized attention weight, and the owning (query, head).
struct KeyPointRecord {
  Point position{};
  double attention_weight = 0.0;
  int head = 0;
  int query = 0;
};

/// Deformable key-point aggregation: per (query, head, point) offsets from the
/// query reference position, softmax attention over the K points of each head,
/// value projection, head concat, output projection, residual add.
struct DeformableAttention {
  DeformableConfig cfg;
  int channels = 0;
  Parameter offset_weight, offset_bias;  // C -> heads*K*2
  Parameter score_weight, score_bias;    // C -> heads*K
  Parameter value_weight, value_bias;    // C -> C
  Parameter out_weight, out_bias;        // C -> C

  DeformableAttention() = default;
  DeformableAttention(int channels, const DeformableConfig& cfg, const std::string& prefix,
                      RandomStream& rng);
  std::vector<Parameter*> parameters();
};

struct DeformableCache {
  Tensor augmented;      // [N,C]
  Tensor offsets;        // [N, heads*K*2]
  Tensor attn;           // [N, heads*K], per (q,h) rows sum to 1 over K
  std::vector<Point> coords;  // N*heads*K raw sample positions
  Tensor raw_samples;    // [S, C]
  Tensor head_values;    // [S, C/heads]
  Tensor concat;         // [N, C]
};

struct DeformableResult {
  Tensor features;  // [N,C]
  std::vector<KeyPointRecord> records;
};

DeformableResult deformable_aggregate(const DeformableAttention& layer, const FeatureMap& map,
                                      const QuerySet& queries, const Tensor& augmented,
                                      DeformableCache* cache);

/// Returns grad wrt `augmented`; accumulates parameter grads and, when
/// grad_map is non-null, grads wrt the map values.
Tensor deformable_aggregate_backward(DeformableAttention& layer, const FeatureMap& map,
                                     const QuerySet& queries, const DeformableCache& cache,
                                     const Tensor& grad_out, Tensor* grad_map);

/// One decoder layer: self-attention -> [local feature extraction; reduce +
/// sample + fuse -> matching distribution] -> filter -> augment -> deformable
/// aggregation -> FFN, with residual connections.
struct DecoderLayer {
  int channels = 0;
  int preset_count = 0;
  SelfAttention self_attn;
  MapReducer reduce_v, reduce_d;
  FusionWeights fusion;
  MatchingHead matching;
  AdaptiveFilterLayer filter_layer;
  DeformableAttention deform;
  Parameter ffn_w1, ffn_b1, ffn_w2, ffn_b2;

  DecoderLayer() = default;
  DecoderLayer(int channels, int preset_count, int query_count, const DeformableConfig& dcfg,
               int ffn_hidden, const std::string& prefix, RandomStream& rng);
  std::vector<Parameter*> parameters();
};

struct DecoderLayerCache {
  SelfAttentionCache sa;
  Tensor x1;
  LocalFeatureStack local;
  MapReducerCache rv_cache, rd_cache;
  FeatureMap rv, rd;
  Tensor fv, fd, fused;
  MatchingDistribution dist;
  BuildFilterCache filter_cache;
  Tensor augmented;
  DeformableCache deform_cache;
  Tensor x2, ffn_raw, ffn_act;
};

struct DecoderOutput {
  Tensor features;  // updated query features [N,C]
  MatchingDistribution dist;
  std::vector<KeyPointRecord> records;
};

DecoderOutput decoder_layer_forward(const DecoderLayer& layer, const FeatureMap& map_v,
                                    const FeatureMap& map_d, const QuerySet& queries,
                                    const ShapeScalePreset& presets, DecoderLayerCache* cache);

/// grad_features: dLoss/d(updated features). grad_logits_external: dLoss/d(matching
/// logits) from losses attached outside the layer (zero tensor when none).
/// Returns grad wrt the input query features; map grads accumulate into the
/// optional sinks.
Tensor decoder_layer_backward(DecoderLayer& layer, const FeatureMap& map_v,
                              const FeatureMap& map_d, const QuerySet& queries,
                              const ShapeScalePreset& presets, const DecoderLayerCache& cache,
                              const Tensor& grad_features, const Tensor& grad_logits_external,
                              Tensor* grad_map_v, Tensor* grad_map_d);

}  // namespace ssda

#pragma once

#include <string>
#include <vector>

#include "ssda/geometry.hpp"
#include "ssda/ops.hpp"
#include "ssda/tensor.hpp"

namespace ssda {

/// Two stride-2 convolutions with a GELU between them, reducing a stride-16
/// map to stride 64.
struct MapReducer {
  Parameter kernel1, bias1, kernel2, bias2;

  MapReducer() = default;
  MapReducer(int channels, const std::string& prefix, RandomStream& rng);
  std::vector<Parameter*> parameters();
};

struct MapReducerCache {
  Tensor input;  // [H,W,C]
  Tensor mid;    // after first conv, pre-activation
  Tensor act;    // after activation
};

FeatureMap reduce_feature_map(const MapReducer& reducer, const FeatureMap& map,
                              MapReducerCache* cache);
/// Returns grad wrt the input map data; accumulates into reducer parameters.
Tensor reduce_feature_map_backward(MapReducer& reducer, const MapReducerCache& cache,
                                   const Tensor& grad_out);

/// Per-query fusion proportion, initialized to 0.5 everywhere. Values are
/// learnable and unconstrained; excursions outside [0,1] are reported by the
/// training loop rather than clamped.
struct FusionWeights {
  Parameter w;  // [N,1]

  FusionWeights() = default;
  FusionWeights(int count, const std::string& name);
};

/// out[q] = w[q]*fv[q] + (1-w[q])*fd[q]
Tensor fuse_query_features(const Tensor& fv, const Tensor& fd, const FusionWeights& weights);

struct FuseGrads {
  Tensor fv, fd;
};
FuseGrads fuse_query_features_backward(const Tensor& fv, const Tensor& fd,
                                       FusionWeights& weights, const Tensor& grad_out);

/// Linear projection C -> I whose softmax is the matching distribution.
struct MatchingHead {
  Parameter weight, bias;

  MatchingHead() = default;
  MatchingHead(int channels, int preset_count, const std::string& prefix, RandomStream& rng);
  std::vector<Parameter*> parameters();
};

/// Row-stochastic N x I matrix over the preset categories. Raw logits are kept
/// for the numerically stable focal-loss path.
struct MatchingDistribution {
  Tensor logits;  // [N,I]
  Tensor p;       // [N,I], rows sum to 1
};

MatchingDistribution predict_matching_distribution(const Tensor& fused, const MatchingHead& head);
/// Returns grad wrt the fused features given total grad wrt logits.
Tensor matching_head_backward(const Tensor& fused, MatchingHead& head, const Tensor& grad_logits);

/// S'[q] = sum_i p[q,i] * (r_i, w_i). Diagnostic, and the optional L1
/// regression alternative (off by default).
Tensor expected_shape_scale(const MatchingDistribution& dist, const ShapeScalePreset& presets);

}  // namespace ssda

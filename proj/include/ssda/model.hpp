#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ssda/detection.hpp"
#include "ssda/query_update.hpp"

namespace ssda {

struct ModelConfig {
  int query_count = 16;
  int channels = 32;
  int heads = 8;
  int points_per_head = 4;
  int decoder_layers = 1;
  int num_classes = 1;
  int ffn_hidden = 0;  // 0 -> 4 * channels
  double depth_prior = 25.0;

  void validate() const;
};

struct DetectionHeads {
  Parameter class_w, class_b;
  Parameter box_w, box_b;
  Parameter center_w, center_b;
  Parameter size_w, size_b;
  Parameter angle_w, angle_b;
  Parameter depth_w, depth_b;
  Parameter sigma_w, sigma_b;

  DetectionHeads() = default;
  DetectionHeads(int channels, int num_classes, double depth_prior, const std::string& prefix,
                 RandomStream& rng);
  std::vector<Parameter*> parameters();
};

/// Decoder stack plus detection heads. Query features are learnable; query
/// reference positions are a fixed jittered grid drawn at construction.
struct Model {
  ModelConfig cfg;
  ShapeScalePreset presets;
  Parameter query_features;            // [N,C]
  std::vector<Point> query_positions;  // normalized
  std::vector<DecoderLayer> layers;
  DetectionHeads heads;

  Model() = default;
  Model(const ModelConfig& config, const ShapeScalePreset& preset_table, std::uint64_t seed);

  /// All parameters; throws ConfigError on duplicate names.
  std::vector<Parameter*> parameters();
  void zero_grads();

  QuerySet query_set() const;

  struct ForwardCache {
    std::vector<DecoderLayerCache> layer_caches;
    std::vector<Tensor> layer_inputs;  // features entering each layer
    Tensor features;                   // final decoder output [N,C]
    Tensor box_raw, size_raw;          // pre-softplus head outputs
  };

  struct ForwardResult {
    Tensor features;
    MatchingDistribution dist;  // final layer
    std::vector<KeyPointRecord> records;
    PredictionBatch preds;
  };

  ForwardResult forward(const FeatureMap& map_v, const FeatureMap& map_d,
                        ForwardCache* cache) const;

  /// grad_preds carries d(loss)/d(prediction batch); grad_msm_logits is the
  /// external gradient on the final layer's matching logits. Map gradient
  /// sinks are optional.
  void backward(const FeatureMap& map_v, const FeatureMap& map_d, const ForwardCache& cache,
                const PredictionBatch& grad_preds, const Tensor& grad_msm_logits,
                Tensor* grad_map_v = nullptr, Tensor* grad_map_d = nullptr);

  std::string save_state_text() const;
  void load_state_text(const std::string& text);
};

}  // namespace ssda

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ssda/config.hpp"
#include "ssda/detection.hpp"
#include "ssda/model.hpp"
#include "ssda/query_update.hpp"

namespace ssda {

struct KeypointPrecision {
  double position_precision = 0.0;
  double weighted_position_precision = 0.0;
  long long inside = 0;
  long long total = 0;
  bool empty = true;  // no matched queries
};

/// Fraction of matched queries' key points whose position (scaled to image
/// pixels) lies inside the matched target's 2D box; the weighted variant sums
/// the per-(query,head)-normalized attention weights instead of counting.
KeypointPrecision eval_keypoint_precision(const std::vector<KeyPointRecord>& records,
                                          const std::vector<std::pair<int, int>>& matches,
                                          const std::vector<ObjectTarget>& targets,
                                          int stride_to_image);

struct EvalStats {
  double matching_accuracy = 0.0;
  double position_precision = 0.0;
  double weighted_position_precision = 0.0;
  long long matched_queries = 0;
  bool empty = true;
};

/// Forward-only evaluation over `scene_count` held-out scenes seeded from the
/// run seed; metrics are pooled over all matched queries and key points.
EvalStats evaluate_model(const Model& model, const RunConfig& cfg, int scene_count);

struct MetricsRow {
  int step = 0;
  double total_loss = 0.0;
  std::array<double, 7> query_terms{};
  double msm = 0.0;
  double matching_accuracy = 0.0;
  double position_precision = 0.0;
  double weighted_position_precision = 0.0;
};

struct TrainResult {
  Model model;
  std::vector<MetricsRow> rows;
  EvalStats final_eval;
  int fusion_excursion_steps = 0;  // steps where any fusion weight left [0,1]
  std::string csv;
};

/// Deterministic training loop: per step generate a scene, run the decoder,
/// match queries, evaluate the composite objective, backprop, update. Metrics
/// rows are appended every eval_interval steps and at the final step. Aborts
/// with a diagnostic dump on a non-finite loss.
TrainResult train_loop(const RunConfig& cfg);

std::string metrics_csv(const std::vector<MetricsRow>& rows);

}  // namespace ssda

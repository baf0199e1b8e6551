#pragma once

#include <array>
#include <utility>
#include <vector>

#include "ssda/geometry.hpp"
#include "ssda/tensor.hpp"

namespace ssda {

/// Ground-truth record feeding both detection losses and matching labels.
/// box_lrtb are center-to-edge offsets in image pixels, measured from the
/// projected 3D center.
struct ObjectTarget {
  int class_id = 0;
  std::array<double, 4> box_lrtb{};   // (l, r, t, b) image px
  Point center3d_proj{};              // (x, y) image px
  std::array<double, 3> size3d{};     // (h, w, l) meters
  double depth = 0.0;                 // meters
  double angle = 0.0;                 // radians
  double focal_length = 0.0;          // px

  void validate() const;
};

/// One query's regressed outputs in spec units (image pixels / meters).
struct QueryPrediction {
  std::vector<double> class_logits;
  std::array<double, 4> box_lrtb{};   // image px
  Point center3d_proj{};              // image px
  double d_reg = 0.0;
  double log_sigma = 0.0;             // sigma = exp(log_sigma) > 0
  std::array<double, 3> size3d{};
  std::array<double, 2> angle_sincos{};
};

struct LossWeights {
  double lambda1 = 2.0;   // class
  double lambda2 = 5.0;   // 2d size
  double lambda3 = 10.0;  // projected 3d center
  double lambda4 = 2.0;   // giou
  double lambda5 = 1.0;   // 3d size
  double lambda6 = 1.0;   // angle
  double lambda7 = 1.0;   // depth
  double lambda_msm = 0.1;
};

/// Raw per-query head outputs for a whole query set. Box and center are in
/// stride-16 feature pixels; box and size3d are positive by construction.
struct PredictionBatch {
  Tensor class_logits;  // [N, num_classes+1], last column is background
  Tensor box;           // [N,4] (l,r,t,b) feature px
  Tensor center;        // [N,2] feature px, absolute
  Tensor size3d;        // [N,3] meters
  Tensor angle;         // [N,2] (sin, cos)
  Tensor d_reg;         // [N]
  Tensor log_sigma;     // [N]
};

/// Converts one row of a batch into the spec's image-pixel prediction record.
QueryPrediction prediction_for_query(const PredictionBatch& batch, int q, int stride_to_image);

/// Greedy one-to-one assignment: targets in descending 2D-area order each
/// claim the nearest unclaimed query (Euclidean distance in normalized
/// coordinates). Deterministic; returns (query, target) pairs sorted by
/// target index.
std::vector<std::pair<int, int>> match_queries(const QuerySet& queries,
                                               const std::vector<ObjectTarget>& targets,
                                               const FeatureMap& reference_map);

/// 1 - GIoU of the two boxes induced by center-offset parameterization around
/// a shared center; lies in [0,2). A degenerate predicted box contributes zero
/// intersection/area while the enclosing-box term still applies.
double giou_loss(const std::array<double, 4>& pred_lrtb, const std::array<double, 4>& target_lrtb);
std::array<double, 4> giou_loss_grad(const std::array<double, 4>& pred_lrtb,
                                     const std::array<double, 4>& target_lrtb);

struct DepthComponents {
  double d_reg = 0.0;
  double d_geo = 0.0;
  double d_map = 0.0;
  double d_pre = 0.0;
};

/// d_geo = f * h3d_pred / (t_pred + b_pred); d_map = bilinear sample of the
/// depth map (channel 0) at the predicted projected center; d_pre = mean of
/// the three.
DepthComponents depth_components(const QueryPrediction& pred, const ObjectTarget& target,
                                 const FeatureMap& depth_map);

/// (2/sigma) * |d_gt - d_pre| + log(sigma), with sigma = exp(log_sigma).
double laplacian_depth_loss(double d_pre, double d_gt, double log_sigma);

struct QueryLossResult {
  double total = 0.0;
  // class, 2dsize, xy3d, giou, 3dsize, angle, depth
  std::array<double, 7> terms{};
};

/// Composite detection objective. Classification covers every query
/// (unmatched queries target the background class); regression terms average
/// over matched queries. When `grads` is non-null it receives d(total)/d(batch)
/// with the lambda weights applied; grad_depth_map likewise accumulates the
/// depth-map path.
QueryLossResult query_loss(const PredictionBatch& preds, const std::vector<ObjectTarget>& targets,
                           const std::vector<std::pair<int, int>>& matches,
                           const FeatureMap& depth_map, const LossWeights& weights, double gamma,
                           PredictionBatch* grads, Tensor* grad_depth_map);

double total_loss(double query_loss_value, double msm_loss_value, double lambda_msm);

}  // namespace ssda

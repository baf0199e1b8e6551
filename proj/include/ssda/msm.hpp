#pragma once

#include <span>
#include <utility>
#include <vector>

#include "ssda/fusion.hpp"
#include "ssda/geometry.hpp"

namespace ssda {

/// Ground-truth shape&scale of an object: aspect ratio and width in stride-16
/// feature pixels (image pixels / 16).
struct ShapeScaleTruth {
  double r_hat = 0.0;
  double w_hat = 0.0;
};

struct MSMConfig {
  double w1 = 2.0;          // shape-distance weight (on r)
  double w2 = 1.0;          // scale-distance weight (on w)
  double gamma = 2.0;       // focal exponent
  double lambda_msm = 0.1;  // composite-loss weight
};

/// One-hot category over the preset list.
struct CategoryLabel {
  int index = 0;
  std::vector<double> onehot;
};

/// (l,r,t,b) are center-to-edge offsets in image pixels.
/// w_hat = (l+r)/16, r_hat = (t+b)/(l+r).
ShapeScaleTruth truth_from_box(double l, double r, double t, double b);

/// index = argmin_i [ w1*|r_hat - r_i| + w2*|w_hat - w_i| ], ties broken by
/// lowest index.
CategoryLabel generate_category_label(const ShapeScaleTruth& truth,
                                      const ShapeScalePreset& presets, const MSMConfig& cfg);

/// -(1 - p[label])^gamma * log(p[label]). p_row must sum to 1 within 1e-6.
/// A zero probability at the label is floored at 1e-12; *clamped reports it.
double focal_loss_multiclass(std::span<const double> p_row, const CategoryLabel& label,
                             double gamma, bool* clamped = nullptr);

/// Stable focal loss evaluated from raw logits via log-softmax. If grad_row is
/// non-null it receives dLoss/dlogits (same length as the row).
double focal_loss_from_logits(std::span<const double> logits_row, int label_index, double gamma,
                              std::span<double> grad_row = {});

/// Mean focal loss over the labeled (positive) queries; queries without labels
/// contribute nothing. Empty label list returns 0 (no positives in batch).
double msm_loss(const MatchingDistribution& dist,
                const std::vector<std::pair<int, CategoryLabel>>& labels, double gamma);

/// Gradient of msm_loss wrt the matching logits, shape [N,I].
Tensor msm_loss_backward(const MatchingDistribution& dist,
                         const std::vector<std::pair<int, CategoryLabel>>& labels, double gamma);

/// The rejected L1-regression alternative, kept behind a switch: mean L1
/// between the expected shape&scale and the truth over labeled queries.
/// grad_logits (optional) receives the gradient wrt the matching logits.
double shape_scale_l1_loss(const MatchingDistribution& dist, const ShapeScalePreset& presets,
                           const std::vector<std::pair<int, ShapeScaleTruth>>& truths,
                           Tensor* grad_logits);

}  // namespace ssda

#include "ssda/detection.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ssda/msm.hpp"

namespace ssda {

void ObjectTarget::validate() const {
  if (!(box_lrtb[0] + box_lrtb[1] > 0.0) || !(box_lrtb[2] + box_lrtb[3] > 0.0)) {
    throw std::invalid_argument("object target: degenerate 2D box");
  }
  if (!(depth > 0.0)) throw std::invalid_argument("object target: depth must be positive");
  for (double s : size3d) {
    if (!(s > 0.0)) throw std::invalid_argument("object target: 3D size must be positive");
  }
  if (!(focal_length > 0.0)) {
    throw std::invalid_argument("object target: focal length must be positive");
  }
}

QueryPrediction prediction_for_query(const PredictionBatch& batch, int q, int stride_to_image) {
  const int classes = batch.class_logits.dim(1);
  QueryPrediction pred;
  pred.class_logits.resize(static_cast<std::size_t>(classes));
  for (int j = 0; j < classes; ++j) pred.class_logits[static_cast<std::size_t>(j)] =
      batch.class_logits[q * classes + j];
  for (int j = 0; j < 4; ++j) {
    pred.box_lrtb[static_cast<std::size_t>(j)] = batch.box[q * 4 + j] * stride_to_image;
  }
  pred.center3d_proj = {batch.center[q * 2] * stride_to_image,
                        batch.center[q * 2 + 1] * stride_to_image};
  for (int j = 0; j < 3; ++j) pred.size3d[static_cast<std::size_t>(j)] = batch.size3d[q * 3 + j];
  pred.angle_sincos = {batch.angle[q * 2], batch.angle[q * 2 + 1]};
  pred.d_reg = batch.d_reg[q];
  pred.log_sigma = batch.log_sigma[q];
  return pred;
}

std::vector<std::pair<int, int>> match_queries(const QuerySet& queries,
                                               const std::vector<ObjectTarget>& targets,
                                               const FeatureMap& reference_map) {
  const int n = queries.count;
  const int t_count = static_cast<int>(targets.size());
  if (t_count > n) {
    throw ConfigError("match_queries: " + std::to_string(t_count) + " targets exceed " +
                      std::to_string(n) + " queries");
  }
  for (const ObjectTarget& t : targets) t.validate();

  std::vector<int> order(targets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    const auto area = [&](int i) {
      const auto& bx = targets[static_cast<std::size_t>(i)].box_lrtb;
      return (bx[0] + bx[1]) * (bx[2] + bx[3]);
    };
    return area(a) > area(b);
  });

  const double stride = reference_map.stride_to_image;
  const double wden = std::max(1, reference_map.width - 1);
  const double hden = std::max(1, reference_map.height - 1);
  std::vector<bool> claimed(static_cast<std::size_t>(n), false);
  std::vector<std::pair<int, int>> matches;
  matches.reserve(targets.size());
  for (int ti : order) {
    const ObjectTarget& tgt = targets[static_cast<std::size_t>(ti)];
    // 2D box center (not the projected 3D center) in normalized coordinates.
    const double cx = tgt.center3d_proj[0] + (tgt.box_lrtb[1] - tgt.box_lrtb[0]) / 2.0;
    const double cy = tgt.center3d_proj[1] + (tgt.box_lrtb[3] - tgt.box_lrtb[2]) / 2.0;
    const double nx = cx / stride / wden;
    const double ny = cy / stride / hden;
    int best = -1;
    double best_dist = 0.0;
    for (int q = 0; q < n; ++q) {
      if (claimed[static_cast<std::size_t>(q)]) continue;
      const Point& p = queries.positions[static_cast<std::size_t>(q)];
      const double dx = p[0] - nx;
      const double dy = p[1] - ny;
      const double dist = dx * dx + dy * dy;
      if (best < 0 || dist < best_dist) {
        best = q;
        best_dist = dist;
      }
    }
    claimed[static_cast<std::size_t>(best)] = true;
    matches.emplace_back(best, ti);
  }
  std::sort(matches.begin(), matches.end(),
            [](const auto& a, const auto& b) { return a.second < b.second; });
  return matches;
}

namespace {

struct GiouParts {
  double area_a, area_b, iw, ih, inter, uni, ew, eh, enclose;
};

GiouParts giou_parts(const std::array<double, 4>& p, const std::array<double, 4>& g) {
  GiouParts parts{};
  const double wa = p[0] + p[1];
  const double ha = p[2] + p[3];
  parts.area_a = std::max(0.0, wa) * std::max(0.0, ha);
  parts.area_b = (g[0] + g[1]) * (g[2] + g[3]);
  parts.iw = std::min(p[1], g[1]) + std::min(p[0], g[0]);
  parts.ih = std::min(p[3], g[3]) + std::min(p[2], g[2]);
  parts.inter = (parts.iw > 0.0 && parts.ih > 0.0) ? parts.iw * parts.ih : 0.0;
  parts.uni = parts.area_a + parts.area_b - parts.inter;
  parts.ew = std::max(p[1], g[1]) + std::max(p[0], g[0]);
  parts.eh = std::max(p[3], g[3]) + std::max(p[2], g[2]);
  parts.enclose = parts.ew * parts.eh;
  return parts;
}

}  // namespace

double giou_loss(const std::array<double, 4>& pred_lrtb,
                 const std::array<double, 4>& target_lrtb) {
  if (!(target_lrtb[0] + target_lrtb[1] > 0.0) || !(target_lrtb[2] + target_lrtb[3] > 0.0)) {
    throw std::invalid_argument("giou_loss: degenerate target box");
  }
  const GiouParts s = giou_parts(pred_lrtb, target_lrtb);
  return 2.0 - s.inter / s.uni - s.uni / s.enclose;
}

std::array<double, 4> giou_loss_grad(const std::array<double, 4>& p,
                                     const std::array<double, 4>& g) {
  const GiouParts s = giou_parts(p, g);
  const double wa = p[0] + p[1];
  const double ha = p[2] + p[3];
  const bool box_live = wa > 0.0 && ha > 0.0;
  const bool inter_live = s.iw > 0.0 && s.ih > 0.0;
  std::array<double, 4> grad{};
  for (int j = 0; j < 4; ++j) {
    const bool horizontal = j < 2;  // l,r affect widths; t,b affect heights
    const double d_area = box_live ? (horizontal ? ha : wa) : 0.0;
    double d_inter = 0.0;
    if (inter_live) {
      const bool take_pred = p[static_cast<std::size_t>(j)] < g[static_cast<std::size_t>(j)];
      d_inter = take_pred ? (horizontal ? s.ih : s.iw) : 0.0;
    }
    const double d_union = d_area - d_inter;
    const bool extends = p[static_cast<std::size_t>(j)] > g[static_cast<std::size_t>(j)];
    const double d_enclose = extends ? (horizontal ? s.eh : s.ew) : 0.0;
    const double d_iou = (d_inter * s.uni - s.inter * d_union) / (s.uni * s.uni);
    const double d_ratio =
        (d_union * s.enclose - s.uni * d_enclose) / (s.enclose * s.enclose);
    grad[static_cast<std::size_t>(j)] = -d_iou - d_ratio;
  }
  return grad;
}

DepthComponents depth_components(const QueryPrediction& pred, const ObjectTarget& target,
                                 const FeatureMap& depth_map) {
  DepthComponents out;
  out.d_reg = pred.d_reg;
  const double box_height = pred.box_lrtb[2] + pred.box_lrtb[3];
  if (!(box_height > 0.0)) {
    throw NumericError("depth_components: nonpositive predicted box height " +
                       std::to_string(box_height));
  }
  out.d_geo = target.focal_length * pred.size3d[0] / box_height;
  const double stride = depth_map.stride_to_image;
  const Point coord = {pred.center3d_proj[0] / stride, pred.center3d_proj[1] / stride};
  const Tensor sample = bilinear_sample(depth_map, std::span<const Point>(&coord, 1));
  out.d_map = sample[0];
  out.d_pre = (out.d_reg + out.d_geo + out.d_map) / 3.0;
  return out;
}

double laplacian_depth_loss(double d_pre, double d_gt, double log_sigma) {
  const double sigma = std::exp(log_sigma);
  return (2.0 / sigma) * std::abs(d_gt - d_pre) + log_sigma;
}

QueryLossResult query_loss(const PredictionBatch& preds, const std::vector<ObjectTarget>& targets,
                           const std::vector<std::pair<int, int>>& matches,
                           const FeatureMap& depth_map, const LossWeights& weights, double gamma,
                           PredictionBatch* grads, Tensor* grad_depth_map) {
  const int n = preds.class_logits.dim(0);
  const int classes = preds.class_logits.dim(1);
  const int background = classes - 1;
  const double stride = depth_map.stride_to_image;

  std::vector<int> assigned(static_cast<std::size_t>(n), background);
  for (const auto& [q, t] : matches) {
    if (q < 0 || q >= n || t < 0 || t >= static_cast<int>(targets.size())) {
      throw DimensionError("query_loss: match (" + std::to_string(q) + "," + std::to_string(t) +
                           ") out of range");
    }
    const int cls = targets[static_cast<std::size_t>(t)].class_id;
    if (cls < 0 || cls >= background) {
      throw ConfigError("query_loss: class id " + std::to_string(cls) +
                        " outside class head of size " + std::to_string(classes));
    }
    assigned[static_cast<std::size_t>(q)] = cls;
  }

  if (grads) {
    grads->class_logits = Tensor(preds.class_logits.shape);
    grads->box = Tensor(preds.box.shape);
    grads->center = Tensor(preds.center.shape);
    grads->size3d = Tensor(preds.size3d.shape);
    grads->angle = Tensor(preds.angle.shape);
    grads->d_reg = Tensor(preds.d_reg.shape);
    grads->log_sigma = Tensor(preds.log_sigma.shape);
  }

  QueryLossResult res;

  // Classification over every query.
  std::vector<double> row_grad(static_cast<std::size_t>(classes));
  for (int q = 0; q < n; ++q) {
    std::span<const double> row(preds.class_logits.values.data() +
                                    static_cast<std::size_t>(q) * classes,
                                static_cast<std::size_t>(classes));
    if (grads) {
      res.terms[0] += focal_loss_from_logits(row, assigned[static_cast<std::size_t>(q)], gamma,
                                             row_grad) /
                      n;
      for (int j = 0; j < classes; ++j) {
        grads->class_logits[q * classes + j] +=
            weights.lambda1 * row_grad[static_cast<std::size_t>(j)] / n;
      }
    } else {
      res.terms[0] +=
          focal_loss_from_logits(row, assigned[static_cast<std::size_t>(q)], gamma) / n;
    }
  }

  const int m = static_cast<int>(matches.size());
  if (m > 0) {
    const double inv_m = 1.0 / m;
    for (const auto& [q, ti] : matches) {
      const ObjectTarget& tgt = targets[static_cast<std::size_t>(ti)];
      std::array<double, 4> pred_box{};
      std::array<double, 4> tgt_box{};
      for (int j = 0; j < 4; ++j) {
        pred_box[static_cast<std::size_t>(j)] = preds.box[q * 4 + j];
        tgt_box[static_cast<std::size_t>(j)] = tgt.box_lrtb[static_cast<std::size_t>(j)] / stride;
      }

      // 2D size, L1 in feature pixels.
      for (int j = 0; j < 4; ++j) {
        const double diff =
            pred_box[static_cast<std::size_t>(j)] - tgt_box[static_cast<std::size_t>(j)];
        res.terms[1] += std::abs(diff) * inv_m / 4.0;
        if (grads) {
          grads->box[q * 4 + j] +=
              weights.lambda2 * (diff > 0 ? 1.0 : -1.0) * inv_m / 4.0;
        }
      }

      // Projected 3D center, L1 in feature pixels.
      for (int j = 0; j < 2; ++j) {
        const double diff = preds.center[q * 2 + j] - tgt.center3d_proj[static_cast<std::size_t>(j)] / stride;
        res.terms[2] += std::abs(diff) * inv_m / 2.0;
        if (grads) {
          grads->center[q * 2 + j] +=
              weights.lambda3 * (diff > 0 ? 1.0 : -1.0) * inv_m / 2.0;
        }
      }

      // GIoU (scale invariant, evaluated in feature pixels).
      res.terms[3] += giou_loss(pred_box, tgt_box) * inv_m;
      if (grads) {
        const std::array<double, 4> gg = giou_loss_grad(pred_box, tgt_box);
        for (int j = 0; j < 4; ++j) {
          grads->box[q * 4 + j] += weights.lambda4 * gg[static_cast<std::size_t>(j)] * inv_m;
        }
      }

      // 3D size, L1 in meters.
      for (int j = 0; j < 3; ++j) {
        const double diff = preds.size3d[q * 3 + j] - tgt.size3d[static_cast<std::size_t>(j)];
        res.terms[4] += std::abs(diff) * inv_m / 3.0;
        if (grads) {
          grads->size3d[q * 3 + j] +=
              weights.lambda5 * (diff > 0 ? 1.0 : -1.0) * inv_m / 3.0;
        }
      }

      // Orientation, L1 on (sin, cos).
      const std::array<double, 2> tgt_angle{std::sin(tgt.angle), std::cos(tgt.angle)};
      for (int j = 0; j < 2; ++j) {
        const double diff = preds.angle[q * 2 + j] - tgt_angle[static_cast<std::size_t>(j)];
        res.terms[5] += std::abs(diff) * inv_m / 2.0;
        if (grads) {
          grads->angle[q * 2 + j] +=
              weights.lambda6 * (diff > 0 ? 1.0 : -1.0) * inv_m / 2.0;
        }
      }

      // Depth with aleatoric uncertainty.
      const double box_height_img = (pred_box[2] + pred_box[3]) * stride;
      if (!(box_height_img > 0.0)) {
        throw NumericError("query_loss: nonpositive predicted box height for query " +
                           std::to_string(q));
      }
      const double d_geo = tgt.focal_length * preds.size3d[q * 3] / box_height_img;
      const Point coord = {preds.center[q * 2], preds.center[q * 2 + 1]};
      const Tensor sample = bilinear_sample(depth_map, std::span<const Point>(&coord, 1));
      const double d_map = sample[0];
      const double d_pre = (preds.d_reg[q] + d_geo + d_map) / 3.0;
      const double sigma = std::exp(preds.log_sigma[q]);
      const double delta = tgt.depth - d_pre;
      res.terms[6] += ((2.0 / sigma) * std::abs(delta) + preds.log_sigma[q]) * inv_m;
      if (grads) {
        const double sgn = delta > 0 ? 1.0 : -1.0;
        const double g_pre = weights.lambda7 * inv_m * (2.0 / sigma) * (-sgn) / 3.0;
        grads->d_reg[q] += g_pre;
        grads->size3d[q * 3] += g_pre * tgt.focal_length / box_height_img;
        const double g_height =
            -g_pre * tgt.focal_length * preds.size3d[q * 3] / (box_height_img * box_height_img);
        grads->box[q * 4 + 2] += g_height * stride;
        grads->box[q * 4 + 3] += g_height * stride;
        Tensor sample_grad(Shape{1, depth_map.channels});
        sample_grad[0] = g_pre;
        std::vector<Point> coord_grads;
        bilinear_sample_backward(depth_map, std::span<const Point>(&coord, 1), sample_grad,
                                 grad_depth_map, &coord_grads);
        grads->center[q * 2] += coord_grads[0][0];
        grads->center[q * 2 + 1] += coord_grads[0][1];
        grads->log_sigma[q] +=
            weights.lambda7 * inv_m * (1.0 - (2.0 / sigma) * std::abs(delta));
      }
    }
  }

  res.total = weights.lambda1 * res.terms[0] + weights.lambda2 * res.terms[1] +
              weights.lambda3 * res.terms[2] + weights.lambda4 * res.terms[3] +
              weights.lambda5 * res.terms[4] + weights.lambda6 * res.terms[5] +
              weights.lambda7 * res.terms[6];
  return res;
}

double total_loss(double query_loss_value, double msm_loss_value, double lambda_msm) {
  return query_loss_value + lambda_msm * msm_loss_value;
}

}  // namespace ssda

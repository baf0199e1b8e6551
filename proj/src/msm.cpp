#include "ssda/msm.hpp"

#include <cmath>

namespace ssda {

ShapeScaleTruth truth_from_box(double l, double r, double t, double b) {
  const double bw = l + r;
  const double bh = t + b;
  if (!(bw > 0.0) || !(bh > 0.0)) {
    throw std::invalid_argument("truth_from_box: degenerate box (l+r=" + std::to_string(bw) +
                                ", t+b=" + std::to_string(bh) + ")");
  }
  return ShapeScaleTruth{bh / bw, bw / 16.0};
}

CategoryLabel generate_category_label(const ShapeScaleTruth& truth,
                                      const ShapeScalePreset& presets, const MSMConfig& cfg) {
  presets.validate();
  int best = 0;
  double best_dist = 0.0;
  for (int i = 0; i < presets.size(); ++i) {
    const ShapeScaleEntry& e = presets.entries[static_cast<std::size_t>(i)];
    const double dist =
        cfg.w1 * std::abs(truth.r_hat - e.ratio) + cfg.w2 * std::abs(truth.w_hat - e.width);
    if (i == 0 || dist < best_dist) {
      best = i;
      best_dist = dist;
    }
  }
  CategoryLabel label;
  label.index = best;
  label.onehot.assign(static_cast<std::size_t>(presets.size()), 0.0);
  label.onehot[static_cast<std::size_t>(best)] = 1.0;
  return label;
}

double focal_loss_multiclass(std::span<const double> p_row, const CategoryLabel& label,
                             double gamma, bool* clamped) {
  if (label.index < 0 || label.index >= static_cast<int>(p_row.size())) {
    throw DimensionError("focal loss: label index " + std::to_string(label.index) +
                         " outside row of size " + std::to_string(p_row.size()));
  }
  double sum = 0.0;
  for (double p : p_row) sum += p;
  if (std::abs(sum - 1.0) > 1e-6) {
    throw NumericError("focal loss: probability row sums to " + std::to_string(sum));
  }
  double pt = p_row[static_cast<std::size_t>(label.index)];
  if (clamped) *clamped = false;
  if (pt < 1e-12) {
    pt = 1e-12;
    if (clamped) *clamped = true;
  }
  const double u = std::max(0.0, 1.0 - pt);
  return -std::pow(u, gamma) * std::log(pt);
}

double focal_loss_from_logits(std::span<const double> logits_row, int label_index, double gamma,
                              std::span<double> grad_row) {
  const int k = static_cast<int>(logits_row.size());
  if (label_index < 0 || label_index >= k) {
    throw DimensionError("focal loss: label index " + std::to_string(label_index) +
                         " outside row of size " + std::to_string(k));
  }
  double m = logits_row[0];
  for (int i = 1; i < k; ++i) m = std::max(m, logits_row[static_cast<std::size_t>(i)]);
  double sum = 0.0;
  for (int i = 0; i < k; ++i) sum += std::exp(logits_row[static_cast<std::size_t>(i)] - m);
  const double lse = m + std::log(sum);
  const double logpt = logits_row[static_cast<std::size_t>(label_index)] - lse;
  const double pt = std::exp(logpt);
  const double u = std::max(0.0, 1.0 - pt);
  const double focal = std::pow(u, gamma);
  const double loss = -focal * logpt;
  if (!grad_row.empty()) {
    if (static_cast<int>(grad_row.size()) != k) {
      throw DimensionError("focal loss: grad row size mismatch");
    }
    // dL/dz_j = (gamma*pt*u^(gamma-1)*log pt - u^gamma) * (delta_tj - p_j)
    double coef = -focal;
    if (gamma > 0.0 && u > 0.0) {
      coef += gamma * pt * std::pow(u, gamma - 1.0) * logpt;
    }
    for (int j = 0; j < k; ++j) {
      const double pj = std::exp(logits_row[static_cast<std::size_t>(j)] - lse);
      const double delta = (j == label_index) ? 1.0 : 0.0;
      grad_row[static_cast<std::size_t>(j)] = coef * (delta - pj);
    }
  }
  return loss;
}

double msm_loss(const MatchingDistribution& dist,
                const std::vector<std::pair<int, CategoryLabel>>& labels, double gamma) {
  if (labels.empty()) return 0.0;
  const int n = dist.logits.dim(0);
  const int k = dist.logits.dim(1);
  double total = 0.0;
  for (const auto& [q, label] : labels) {
    if (q < 0 || q >= n) {
      throw DimensionError("msm_loss: query index " + std::to_string(q) + " outside [0," +
                           std::to_string(n) + ")");
    }
    std::span<const double> row(dist.logits.values.data() + static_cast<std::size_t>(q) * k,
                                static_cast<std::size_t>(k));
    total += focal_loss_from_logits(row, label.index, gamma);
  }
  return total / static_cast<double>(labels.size());
}

Tensor msm_loss_backward(const MatchingDistribution& dist,
                         const std::vector<std::pair<int, CategoryLabel>>& labels,
                         double gamma) {
  Tensor grad(dist.logits.shape);
  if (labels.empty()) return grad;
  const int k = dist.logits.dim(1);
  const double inv = 1.0 / static_cast<double>(labels.size());
  std::vector<double> row_grad(static_cast<std::size_t>(k));
  for (const auto& [q, label] : labels) {
    std::span<const double> row(dist.logits.values.data() + static_cast<std::size_t>(q) * k,
                                static_cast<std::size_t>(k));
    focal_loss_from_logits(row, label.index, gamma, row_grad);
    for (int j = 0; j < k; ++j) {
      grad[q * k + j] += inv * row_grad[static_cast<std::size_t>(j)];
    }
  }
  return grad;
}

double shape_scale_l1_loss(const MatchingDistribution& dist, const ShapeScalePreset& presets,
                           const std::vector<std::pair<int, ShapeScaleTruth>>& truths,
                           Tensor* grad_logits) {
  if (grad_logits) *grad_logits = Tensor(dist.logits.shape);
  if (truths.empty()) return 0.0;
  const int k = dist.p.dim(1);
  const double inv = 1.0 / (2.0 * static_cast<double>(truths.size()));
  double loss = 0.0;
  for (const auto& [q, truth] : truths) {
    double er = 0.0, ew = 0.0;
    for (int i = 0; i < k; ++i) {
      const double p = dist.p[q * k + i];
      er += p * presets.entries[static_cast<std::size_t>(i)].ratio;
      ew += p * presets.entries[static_cast<std::size_t>(i)].width;
    }
    loss += (std::abs(er - truth.r_hat) + std::abs(ew - truth.w_hat)) * inv;
    if (grad_logits) {
      const double sr = (er > truth.r_hat ? 1.0 : -1.0) * inv;
      const double sw = (ew > truth.w_hat ? 1.0 : -1.0) * inv;
      // dloss/dp_i then softmax backward for this row.
      double dot = 0.0;
      std::vector<double> dp(static_cast<std::size_t>(k));
      for (int i = 0; i < k; ++i) {
        dp[static_cast<std::size_t>(i)] =
            sr * presets.entries[static_cast<std::size_t>(i)].ratio +
            sw * presets.entries[static_cast<std::size_t>(i)].width;
        dot += dist.p[q * k + i] * dp[static_cast<std::size_t>(i)];
      }
      for (int i = 0; i < k; ++i) {
        (*grad_logits)[q * k + i] +=
            dist.p[q * k + i] * (dp[static_cast<std::size_t>(i)] - dot);
      }
    }
  }
  return loss;
}

}  // namespace ssda

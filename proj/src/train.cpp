#include "ssda/train.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "ssda/msm.hpp"
#include "ssda/rng.hpp"
#include "ssda/scene.hpp"

namespace ssda {

namespace {
// Held-out evaluation scenes form one fixed benchmark, shared across run
// seeds; training streams derive from the run seed and never collide with it.
constexpr std::uint64_t kEvalRoot = 0x5eedbeefcafef00dULL;
}  // namespace

KeypointPrecision eval_keypoint_precision(const std::vector<KeyPointRecord>& records,
                                          const std::vector<std::pair<int, int>>& matches,
                                          const std::vector<ObjectTarget>& targets,
                                          int stride_to_image) {
  std::vector<int> target_of_query;
  for (const auto& [q, t] : matches) {
    if (q >= static_cast<int>(target_of_query.size())) {
      target_of_query.resize(static_cast<std::size_t>(q) + 1, -1);
    }
    target_of_query[static_cast<std::size_t>(q)] = t;
  }
  KeypointPrecision out;
  double weight_in = 0.0, weight_all = 0.0;
  for (const KeyPointRecord& rec : records) {
    const int t = rec.query < static_cast<int>(target_of_query.size())
                      ? target_of_query[static_cast<std::size_t>(rec.query)]
                      : -1;
    if (t < 0) continue;
    const ObjectTarget& tgt = targets[static_cast<std::size_t>(t)];
    const double x = rec.position[0] * stride_to_image;
    const double y = rec.position[1] * stride_to_image;
    const double left = tgt.center3d_proj[0] - tgt.box_lrtb[0];
    const double right = tgt.center3d_proj[0] + tgt.box_lrtb[1];
    const double top = tgt.center3d_proj[1] - tgt.box_lrtb[2];
    const double bottom = tgt.center3d_proj[1] + tgt.box_lrtb[3];
    const bool inside = x >= left && x <= right && y >= top && y <= bottom;
    ++out.total;
    weight_all += rec.attention_weight;
    if (inside) {
      ++out.inside;
      weight_in += rec.attention_weight;
    }
  }
  if (out.total > 0) {
    out.empty = false;
    out.position_precision = static_cast<double>(out.inside) / out.total;
    out.weighted_position_precision = weight_all > 0.0 ? weight_in / weight_all : 0.0;
  }
  return out;
}

EvalStats evaluate_model(const Model& model, const RunConfig& cfg, int scene_count) {
  EvalStats stats;
  long long correct = 0, labeled = 0;
  long long kp_inside = 0, kp_total = 0;
  double weight_in = 0.0, weight_all = 0.0;
  const MSMConfig msm_cfg = cfg.msm_config();
  const SceneParams sp = cfg.scene_params();
  const QuerySet qs = model.query_set();
  const int i_count = model.presets.size();
  for (int s = 0; s < scene_count; ++s) {
    const SyntheticScene scene = generate_scene(
        sp, model.presets, derive_seed(kEvalRoot, "eval-scene", static_cast<std::uint64_t>(s)));
    const Model::ForwardResult fwd = model.forward(scene.map_v, scene.map_d, nullptr);
    const std::vector<std::pair<int, int>> matches =
        match_queries(qs, scene.targets, scene.map_v);
    for (const auto& [q, t] : matches) {
      const ObjectTarget& tgt = scene.targets[static_cast<std::size_t>(t)];
      const ShapeScaleTruth truth = truth_from_box(tgt.box_lrtb[0], tgt.box_lrtb[1],
                                                   tgt.box_lrtb[2], tgt.box_lrtb[3]);
      const CategoryLabel label = generate_category_label(truth, model.presets, msm_cfg);
      int argmax = 0;
      for (int i = 1; i < i_count; ++i) {
        if (fwd.dist.p[q * i_count + i] > fwd.dist.p[q * i_count + argmax]) argmax = i;
      }
      ++labeled;
      if (argmax == label.index) ++correct;
    }
    const KeypointPrecision kp =
        eval_keypoint_precision(fwd.records, matches, scene.targets, 16);
    kp_inside += kp.inside;
    kp_total += kp.total;
    // Re-pool the weighted ratio across scenes.
    if (!kp.empty) {
      weight_in += kp.weighted_position_precision * static_cast<double>(kp.total);
      weight_all += static_cast<double>(kp.total);
    }
    stats.matched_queries += static_cast<long long>(matches.size());
  }
  if (labeled > 0) {
    stats.empty = false;
    stats.matching_accuracy = static_cast<double>(correct) / labeled;
  }
  if (kp_total > 0) {
    stats.position_precision = static_cast<double>(kp_inside) / kp_total;
  }
  if (weight_all > 0.0) {
    stats.weighted_position_precision = weight_in / weight_all;
  }
  return stats;
}

namespace {

std::string format_metric(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

struct Optimizer {
  const RunConfig& cfg;
  std::vector<std::vector<double>> velocity;
  std::vector<std::vector<double>> adam_m, adam_v;
  long long t = 0;
  int total_steps = 0;

  explicit Optimizer(const RunConfig& c, const std::vector<Parameter*>& params) : cfg(c) {
    velocity.resize(params.size());
    adam_m.resize(params.size());
    adam_v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      const std::size_t n = params[i]->tensor.values.size();
      velocity[i].assign(n, 0.0);
      if (cfg.optimizer == "adam") {
        adam_m[i].assign(n, 0.0);
        adam_v[i].assign(n, 0.0);
      }
    }
  }

  double current_lr() const {
    const int warmup = std::min(cfg.warmup_steps, std::max(0, total_steps / 4));
    if (warmup > 0 && t <= warmup) {
      return cfg.learning_rate * static_cast<double>(t) / warmup;
    }
    if (cfg.lr_schedule == "cosine" && total_steps > warmup + 1) {
      constexpr double kPi = 3.14159265358979323846;
      const double progress =
          static_cast<double>(t - warmup - 1) / (total_steps - warmup - 1);
      return cfg.learning_rate * 0.5 * (1.0 + std::cos(kPi * progress));
    }
    return cfg.learning_rate;
  }

  void step(const std::vector<Parameter*>& params) {
    ++t;
    const double lr = current_lr();
    if (cfg.grad_clip_norm > 0.0) {
      double norm_sq = 0.0;
      for (const Parameter* p : params) {
        if (!p->trainable || !p->tensor.has_grad()) continue;
        for (double g : p->tensor.grad) norm_sq += g * g;
      }
      const double norm = std::sqrt(norm_sq);
      if (norm > cfg.grad_clip_norm) {
        const double scale = cfg.grad_clip_norm / norm;
        for (Parameter* p : params) {
          if (!p->trainable || !p->tensor.has_grad()) continue;
          for (double& g : p->tensor.grad) g *= scale;
        }
      }
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      Parameter* p = params[i];
      if (!p->trainable || !p->tensor.has_grad()) continue;
      double* value = p->tensor.values.data();
      const double* grad = p->tensor.grad.data();
      const std::size_t n = p->tensor.values.size();
      if (cfg.optimizer == "adam") {
        constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t));
        for (std::size_t j = 0; j < n; ++j) {
          adam_m[i][j] = b1 * adam_m[i][j] + (1.0 - b1) * grad[j];
          adam_v[i][j] = b2 * adam_v[i][j] + (1.0 - b2) * grad[j] * grad[j];
          value[j] -= lr * (adam_m[i][j] / bc1) / (std::sqrt(adam_v[i][j] / bc2) + eps);
        }
      } else {
        for (std::size_t j = 0; j < n; ++j) {
          velocity[i][j] = cfg.momentum * velocity[i][j] - lr * grad[j];
          value[j] += velocity[i][j];
        }
      }
    }
  }
};

}  // namespace

std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::ostringstream os;
  os << "step,total_loss,loss_class,loss_2dsize,loss_xy3d,loss_giou,loss_3dsize,loss_angle,"
        "loss_depth,msm_loss,matching_accuracy,position_precision,weighted_position_precision\n";
  for (const MetricsRow& r : rows) {
    os << r.step << ',' << format_metric(r.total_loss);
    for (double term : r.query_terms) os << ',' << format_metric(term);
    os << ',' << format_metric(r.msm) << ',' << format_metric(r.matching_accuracy) << ','
       << format_metric(r.position_precision) << ','
       << format_metric(r.weighted_position_precision) << '\n';
  }
  return os.str();
}

TrainResult train_loop(const RunConfig& cfg) {
  cfg.validate();
  const ShapeScalePreset presets =
      cfg.presets.entries.empty() ? preset_for_category(cfg.category) : cfg.presets;
  TrainResult result;
  result.model = Model(cfg.model_config(), presets, derive_seed(cfg.seed, "model", 0));
  Model& model = result.model;
  const std::vector<Parameter*> params = model.parameters();
  Optimizer opt(cfg, params);
  opt.total_steps = cfg.steps;
  const MSMConfig msm_cfg = cfg.msm_config();
  const SceneParams sp = cfg.scene_params();
  const QuerySet qs = model.query_set();

  double last_total = 0.0;
  QueryLossResult last_query{};
  double last_msm = 0.0;

  for (int step = 0; step < cfg.steps; ++step) {
    model.zero_grads();
    const int batch = std::max(1, cfg.batch_size);
    const double inv_batch = 1.0 / batch;
    double total = 0.0;
    QueryLossResult qres_mean{};
    double msm_mean = 0.0;
    for (int b = 0; b < batch; ++b) {
      const std::uint64_t scene_index =
          cfg.fixed_scene ? static_cast<std::uint64_t>(b)
                          : static_cast<std::uint64_t>(step) * batch + b;
      const std::uint64_t scene_seed = derive_seed(cfg.seed, "scene", scene_index);
      const SyntheticScene scene = generate_scene(sp, presets, scene_seed);

      Model::ForwardCache cache;
      const Model::ForwardResult fwd = model.forward(scene.map_v, scene.map_d, &cache);
      const std::vector<std::pair<int, int>> matches =
          match_queries(qs, scene.targets, scene.map_v);

      std::vector<std::pair<int, CategoryLabel>> labels;
      std::vector<std::pair<int, ShapeScaleTruth>> truths;
      labels.reserve(matches.size());
      for (const auto& [q, t] : matches) {
        const ObjectTarget& tgt = scene.targets[static_cast<std::size_t>(t)];
        const ShapeScaleTruth truth =
            truth_from_box(tgt.box_lrtb[0], tgt.box_lrtb[1], tgt.box_lrtb[2], tgt.box_lrtb[3]);
        labels.emplace_back(q, generate_category_label(truth, presets, msm_cfg));
        truths.emplace_back(q, truth);
      }

      PredictionBatch grads;
      const QueryLossResult qres = query_loss(fwd.preds, scene.targets, matches, scene.map_d,
                                              cfg.weights, cfg.gamma, &grads, nullptr);
      double msm_value;
      Tensor grad_logits;
      if (cfg.use_l1_shape_scale) {
        msm_value = shape_scale_l1_loss(fwd.dist, presets, truths, &grad_logits);
      } else {
        msm_value = msm_loss(fwd.dist, labels, cfg.gamma);
        grad_logits = msm_loss_backward(fwd.dist, labels, cfg.gamma);
      }
      const double scene_total = total_loss(qres.total, msm_value, cfg.weights.lambda_msm);
      if (!std::isfinite(scene_total)) {
        std::ostringstream os;
        os << "train_loop: non-finite loss at step " << step << " (scene seed " << scene_seed
           << "; query=" << qres.total << " msm=" << msm_value << ")";
        throw NumericError(os.str());
      }
      total += scene_total * inv_batch;
      for (std::size_t i = 0; i < qres_mean.terms.size(); ++i) {
        qres_mean.terms[i] += qres.terms[i] * inv_batch;
      }
      qres_mean.total += qres.total * inv_batch;
      msm_mean += msm_value * inv_batch;

      // Gradients accumulate across the batch; scale each scene by 1/batch.
      for (Tensor* g : {&grads.class_logits, &grads.box, &grads.center, &grads.size3d,
                        &grads.angle, &grads.d_reg, &grads.log_sigma}) {
        for (int i = 0; i < g->numel(); ++i) (*g)[i] *= inv_batch;
      }
      for (int i = 0; i < grad_logits.numel(); ++i) {
        grad_logits[i] *= cfg.weights.lambda_msm * inv_batch;
      }
      model.backward(scene.map_v, scene.map_d, cache, grads, grad_logits);
    }
    const QueryLossResult qres = qres_mean;
    const double msm_value = msm_mean;
    last_total = total;
    last_query = qres;
    last_msm = msm_value;
    opt.step(params);

    // Fusion weights are unconstrained by design; excursions are reported,
    // not clamped.
    bool excursion = false;
    for (const DecoderLayer& layer : model.layers) {
      for (double w : layer.fusion.w.tensor.values) {
        if (w < 0.0 || w > 1.0) {
          excursion = true;
          break;
        }
      }
      if (excursion) break;
    }
    if (excursion) ++result.fusion_excursion_steps;

    const bool last_step = step + 1 == cfg.steps;
    if ((step + 1) % cfg.eval_interval == 0 || last_step) {
      const EvalStats stats = evaluate_model(model, cfg, cfg.eval_scenes);
      MetricsRow row;
      row.step = step + 1;
      row.total_loss = total;
      row.query_terms = qres.terms;
      row.msm = msm_value;
      row.matching_accuracy = stats.matching_accuracy;
      row.position_precision = stats.position_precision;
      row.weighted_position_precision = stats.weighted_position_precision;
      result.rows.push_back(row);
      if (last_step) result.final_eval = stats;
    }
  }

  if (cfg.steps == 0) {
    result.final_eval = evaluate_model(model, cfg, cfg.eval_scenes);
  }
  (void)last_total;
  (void)last_query;
  (void)last_msm;
  result.csv = metrics_csv(result.rows);
  return result;
}

}  // namespace ssda

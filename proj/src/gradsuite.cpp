#include "ssda/gradsuite.hpp"

#include <cmath>
#include <functional>

#include "ssda/detection.hpp"
#include "ssda/grad_check.hpp"
#include "ssda/model.hpp"
#include "ssda/msm.hpp"
#include "ssda/query_update.hpp"
#include "ssda/scene.hpp"

namespace ssda {

namespace {

constexpr double kEps = 1e-5;

void fill_random(Tensor& t, RandomStream& rng, double scale = 1.0) {
  for (double& v : t.values) v = rng.normal(0.0, scale);
}

Tensor random_tensor(const Shape& shape, RandomStream& rng, double scale = 1.0) {
  Tensor t(shape);
  fill_random(t, rng, scale);
  return t;
}

void zero_grads(std::initializer_list<Tensor*> tensors) {
  for (Tensor* t : tensors) {
    t->ensure_grad();
    t->zero_grad();
  }
}

/// Coordinate kept >= 0.2 pixels away from integer knots, where the bilinear
/// coordinate derivative is discontinuous.
double knot_offset_coord(RandomStream& rng, int extent) {
  return rng.randint(extent - 1) + rng.uniform(0.2, 0.8);
}

double check_linear(std::uint64_t seed) {
  RandomStream rng(seed);
  Tensor x = random_tensor({3, 5}, rng);
  Parameter w = make_weight("w", 5, 4, rng);
  Parameter b = make_bias("b", 4);
  fill_random(b.tensor, rng, 0.5);
  auto loss = [&] {
    const Tensor y = linear_forward(x, w, b);
    double s = 0.0;
    for (int i = 0; i < y.numel(); ++i) s += y[i] * y[i];
    return s;
  };
  auto backward = [&] {
    zero_grads({&x, &w.tensor, &b.tensor});
    const Tensor y = linear_forward(x, w, b);
    Tensor gy(y.shape);
    for (int i = 0; i < y.numel(); ++i) gy[i] = 2.0 * y[i];
    const Tensor gx = linear_backward(x, w, b, gy);
    x.grad = gx.values;
  };
  Tensor* inputs[] = {&x, &w.tensor, &b.tensor};
  return grad_check(loss, backward, inputs, kEps);
}

double check_conv(std::uint64_t seed) {
  RandomStream rng(seed);
  Tensor x = random_tensor({5, 6, 2}, rng);
  Parameter k = make_conv_kernel("k", 2, rng);
  Parameter b = make_bias("b", 2);
  fill_random(b.tensor, rng, 0.5);
  auto loss = [&] {
    const Tensor y = conv2d_stride2_forward(x, k, b);
    double s = 0.0;
    for (int i = 0; i < y.numel(); ++i) s += y[i] * y[i];
    return s;
  };
  auto backward = [&] {
    zero_grads({&x, &k.tensor, &b.tensor});
    const Tensor y = conv2d_stride2_forward(x, k, b);
    Tensor gy(y.shape);
    for (int i = 0; i < y.numel(); ++i) gy[i] = 2.0 * y[i];
    const Tensor gx = conv2d_stride2_backward(x, k, b, gy);
    x.grad = gx.values;
  };
  Tensor* inputs[] = {&x, &k.tensor, &b.tensor};
  return grad_check(loss, backward, inputs, kEps);
}

double check_softmax(std::uint64_t seed) {
  RandomStream rng(seed);
  Tensor logits = random_tensor({3, 4}, rng);
  const Tensor a = random_tensor({3, 4}, rng);
  auto loss = [&] {
    const Tensor p = softmax(logits);
    double s = 0.0;
    for (int i = 0; i < p.numel(); ++i) s += a[i] * p[i];
    return s;
  };
  auto backward = [&] {
    zero_grads({&logits});
    const Tensor p = softmax(logits);
    logits.grad = softmax_backward(p, a).values;
  };
  Tensor* inputs[] = {&logits};
  return grad_check(loss, backward, inputs, kEps);
}

double check_self_attention(std::uint64_t seed) {
  RandomStream rng(seed);
  SelfAttention layer(4, 2, "sa", rng);
  Tensor x = random_tensor({3, 4}, rng);
  const Tensor a = random_tensor({3, 4}, rng);
  std::vector<Tensor*> inputs{&x};
  for (Parameter* p : layer.parameters()) inputs.push_back(&p->tensor);
  auto loss = [&] {
    const Tensor y = self_attention_forward(layer, x, nullptr);
    double s = 0.0;
    for (int i = 0; i < y.numel(); ++i) s += a[i] * y[i];
    return s;
  };
  auto backward = [&] {
    for (Tensor* t : inputs) {
      t->ensure_grad();
      t->zero_grad();
    }
    SelfAttentionCache cache;
    self_attention_forward(layer, x, &cache);
    x.grad = self_attention_backward(layer, cache, a).values;
  };
  return grad_check(loss, backward, inputs, kEps);
}

double check_bilinear(std::uint64_t seed) {
  RandomStream rng(seed);
  FeatureMap map(5, 5, 3, 16);
  fill_random(map.data, rng);
  Tensor coords(Shape{4, 2});
  for (int i = 0; i < 3; ++i) {
    coords[i * 2] = knot_offset_coord(rng, map.width);
    coords[i * 2 + 1] = knot_offset_coord(rng, map.height);
  }
  // One clamped coordinate: zero gradient on both routes.
  coords[6] = -2.5;
  coords[7] = knot_offset_coord(rng, map.height);
  const Tensor a = random_tensor({4, 3}, rng);
  auto to_points = [&] {
    std::vector<Point> pts(4);
    for (int i = 0; i < 4; ++i) pts[static_cast<std::size_t>(i)] = {coords[i * 2], coords[i * 2 + 1]};
    return pts;
  };
  auto loss = [&] {
    const std::vector<Point> pts = to_points();
    const Tensor s = bilinear_sample(map, pts);
    double out = 0.0;
    for (int i = 0; i < s.numel(); ++i) out += a[i] * s[i];
    return out;
  };
  auto backward = [&] {
    zero_grads({&map.data, &coords});
    const std::vector<Point> pts = to_points();
    Tensor grad_map(map.data.shape);
    std::vector<Point> grad_pts;
    bilinear_sample_backward(map, pts, a, &grad_map, &grad_pts);
    map.data.grad = grad_map.values;
    for (int i = 0; i < 4; ++i) {
      coords.grad[static_cast<std::size_t>(i * 2)] = grad_pts[static_cast<std::size_t>(i)][0];
      coords.grad[static_cast<std::size_t>(i * 2 + 1)] = grad_pts[static_cast<std::size_t>(i)][1];
    }
  };
  Tensor* inputs[] = {&map.data, &coords};
  return grad_check(loss, backward, inputs, kEps);
}

double check_local_features(std::uint64_t seed) {
  RandomStream rng(seed);
  FeatureMap map(8, 8, 3, 16);
  fill_random(map.data, rng);
  QuerySet qs;
  qs.count = 2;
  qs.features = Tensor(Shape{2, 3});
  qs.positions = {{rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7)},
                  {rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7)}};
  const ShapeScalePreset presets{{{1, 1}, {1, 2}}};
  const Tensor a = random_tensor({2, 2, 3}, rng);
  auto loss = [&] {
    const LocalFeatureStack stack = extract_local_features(map, qs, presets);
    double s = 0.0;
    for (int i = 0; i < stack.data.numel(); ++i) s += a[i] * stack.data[i];
    return s;
  };
  auto backward = [&] {
    zero_grads({&map.data});
    Tensor grad_map(map.data.shape);
    extract_local_features_backward(map, qs, presets, a, &grad_map);
    map.data.grad = grad_map.values;
  };
  Tensor* inputs[] = {&map.data};
  return grad_check(loss, backward, inputs, kEps);
}

double check_fusion(std::uint64_t seed) {
  RandomStream rng(seed);
  Tensor fv = random_tensor({4, 3}, rng);
  Tensor fd = random_tensor({4, 3}, rng);
  FusionWeights weights(4, "fusion.w");
  for (double& v : weights.w.tensor.values) v = rng.uniform(0.2, 0.8);
  const Tensor a = random_tensor({4, 3}, rng);
  auto loss = [&] {
    const Tensor out = fuse_query_features(fv, fd, weights);
    double s = 0.0;
    for (int i = 0; i < out.numel(); ++i) s += a[i] * out[i];
    return s;
  };
  auto backward = [&] {
    zero_grads({&fv, &fd, &weights.w.tensor});
    const FuseGrads g = fuse_query_features_backward(fv, fd, weights, a);
    fv.grad = g.fv.values;
    fd.grad = g.fd.values;
  };
  Tensor* inputs[] = {&fv, &fd, &weights.w.tensor};
  return grad_check(loss, backward, inputs, kEps);
}

double check_matching_head(std::uint64_t seed) {
  RandomStream rng(seed);
  Tensor fused = random_tensor({3, 4}, rng);
  MatchingHead head(4, 5, "matching", rng);
  const Tensor a = random_tensor({3, 5}, rng);
  auto loss = [&] {
    const MatchingDistribution dist = predict_matching_distribution(fused, head);
    double s = 0.0;
    for (int i = 0; i < dist.p.numel(); ++i) s += a[i] * dist.p[i];
    return s;
  };
  auto backward = [&] {
    zero_grads({&fused, &head.weight.tensor, &head.bias.tensor});
    const MatchingDistribution dist = predict_matching_distribution(fused, head);
    const Tensor glogits = softmax_backward(dist.p, a);
    fused.grad = matching_head_backward(fused, head, glogits).values;
  };
  Tensor* inputs[] = {&fused, &head.weight.tensor, &head.bias.tensor};
  return grad_check(loss, backward, inputs, kEps);
}

double check_build_filter(std::uint64_t seed) {
  RandomStream rng(seed);
  LocalFeatureStack local{random_tensor({3, 2, 4}, rng)};
  Tensor p = random_tensor({3, 2}, rng, 0.4);
  AdaptiveFilterLayer layer(4, "filter", rng);
  const Tensor a = random_tensor({3, 4}, rng);
  auto loss = [&] {
    const Tensor f = build_filter(local, p, layer, nullptr);
    double s = 0.0;
    for (int i = 0; i < f.numel(); ++i) s += a[i] * f[i];
    return s;
  };
  auto backward = [&] {
    zero_grads({&local.data, &p, &layer.weight.tensor, &layer.bias.tensor});
    BuildFilterCache cache;
    build_filter(local, p, layer, &cache);
    const BuildFilterGrads g = build_filter_backward(local, p, layer, cache, a);
    local.data.grad = g.local.values;
    p.grad = g.p.values;
  };
  Tensor* inputs[] = {&local.data, &p, &layer.weight.tensor, &layer.bias.tensor};
  return grad_check(loss, backward, inputs, kEps);
}

double check_deformable(std::uint64_t seed) {
  RandomStream rng(seed);
  FeatureMap map(6, 6, 4, 16);
  fill_random(map.data, rng);
  QuerySet qs;
  qs.count = 2;
  qs.features = Tensor(Shape{2, 4});
  qs.positions = {{rng.uniform(0.25, 0.75), rng.uniform(0.25, 0.75)},
                  {rng.uniform(0.25, 0.75), rng.uniform(0.25, 0.75)}};
  DeformableAttention layer(4, DeformableConfig{2, 2}, "deform", rng);
  fill_random(layer.offset_weight.tensor, rng, 0.2);
  fill_random(layer.score_weight.tensor, rng, 0.2);
  Tensor augmented = random_tensor({2, 4}, rng);
  const Tensor a = random_tensor({2, 4}, rng);
  std::vector<Tensor*> inputs{&augmented, &map.data};
  for (Parameter* p : layer.parameters()) inputs.push_back(&p->tensor);
  auto loss = [&] {
    const DeformableResult out = deformable_aggregate(layer, map, qs, augmented, nullptr);
    double s = 0.0;
    for (int i = 0; i < out.features.numel(); ++i) s += a[i] * out.features[i];
    return s;
  };
  auto backward = [&] {
    for (Tensor* t : inputs) {
      t->ensure_grad();
      t->zero_grad();
    }
    DeformableCache cache;
    deformable_aggregate(layer, map, qs, augmented, &cache);
    Tensor grad_map(map.data.shape);
    augmented.grad =
        deformable_aggregate_backward(layer, map, qs, cache, a, &grad_map).values;
    map.data.grad = grad_map.values;
  };
  return grad_check(loss, backward, inputs, kEps);
}

double check_msm(std::uint64_t seed) {
  RandomStream rng(seed);
  Tensor logits = random_tensor({4, 3}, rng);
  std::vector<std::pair<int, CategoryLabel>> labels;
  labels.emplace_back(0, CategoryLabel{rng.randint(3), {}});
  labels.emplace_back(2, CategoryLabel{rng.randint(3), {}});
  const double gamma = 2.0;
  auto make_dist = [&] {
    MatchingDistribution dist;
    dist.logits = logits;
    dist.p = softmax(logits);
    return dist;
  };
  auto loss = [&] { return msm_loss(make_dist(), labels, gamma); };
  auto backward = [&] {
    zero_grads({&logits});
    logits.grad = msm_loss_backward(make_dist(), labels, gamma).values;
  };
  Tensor* inputs[] = {&logits};
  return grad_check(loss, backward, inputs, kEps);
}

double check_shape_scale_l1(std::uint64_t seed) {
  RandomStream rng(seed);
  Tensor logits = random_tensor({3, 4}, rng);
  const ShapeScalePreset presets{{{1, 1}, {1, 2}, {1, 4}, {0.5, 4}}};
  std::vector<std::pair<int, ShapeScaleTruth>> truths;
  truths.emplace_back(0, ShapeScaleTruth{rng.uniform(0.5, 1.5), rng.uniform(1.0, 5.0)});
  truths.emplace_back(2, ShapeScaleTruth{rng.uniform(0.5, 1.5), rng.uniform(1.0, 5.0)});
  auto make_dist = [&] {
    MatchingDistribution dist;
    dist.logits = logits;
    dist.p = softmax(logits);
    return dist;
  };
  auto loss = [&] {
    const MatchingDistribution dist = make_dist();
    return shape_scale_l1_loss(dist, presets, truths, nullptr);
  };
  auto backward = [&] {
    zero_grads({&logits});
    const MatchingDistribution dist = make_dist();
    Tensor grad;
    shape_scale_l1_loss(dist, presets, truths, &grad);
    logits.grad = grad.values;
  };
  Tensor* inputs[] = {&logits};
  return grad_check(loss, backward, inputs, kEps);
}

double check_laplacian(std::uint64_t seed) {
  RandomStream rng(seed);
  Tensor d_pre(Shape{1}, rng.uniform(5.0, 30.0));
  Tensor log_sigma(Shape{1}, rng.uniform(-0.5, 1.5));
  const double d_gt = rng.uniform(5.0, 30.0);
  auto loss = [&] { return laplacian_depth_loss(d_pre[0], d_gt, log_sigma[0]); };
  auto backward = [&] {
    zero_grads({&d_pre, &log_sigma});
    const double sigma = std::exp(log_sigma[0]);
    const double delta = d_gt - d_pre[0];
    d_pre.grad[0] = -(2.0 / sigma) * (delta > 0 ? 1.0 : -1.0);
    log_sigma.grad[0] = 1.0 - (2.0 / sigma) * std::abs(delta);
  };
  Tensor* inputs[] = {&d_pre, &log_sigma};
  return grad_check(loss, backward, inputs, kEps);
}

double check_giou(std::uint64_t seed) {
  RandomStream rng(seed);
  Tensor pred(Shape{4});
  std::array<double, 4> target{};
  for (int i = 0; i < 4; ++i) {
    pred[i] = rng.uniform(0.4, 3.0);
    target[static_cast<std::size_t>(i)] = rng.uniform(0.4, 3.0);
  }
  auto to_array = [&] {
    return std::array<double, 4>{pred[0], pred[1], pred[2], pred[3]};
  };
  auto loss = [&] { return giou_loss(to_array(), target); };
  auto backward = [&] {
    zero_grads({&pred});
    const std::array<double, 4> g = giou_loss_grad(to_array(), target);
    for (int i = 0; i < 4; ++i) pred.grad[static_cast<std::size_t>(i)] = g[static_cast<std::size_t>(i)];
  };
  Tensor* inputs[] = {&pred};
  return grad_check(loss, backward, inputs, kEps);
}

struct QueryLossFixture {
  PredictionBatch preds;
  std::vector<ObjectTarget> targets;
  std::vector<std::pair<int, int>> matches;
  FeatureMap depth_map;

  explicit QueryLossFixture(RandomStream& rng) : depth_map(6, 6, 2, 16) {
    const int n = 3;
    preds.class_logits = random_tensor({n, 3}, rng);
    preds.box = Tensor(Shape{n, 4});
    for (int i = 0; i < preds.box.numel(); ++i) preds.box[i] = rng.uniform(0.5, 3.0);
    preds.center = Tensor(Shape{n, 2});
    for (int q = 0; q < n; ++q) {
      preds.center[q * 2] = knot_offset_coord(rng, depth_map.width);
      preds.center[q * 2 + 1] = knot_offset_coord(rng, depth_map.height);
    }
    preds.size3d = Tensor(Shape{n, 3});
    for (int i = 0; i < preds.size3d.numel(); ++i) preds.size3d[i] = rng.uniform(1.0, 3.0);
    preds.angle = random_tensor({n, 2}, rng);
    preds.d_reg = Tensor(Shape{n});
    for (int i = 0; i < n; ++i) preds.d_reg[i] = rng.uniform(5.0, 40.0);
    preds.log_sigma = random_tensor({n}, rng, 0.5);
    for (int i = 0; i < depth_map.data.numel(); ++i) {
      depth_map.data[i] = rng.uniform(5.0, 50.0);
    }
    for (int t = 0; t < 2; ++t) {
      ObjectTarget tgt;
      tgt.class_id = rng.randint(2);
      tgt.box_lrtb = {rng.uniform(8.0, 40.0), rng.uniform(8.0, 40.0), rng.uniform(8.0, 40.0),
                      rng.uniform(8.0, 40.0)};
      tgt.center3d_proj = {rng.uniform(20.0, 60.0), rng.uniform(20.0, 60.0)};
      tgt.size3d = {rng.uniform(1.2, 1.9), rng.uniform(1.5, 2.0), rng.uniform(3.5, 4.5)};
      tgt.depth = rng.uniform(8.0, 50.0);
      tgt.angle = rng.uniform(-3.0, 3.0);
      tgt.focal_length = 700.0;
      targets.push_back(tgt);
    }
    matches = {{0, 0}, {2, 1}};
  }

  std::vector<Tensor*> inputs() {
    return {&preds.class_logits, &preds.box,   &preds.center,   &preds.size3d,
            &preds.angle,        &preds.d_reg, &preds.log_sigma, &depth_map.data};
  }
};

double check_query_loss(std::uint64_t seed, const LossWeights& weights) {
  RandomStream rng(seed);
  QueryLossFixture fx(rng);
  const double gamma = 2.0;
  auto loss = [&] {
    return query_loss(fx.preds, fx.targets, fx.matches, fx.depth_map, weights, gamma, nullptr,
                      nullptr)
        .total;
  };
  std::vector<Tensor*> inputs = fx.inputs();
  auto backward = [&] {
    for (Tensor* t : inputs) {
      t->ensure_grad();
      t->zero_grad();
    }
    PredictionBatch grads;
    Tensor grad_map(fx.depth_map.data.shape);
    query_loss(fx.preds, fx.targets, fx.matches, fx.depth_map, weights, gamma, &grads,
               &grad_map);
    fx.preds.class_logits.grad = grads.class_logits.values;
    fx.preds.box.grad = grads.box.values;
    fx.preds.center.grad = grads.center.values;
    fx.preds.size3d.grad = grads.size3d.values;
    fx.preds.angle.grad = grads.angle.values;
    fx.preds.d_reg.grad = grads.d_reg.values;
    fx.preds.log_sigma.grad = grads.log_sigma.values;
    fx.depth_map.data.grad = grad_map.values;
  };
  return grad_check(loss, backward, inputs, kEps);
}

LossWeights only_lambda(int which) {
  LossWeights w{0, 0, 0, 0, 0, 0, 0, 0};
  switch (which) {
    case 1: w.lambda1 = 1; break;
    case 2: w.lambda2 = 1; break;
    case 3: w.lambda3 = 1; break;
    case 4: w.lambda4 = 1; break;
    case 5: w.lambda5 = 1; break;
    case 6: w.lambda6 = 1; break;
    case 7: w.lambda7 = 1; break;
    default: break;
  }
  return w;
}

ShapeScalePreset tiny_presets() { return ShapeScalePreset{{{1, 1}, {1, 2}, {2, 1}}}; }

double check_decoder(std::uint64_t seed) {
  RandomStream rng(seed);
  const int n = 3, c = 8;
  const ShapeScalePreset presets = tiny_presets();
  DecoderLayer layer(c, presets.size(), n, DeformableConfig{2, 2}, 0, "layer0", rng);
  fill_random(layer.deform.offset_weight.tensor, rng, 0.1);
  fill_random(layer.deform.score_weight.tensor, rng, 0.1);
  FeatureMap map_v(8, 8, c, 16), map_d(8, 8, c, 16);
  fill_random(map_v.data, rng);
  fill_random(map_d.data, rng);
  QuerySet qs;
  qs.count = n;
  qs.features = random_tensor({n, c}, rng, 0.5);
  qs.positions.resize(static_cast<std::size_t>(n));
  for (Point& p : qs.positions) p = {rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7)};
  const Tensor a = random_tensor({n, c}, rng);
  const Tensor b = random_tensor({n, presets.size()}, rng);

  std::vector<Tensor*> inputs{&qs.features, &map_v.data, &map_d.data};
  for (Parameter* p : layer.parameters()) inputs.push_back(&p->tensor);

  auto loss = [&] {
    const DecoderOutput out = decoder_layer_forward(layer, map_v, map_d, qs, presets, nullptr);
    double s = 0.0;
    for (int i = 0; i < out.features.numel(); ++i) s += a[i] * std::tanh(out.features[i]);
    for (int i = 0; i < out.dist.logits.numel(); ++i) s += b[i] * std::tanh(out.dist.logits[i]);
    return s;
  };
  auto backward = [&] {
    for (Tensor* t : inputs) {
      t->ensure_grad();
      t->zero_grad();
    }
    DecoderLayerCache cache;
    const DecoderOutput out = decoder_layer_forward(layer, map_v, map_d, qs, presets, &cache);
    Tensor gf(out.features.shape);
    for (int i = 0; i < gf.numel(); ++i) {
      const double th = std::tanh(out.features[i]);
      gf[i] = a[i] * (1.0 - th * th);
    }
    Tensor gl(out.dist.logits.shape);
    for (int i = 0; i < gl.numel(); ++i) {
      const double th = std::tanh(out.dist.logits[i]);
      gl[i] = b[i] * (1.0 - th * th);
    }
    Tensor grad_v(map_v.data.shape);
    Tensor grad_d(map_d.data.shape);
    const Tensor gx = decoder_layer_backward(layer, map_v, map_d, qs, presets, cache, gf, gl,
                                             &grad_v, &grad_d);
    qs.features.grad = gx.values;
    map_v.data.grad = grad_v.values;
    map_d.data.grad = grad_d.values;
  };
  return grad_check(loss, backward, inputs, kEps);
}

double check_model_step(std::uint64_t seed) {
  RandomStream rng(seed);
  ModelConfig mc;
  mc.query_count = 4;
  mc.channels = 8;
  mc.heads = 2;
  mc.points_per_head = 2;
  mc.num_classes = 2;
  Model model(mc, tiny_presets(), seed);
  for (DecoderLayer& layer : model.layers) {
    fill_random(layer.deform.offset_weight.tensor, rng, 0.1);
    fill_random(layer.deform.score_weight.tensor, rng, 0.1);
  }
  SceneParams sp;
  sp.map_height = 8;
  sp.map_width = 8;
  sp.channels = 8;
  sp.min_objects = 2;
  sp.max_objects = 2;
  sp.num_classes = 2;
  SyntheticScene scene = generate_scene(sp, model.presets, derive_seed(seed, "scene", 0));
  const QuerySet qs = model.query_set();
  const std::vector<std::pair<int, int>> matches = match_queries(qs, scene.targets, scene.map_v);
  const MSMConfig msm_cfg;
  std::vector<std::pair<int, CategoryLabel>> labels;
  for (const auto& [q, t] : matches) {
    const ObjectTarget& tgt = scene.targets[static_cast<std::size_t>(t)];
    labels.emplace_back(q, generate_category_label(
                               truth_from_box(tgt.box_lrtb[0], tgt.box_lrtb[1], tgt.box_lrtb[2],
                                              tgt.box_lrtb[3]),
                               model.presets, msm_cfg));
  }
  const LossWeights weights;
  const double gamma = 2.0;

  auto loss = [&] {
    const Model::ForwardResult fwd = model.forward(scene.map_v, scene.map_d, nullptr);
    const QueryLossResult q = query_loss(fwd.preds, scene.targets, matches, scene.map_d, weights,
                                         gamma, nullptr, nullptr);
    return total_loss(q.total, msm_loss(fwd.dist, labels, gamma), weights.lambda_msm);
  };

  std::vector<Tensor*> inputs{&model.query_features.tensor, &scene.map_v.data,
                              &scene.map_d.data};
  DecoderLayer& layer = model.layers[0];
  inputs.push_back(&layer.fusion.w.tensor);
  inputs.push_back(&layer.matching.weight.tensor);
  inputs.push_back(&layer.deform.offset_weight.tensor);
  inputs.push_back(&model.heads.box_w.tensor);
  inputs.push_back(&model.heads.class_w.tensor);
  inputs.push_back(&model.heads.sigma_w.tensor);

  auto backward = [&] {
    model.zero_grads();
    scene.map_v.data.ensure_grad();
    scene.map_v.data.zero_grad();
    scene.map_d.data.ensure_grad();
    scene.map_d.data.zero_grad();
    Model::ForwardCache cache;
    const Model::ForwardResult fwd = model.forward(scene.map_v, scene.map_d, &cache);
    PredictionBatch grads;
    Tensor grad_depth(scene.map_d.data.shape);
    query_loss(fwd.preds, scene.targets, matches, scene.map_d, weights, gamma, &grads,
               &grad_depth);
    Tensor grad_logits = msm_loss_backward(fwd.dist, labels, gamma);
    for (int i = 0; i < grad_logits.numel(); ++i) grad_logits[i] *= weights.lambda_msm;
    Tensor grad_v(scene.map_v.data.shape);
    Tensor grad_d(scene.map_d.data.shape);
    model.backward(scene.map_v, scene.map_d, cache, grads, grad_logits, &grad_v, &grad_d);
    // The depth map feeds both the decoder and the d_map loss path.
    for (int i = 0; i < grad_d.numel(); ++i) grad_d[i] += grad_depth[i];
    scene.map_v.data.grad = grad_v.values;
    scene.map_d.data.grad = grad_d.values;
  };
  return grad_check(loss, backward, inputs, kEps);
}

using CaseFn = std::function<double(std::uint64_t)>;

}  // namespace

std::vector<GradCheckCase> run_gradient_suite(int seeds_per_case, std::uint64_t root_seed) {
  struct Entry {
    const char* name;
    CaseFn fn;
  };
  const Entry entries[] = {
      {"linear", check_linear},
      {"conv2d_stride2", check_conv},
      {"softmax", check_softmax},
      {"self_attention", check_self_attention},
      {"bilinear_sample", check_bilinear},
      {"extract_local_features", check_local_features},
      {"fuse_query_features", check_fusion},
      {"matching_head", check_matching_head},
      {"build_filter", check_build_filter},
      {"deformable_aggregate", check_deformable},
      {"msm_loss", check_msm},
      {"shape_scale_l1_loss", check_shape_scale_l1},
      {"laplacian_depth_loss", check_laplacian},
      {"giou_loss", check_giou},
      {"loss_class", [](std::uint64_t s) { return check_query_loss(s, only_lambda(1)); }},
      {"loss_2dsize", [](std::uint64_t s) { return check_query_loss(s, only_lambda(2)); }},
      {"loss_xy3d", [](std::uint64_t s) { return check_query_loss(s, only_lambda(3)); }},
      {"loss_giou", [](std::uint64_t s) { return check_query_loss(s, only_lambda(4)); }},
      {"loss_3dsize", [](std::uint64_t s) { return check_query_loss(s, only_lambda(5)); }},
      {"loss_angle", [](std::uint64_t s) { return check_query_loss(s, only_lambda(6)); }},
      {"loss_depth", [](std::uint64_t s) { return check_query_loss(s, only_lambda(7)); }},
      {"query_loss_composite", [](std::uint64_t s) { return check_query_loss(s, LossWeights{}); }},
      {"decoder_forward", check_decoder},
      {"model_step", check_model_step},
  };
  std::vector<GradCheckCase> results;
  for (const Entry& entry : entries) {
    GradCheckCase c;
    c.name = entry.name;
    for (int s = 0; s < seeds_per_case; ++s) {
      const double err =
          entry.fn(derive_seed(root_seed, entry.name, static_cast<std::uint64_t>(s)));
      c.max_rel_error = std::max(c.max_rel_error, err);
    }
    c.pass = c.max_rel_error < c.tolerance;
    results.push_back(std::move(c));
  }
  return results;
}

}  // namespace ssda

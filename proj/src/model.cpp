#include "ssda/model.hpp"

#include <cmath>
#include <set>

#include <json.hpp>

namespace ssda {

void ModelConfig::validate() const {
  if (query_count < 1) throw ConfigError("model: query_count must be >= 1");
  if (channels < 1) throw ConfigError("model: channels must be >= 1");
  if (heads < 1 || channels % heads != 0) {
    throw ConfigError("model: channels " + std::to_string(channels) +
                      " not divisible by heads " + std::to_string(heads));
  }
  if (points_per_head < 1) throw ConfigError("model: points_per_head must be >= 1");
  if (decoder_layers < 1) throw ConfigError("model: decoder_layers must be >= 1");
  if (num_classes < 1) throw ConfigError("model: num_classes must be >= 1");
}

DetectionHeads::DetectionHeads(int channels, int num_classes, double depth_prior,
                               const std::string& prefix, RandomStream& rng) {
  class_w = make_weight(prefix + ".class_w", channels, num_classes + 1, rng);
  class_b = make_bias(prefix + ".class_b", num_classes + 1);
  box_w = make_weight(prefix + ".box_w", channels, 4, rng);
  box_b = make_bias(prefix + ".box_b", 4);
  center_w = make_weight(prefix + ".center_w", channels, 2, rng);
  center_b = make_bias(prefix + ".center_b", 2);
  size_w = make_weight(prefix + ".size_w", channels, 3, rng);
  size_b = make_bias(prefix + ".size_b", 3);
  angle_w = make_weight(prefix + ".angle_w", channels, 2, rng);
  angle_b = make_bias(prefix + ".angle_b", 2);
  depth_w = make_weight(prefix + ".depth_w", channels, 1, rng);
  depth_b = make_bias(prefix + ".depth_b", 1, depth_prior);
  sigma_w = make_weight(prefix + ".sigma_w", channels, 1, rng);
  sigma_b = make_bias(prefix + ".sigma_b", 1);
}

std::vector<Parameter*> DetectionHeads::parameters() {
  return {&class_w, &class_b, &box_w,   &box_b,   &center_w, &center_b, &size_w,
          &size_b,  &angle_w, &angle_b, &depth_w, &depth_b,  &sigma_w,  &sigma_b};
}

Model::Model(const ModelConfig& config, const ShapeScalePreset& preset_table, std::uint64_t seed)
    : cfg(config), presets(preset_table) {
  cfg.validate();
  presets.validate();
  RandomStream rng(derive_seed(seed, "model-init", 0));

  Tensor qf(Shape{cfg.query_count, cfg.channels});
  for (double& v : qf.values) v = rng.normal(0.0, 0.5);
  query_features = Parameter("queries.features", std::move(qf));

  // Jittered grid keeps the reference positions spread over the map while
  // still randomized per seed.
  const int grid = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(cfg.query_count))));
  query_positions.resize(static_cast<std::size_t>(cfg.query_count));
  for (int q = 0; q < cfg.query_count; ++q) {
    const int gy = q / grid;
    const int gx = q % grid;
    const double cell = 1.0 / grid;
    double x = (gx + 0.5) * cell + rng.uniform(-0.2, 0.2) * cell;
    double y = (gy + 0.5) * cell + rng.uniform(-0.2, 0.2) * cell;
    query_positions[static_cast<std::size_t>(q)] = {std::clamp(x, 0.0, 1.0),
                                                    std::clamp(y, 0.0, 1.0)};
  }

  DeformableConfig dcfg{cfg.heads, cfg.points_per_head};
  layers.reserve(static_cast<std::size_t>(cfg.decoder_layers));
  for (int l = 0; l < cfg.decoder_layers; ++l) {
    layers.emplace_back(cfg.channels, presets.size(), cfg.query_count, dcfg, cfg.ffn_hidden,
                        "layer" + std::to_string(l), rng);
  }
  heads = DetectionHeads(cfg.channels, cfg.num_classes, cfg.depth_prior, "heads", rng);
}

std::vector<Parameter*> Model::parameters() {
  std::vector<Parameter*> out;
  out.push_back(&query_features);
  for (DecoderLayer& layer : layers) {
    for (Parameter* p : layer.parameters()) out.push_back(p);
  }
  for (Parameter* p : heads.parameters()) out.push_back(p);
  std::set<std::string> names;
  for (Parameter* p : out) {
    if (!names.insert(p->name).second) {
      throw ConfigError("model: duplicate parameter name '" + p->name + "'");
    }
  }
  return out;
}

void Model::zero_grads() {
  for (Parameter* p : parameters()) {
    p->ensure_grad();
    p->zero_grad();
  }
}

QuerySet Model::query_set() const {
  QuerySet qs;
  qs.count = cfg.query_count;
  qs.features = query_features.tensor;
  qs.features.grad.clear();
  qs.positions = query_positions;
  return qs;
}

Model::ForwardResult Model::forward(const FeatureMap& map_v, const FeatureMap& map_d,
                                    ForwardCache* cache) const {
  ForwardCache local_cache;
  ForwardCache& cc = cache ? *cache : local_cache;
  cc.layer_caches.assign(static_cast<std::size_t>(cfg.decoder_layers), DecoderLayerCache{});
  cc.layer_inputs.clear();

  QuerySet qs = query_set();
  ForwardResult result;
  for (int l = 0; l < cfg.decoder_layers; ++l) {
    cc.layer_inputs.push_back(qs.features);
    DecoderOutput out = decoder_layer_forward(layers[static_cast<std::size_t>(l)], map_v, map_d,
                                              qs, presets, &cc.layer_caches[static_cast<std::size_t>(l)]);
    qs.features = out.features;
    if (l == cfg.decoder_layers - 1) {
      result.dist = std::move(out.dist);
      result.records = std::move(out.records);
    }
  }
  cc.features = qs.features;
  result.features = qs.features;

  const Tensor& f = cc.features;
  const int n = cfg.query_count;
  PredictionBatch preds;
  preds.class_logits = linear_forward(f, heads.class_w, heads.class_b);
  cc.box_raw = linear_forward(f, heads.box_w, heads.box_b);
  preds.box = Tensor(cc.box_raw.shape);
  // Floor keeps the geometric-depth denominator bounded away from zero.
  for (int i = 0; i < cc.box_raw.numel(); ++i) preds.box[i] = 0.05 + softplus(cc.box_raw[i]);
  Tensor center_delta = linear_forward(f, heads.center_w, heads.center_b);
  preds.center = Tensor(center_delta.shape);
  for (int q = 0; q < n; ++q) {
    const Point ref = map_v.denormalize(query_positions[static_cast<std::size_t>(q)]);
    preds.center[q * 2] = ref[0] + center_delta[q * 2];
    preds.center[q * 2 + 1] = ref[1] + center_delta[q * 2 + 1];
  }
  cc.size_raw = linear_forward(f, heads.size_w, heads.size_b);
  preds.size3d = Tensor(cc.size_raw.shape);
  for (int i = 0; i < cc.size_raw.numel(); ++i) preds.size3d[i] = 0.05 + softplus(cc.size_raw[i]);
  preds.angle = linear_forward(f, heads.angle_w, heads.angle_b);
  Tensor d_reg = linear_forward(f, heads.depth_w, heads.depth_b);
  preds.d_reg = Tensor(Shape{n}, d_reg.values);
  Tensor log_sigma = linear_forward(f, heads.sigma_w, heads.sigma_b);
  preds.log_sigma = Tensor(Shape{n}, log_sigma.values);
  result.preds = std::move(preds);
  return result;
}

void Model::backward(const FeatureMap& map_v, const FeatureMap& map_d, const ForwardCache& cache,
                     const PredictionBatch& grad_preds, const Tensor& grad_msm_logits,
                     Tensor* grad_map_v, Tensor* grad_map_d) {
  const Tensor& f = cache.features;
  const int n = cfg.query_count;
  Tensor grad_f(f.shape);

  auto add = [&grad_f](const Tensor& g) {
    for (int i = 0; i < g.numel(); ++i) grad_f[i] += g[i];
  };

  add(linear_backward(f, heads.class_w, heads.class_b, grad_preds.class_logits));
  {
    Tensor graw(cache.box_raw.shape);
    for (int i = 0; i < graw.numel(); ++i) {
      graw[i] = grad_preds.box[i] * sigmoid(cache.box_raw[i]);
    }
    add(linear_backward(f, heads.box_w, heads.box_b, graw));
  }
  add(linear_backward(f, heads.center_w, heads.center_b, grad_preds.center));
  {
    Tensor graw(cache.size_raw.shape);
    for (int i = 0; i < graw.numel(); ++i) {
      graw[i] = grad_preds.size3d[i] * sigmoid(cache.size_raw[i]);
    }
    add(linear_backward(f, heads.size_w, heads.size_b, graw));
  }
  add(linear_backward(f, heads.angle_w, heads.angle_b, grad_preds.angle));
  add(linear_backward(f, heads.depth_w, heads.depth_b,
                      Tensor(Shape{n, 1}, grad_preds.d_reg.values)));
  add(linear_backward(f, heads.sigma_w, heads.sigma_b,
                      Tensor(Shape{n, 1}, grad_preds.log_sigma.values)));

  Tensor grad_x = std::move(grad_f);
  const Tensor zero_logits(Shape{n, presets.size()});
  for (int l = cfg.decoder_layers - 1; l >= 0; --l) {
    QuerySet qs;
    qs.count = n;
    qs.features = cache.layer_inputs[static_cast<std::size_t>(l)];
    qs.positions = query_positions;
    const Tensor& ext =
        (l == cfg.decoder_layers - 1) ? grad_msm_logits : zero_logits;
    grad_x = decoder_layer_backward(layers[static_cast<std::size_t>(l)], map_v, map_d, qs,
                                    presets, cache.layer_caches[static_cast<std::size_t>(l)],
                                    grad_x, ext, grad_map_v, grad_map_d);
  }

  query_features.ensure_grad();
  for (int i = 0; i < grad_x.numel(); ++i) query_features.tensor.grad[static_cast<std::size_t>(i)] += grad_x[i];
}

std::string Model::save_state_text() const {
  nlohmann::ordered_json root;
  root["format"] = "ssda-model";
  root["version"] = 1;
  nlohmann::ordered_json params = nlohmann::ordered_json::object();
  Model& self = const_cast<Model&>(*this);
  for (Parameter* p : self.parameters()) {
    nlohmann::ordered_json entry;
    entry["shape"] = p->tensor.shape;
    entry["values"] = p->tensor.values;
    params[p->name] = std::move(entry);
  }
  root["params"] = std::move(params);
  nlohmann::ordered_json meta;
  meta["query_positions"] = nlohmann::ordered_json::array();
  for (const Point& pt : query_positions) {
    meta["query_positions"].push_back({pt[0], pt[1]});
  }
  root["meta"] = std::move(meta);
  return root.dump(2) + "\n";
}

void Model::load_state_text(const std::string& text) {
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("model state: ") + e.what());
  }
  if (!root.contains("params")) throw ParseError("model state: missing params");
  for (Parameter* p : parameters()) {
    if (!root["params"].contains(p->name)) {
      throw ParseError("model state: missing parameter '" + p->name + "'");
    }
    const auto& entry = root["params"][p->name];
    const Shape shape = entry["shape"].get<Shape>();
    if (shape != p->tensor.shape) {
      throw DimensionError("model state: parameter '" + p->name + "' has shape " +
                           shape_str(shape) + ", expected " + shape_str(p->tensor.shape));
    }
    p->tensor.values = entry["values"].get<std::vector<double>>();
    p->tensor.check_finite("model state " + p->name);
  }
  if (root.contains("meta") && root["meta"].contains("query_positions")) {
    const auto& qp = root["meta"]["query_positions"];
    if (qp.size() == query_positions.size()) {
      for (std::size_t i = 0; i < query_positions.size(); ++i) {
        query_positions[i] = {qp[i][0].get<double>(), qp[i][1].get<double>()};
      }
    }
  }
}

}  // namespace ssda

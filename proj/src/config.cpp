#include "ssda/config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace ssda {

void RunConfig::validate() const {
  model_config().validate();
  scene_params().validate();
  ShapeScalePreset table = presets.entries.empty() ? preset_for_category(category) : presets;
  table.validate();
  if (query_count < max_objects) {
    throw ConfigError("config: query_count " + std::to_string(query_count) +
                      " smaller than max_objects " + std::to_string(max_objects));
  }
  if (steps < 0 || eval_interval < 1 || eval_scenes < 0) {
    throw ConfigError("config: invalid steps/eval settings");
  }
  if (batch_size < 1) throw ConfigError("config: batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("config: learning_rate must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("config: momentum must be in [0,1)");
  if (grad_clip_norm < 0.0) throw ConfigError("config: grad_clip_norm must be >= 0");
  if (lr_schedule != "constant" && lr_schedule != "cosine") {
    throw ConfigError("config: lr_schedule must be 'constant' or 'cosine'");
  }
  if (warmup_steps < 0) throw ConfigError("config: warmup_steps must be >= 0");
  if (optimizer != "sgd" && optimizer != "adam") {
    throw ConfigError("config: optimizer must be 'sgd' or 'adam', got '" + optimizer + "'");
  }
  if (!(msm_w1 > 0.0) || !(msm_w2 > 0.0)) throw ConfigError("config: msm weights must be positive");
  if (gamma < 0.0) throw ConfigError("config: gamma must be >= 0");
  const double lambdas[] = {weights.lambda1, weights.lambda2, weights.lambda3, weights.lambda4,
                            weights.lambda5, weights.lambda6, weights.lambda7,
                            weights.lambda_msm};
  for (double l : lambdas) {
    if (!(l >= 0.0) || !std::isfinite(l)) {
      throw ConfigError("config: loss weights must be finite and nonnegative");
    }
  }
  if (near_preset_fraction < 0.0 || near_preset_fraction > 1.0) {
    throw ConfigError("config: near_preset_fraction must be in [0,1]");
  }
}

ModelConfig RunConfig::model_config() const {
  ModelConfig mc;
  mc.query_count = query_count;
  mc.channels = channels;
  mc.heads = heads;
  mc.points_per_head = points_per_head;
  mc.decoder_layers = decoder_layers;
  mc.num_classes = num_classes;
  mc.ffn_hidden = ffn_hidden;
  mc.depth_prior = depth_prior;
  return mc;
}

SceneParams RunConfig::scene_params() const {
  SceneParams sp;
  sp.map_height = map_height;
  sp.map_width = map_width;
  sp.channels = channels;
  sp.min_objects = min_objects;
  sp.max_objects = max_objects;
  sp.num_classes = num_classes;
  sp.focal_length = focal_length;
  sp.near_preset_fraction = near_preset_fraction;
  sp.placement_grid = placement_grid;
  sp.center_jitter = center_jitter;
  return sp;
}

MSMConfig RunConfig::msm_config() const {
  return MSMConfig{msm_w1, msm_w2, gamma, weights.lambda_msm};
}

namespace {

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

RunConfig RunConfig::from_json_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("config: ") + e.what());
  }
  RunConfig cfg;
  read_field(j, "category", cfg.category);
  if (j.contains("presets")) {
    cfg.presets.entries.clear();
    for (const auto& entry : j.at("presets")) {
      if (!entry.is_array() || entry.size() != 2) {
        throw ParseError("config: presets must be [r, w] pairs");
      }
      cfg.presets.entries.push_back({entry[0].get<double>(), entry[1].get<double>()});
    }
  }
  read_field(j, "query_count", cfg.query_count);
  read_field(j, "channels", cfg.channels);
  read_field(j, "heads", cfg.heads);
  read_field(j, "points_per_head", cfg.points_per_head);
  read_field(j, "decoder_layers", cfg.decoder_layers);
  read_field(j, "num_classes", cfg.num_classes);
  read_field(j, "ffn_hidden", cfg.ffn_hidden);
  read_field(j, "map_height", cfg.map_height);
  read_field(j, "map_width", cfg.map_width);
  read_field(j, "min_objects", cfg.min_objects);
  read_field(j, "max_objects", cfg.max_objects);
  read_field(j, "focal_length", cfg.focal_length);
  read_field(j, "near_preset_fraction", cfg.near_preset_fraction);
  read_field(j, "placement_grid", cfg.placement_grid);
  read_field(j, "center_jitter", cfg.center_jitter);
  read_field(j, "lambda1", cfg.weights.lambda1);
  read_field(j, "lambda2", cfg.weights.lambda2);
  read_field(j, "lambda3", cfg.weights.lambda3);
  read_field(j, "lambda4", cfg.weights.lambda4);
  read_field(j, "lambda5", cfg.weights.lambda5);
  read_field(j, "lambda6", cfg.weights.lambda6);
  read_field(j, "lambda7", cfg.weights.lambda7);
  read_field(j, "lambda_msm", cfg.weights.lambda_msm);
  read_field(j, "msm_w1", cfg.msm_w1);
  read_field(j, "msm_w2", cfg.msm_w2);
  read_field(j, "gamma", cfg.gamma);
  read_field(j, "use_l1_shape_scale", cfg.use_l1_shape_scale);
  read_field(j, "seed", cfg.seed);
  read_field(j, "steps", cfg.steps);
  read_field(j, "batch_size", cfg.batch_size);
  read_field(j, "eval_interval", cfg.eval_interval);
  read_field(j, "eval_scenes", cfg.eval_scenes);
  read_field(j, "learning_rate", cfg.learning_rate);
  read_field(j, "momentum", cfg.momentum);
  read_field(j, "grad_clip_norm", cfg.grad_clip_norm);
  read_field(j, "lr_schedule", cfg.lr_schedule);
  read_field(j, "warmup_steps", cfg.warmup_steps);
  read_field(j, "optimizer", cfg.optimizer);
  read_field(j, "fixed_scene", cfg.fixed_scene);
  read_field(j, "depth_prior", cfg.depth_prior);
  read_field(j, "output_dir", cfg.output_dir);
  if (cfg.presets.entries.empty()) cfg.presets = preset_for_category(cfg.category);
  cfg.validate();
  return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

std::string RunConfig::to_json_text() const {
  nlohmann::ordered_json j;
  j["category"] = category;
  nlohmann::ordered_json table = nlohmann::ordered_json::array();
  const ShapeScalePreset& eff = presets;
  for (const ShapeScaleEntry& e : eff.entries) table.push_back({e.ratio, e.width});
  j["presets"] = std::move(table);
  j["query_count"] = query_count;
  j["channels"] = channels;
  j["heads"] = heads;
  j["points_per_head"] = points_per_head;
  j["decoder_layers"] = decoder_layers;
  j["num_classes"] = num_classes;
  j["ffn_hidden"] = ffn_hidden;
  j["map_height"] = map_height;
  j["map_width"] = map_width;
  j["min_objects"] = min_objects;
  j["max_objects"] = max_objects;
  j["focal_length"] = focal_length;
  j["near_preset_fraction"] = near_preset_fraction;
  j["placement_grid"] = placement_grid;
  j["center_jitter"] = center_jitter;
  j["lambda1"] = weights.lambda1;
  j["lambda2"] = weights.lambda2;
  j["lambda3"] = weights.lambda3;
  j["lambda4"] = weights.lambda4;
  j["lambda5"] = weights.lambda5;
  j["lambda6"] = weights.lambda6;
  j["lambda7"] = weights.lambda7;
  j["lambda_msm"] = weights.lambda_msm;
  j["msm_w1"] = msm_w1;
  j["msm_w2"] = msm_w2;
  j["gamma"] = gamma;
  j["use_l1_shape_scale"] = use_l1_shape_scale;
  j["seed"] = seed;
  j["steps"] = steps;
  j["batch_size"] = batch_size;
  j["eval_interval"] = eval_interval;
  j["eval_scenes"] = eval_scenes;
  j["learning_rate"] = learning_rate;
  j["momentum"] = momentum;
  j["grad_clip_norm"] = grad_clip_norm;
  j["lr_schedule"] = lr_schedule;
  j["warmup_steps"] = warmup_steps;
  j["optimizer"] = optimizer;
  j["fixed_scene"] = fixed_scene;
  j["depth_prior"] = depth_prior;
  j["output_dir"] = output_dir;
  return j.dump(2) + "\n";
}

}  // namespace ssda

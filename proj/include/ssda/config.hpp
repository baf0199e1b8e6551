#pragma once

#include <cstdint>
#include <string>

#include "ssda/detection.hpp"
#include "ssda/model.hpp"
#include "ssda/msm.hpp"
#include "ssda/scene.hpp"

namespace ssda {

/// Everything a run needs; validated against module preconditions before any
/// training starts. JSON keys match field names.
struct RunConfig {
  std::string category = "Car";
  ShapeScalePreset presets;  // defaults to the category table when empty

  int query_count = 16;
  int channels = 32;
  int heads = 8;
  int points_per_head = 4;
  int decoder_layers = 1;
  int num_classes = 1;
  int ffn_hidden = 0;

  int map_height = 16;
  int map_width = 16;
  int min_objects = 1;
  int max_objects = 3;
  double focal_length = 700.0;
  double near_preset_fraction = 0.75;
  int placement_grid = 4;
  double center_jitter = 0.6;

  LossWeights weights;  // lambda1..lambda7, lambda_msm
  double msm_w1 = 2.0;
  double msm_w2 = 1.0;
  double gamma = 2.0;
  bool use_l1_shape_scale = false;

  std::uint64_t seed = 1;
  int steps = 2000;
  int batch_size = 3;
  int eval_interval = 500;
  int eval_scenes = 200;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double grad_clip_norm = 5.0;  // 0 disables clipping
  std::string lr_schedule = "cosine";  // "constant" or "cosine"
  int warmup_steps = 100;
  std::string optimizer = "sgd";  // "sgd" or "adam"
  bool fixed_scene = false;
  double depth_prior = 25.0;

  std::string output_dir = "out";

  void validate() const;
  ModelConfig model_config() const;
  SceneParams scene_params() const;
  MSMConfig msm_config() const;

  static RunConfig from_json_text(const std::string& text);
  static RunConfig load(const std::string& path);
  std::string to_json_text() const;
};

}  // namespace ssda

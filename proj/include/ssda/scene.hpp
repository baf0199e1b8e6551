#pragma once

#include <cstdint>
#include <vector>

#include "ssda/detection.hpp"
#include "ssda/geometry.hpp"
#include "ssda/rng.hpp"

namespace ssda {

/// Stand-in for the backbone and encoders: a visual map whose object interiors
/// carry class- and geometry-distinct patterns over background noise, and a
/// depth map whose channel 0 carries metric depth.
struct SyntheticScene {
  FeatureMap map_v;
  FeatureMap map_d;
  std::vector<ObjectTarget> targets;
  std::uint64_t seed = 0;
};

struct SceneParams {
  int map_height = 16;
  int map_width = 16;
  int channels = 32;
  int min_objects = 1;
  int max_objects = 3;
  int num_classes = 1;
  double focal_length = 700.0;
  double background_depth = 80.0;
  double near_preset_fraction = 0.75;
  // Object centers jitter around the nodes of a placement_grid x placement_grid
  // lattice (matching the query layout); 0 places centers uniformly at random.
  int placement_grid = 4;
  double center_jitter = 0.6;  // feature px

  void validate() const;
};

/// Stamps one axis-aligned object with exact shape&scale (ratio, width) and
/// returns its ground-truth record. Box dims in image px are width*16 by
/// ratio*width*16. If center_ft is null a valid random center is drawn.
ObjectTarget place_object(SyntheticScene& scene, RandomStream& rng, const SceneParams& params,
                          double ratio, double width, int class_id,
                          const Point* center_ft = nullptr);

/// Deterministic scene: same seed, identical bytes. Objects draw (r, w) near
/// the preset list with noise plus off-preset samples.
SyntheticScene generate_scene(const SceneParams& params, const ShapeScalePreset& presets,
                              std::uint64_t seed);

}  // namespace ssda

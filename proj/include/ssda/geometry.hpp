#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "ssda/tensor.hpp"

namespace ssda {

using Point = std::array<double, 2>;  // (x, y)

/// Dense H'xW'xC grid of features, the sampling substrate for all attention
/// operations. stride_to_image is the integer scale back to image pixels
/// (16 for full-resolution maps, 64 for reduced maps).
struct FeatureMap {
  int height = 0;
  int width = 0;
  int channels = 0;
  int stride_to_image = 16;
  Tensor data;  // [height, width, channels]

  FeatureMap() = default;
  FeatureMap(int h, int w, int c, int stride);
  void validate() const;

  /// Normalized [0,1]^2 position -> this map's own pixel coordinates, so the
  /// same query addresses stride-16 and stride-64 maps without duplication.
  Point denormalize(const Point& normalized) const;
};

/// N object queries: a C-dim feature each plus a normalized 2D reference
/// position.
struct QuerySet {
  int count = 0;
  Tensor features;               // [N, C]
  std::vector<Point> positions;  // normalized (x, y) in [0,1]^2

  void validate() const;
};

struct ShapeScaleEntry {
  double ratio = 1.0;  // r: box height / box width
  double width = 1.0;  // w: box width in stride-16 feature pixels
};

/// Ordered list of (r, w) pairs defining mask geometries and the matching
/// category space.
struct ShapeScalePreset {
  std::vector<ShapeScaleEntry> entries;

  int size() const { return static_cast<int>(entries.size()); }
  void validate() const;
};

ShapeScalePreset preset_car();
ShapeScalePreset preset_pedestrian();
ShapeScalePreset preset_cyclist();
ShapeScalePreset preset_multi_category();
ShapeScalePreset preset_for_category(const std::string& category);

struct LocalFeatureStack {
  Tensor data;  // [N, I, C]
};

/// Unit-spaced lattice of (r*w+1) rows x (w+1) columns centered at `center`,
/// vertical half-extent r*w/2 and horizontal half-extent w/2. Coordinates may
/// be fractional and may fall outside the map.
std::vector<Point> mask_lattice(double ratio, double width, const Point& center);

/// 4-neighbor bilinear interpolation in feature-pixel space. Coordinates are
/// clamped to the map borders first (border replication), which makes the
/// operation total.
Tensor bilinear_sample(const FeatureMap& map, std::span<const Point> coords);

/// Accumulates grads into *grad_map ([H,W,C], allocated by caller) and/or
/// *grad_coords (resized to coords.size()). Either sink may be null.
void bilinear_sample_backward(const FeatureMap& map, std::span<const Point> coords,
                              const Tensor& grad_out, Tensor* grad_map,
                              std::vector<Point>* grad_coords);

/// Arithmetic mean over the K lattice samples; samples is [K, C].
Tensor local_feature_average(const Tensor& samples);

/// For each query and each preset entry: mask_lattice at the denormalized
/// query position -> bilinear_sample -> local_feature_average. Output N x I x C.
LocalFeatureStack extract_local_features(const FeatureMap& map, const QuerySet& queries,
                                         const ShapeScalePreset& presets);
void extract_local_features_backward(const FeatureMap& map, const QuerySet& queries,
                                     const ShapeScalePreset& presets, const Tensor& grad_stack,
                                     Tensor* grad_map);

/// Bilinear sample at each query position denormalized to the map's own grid.
Tensor sample_queries_from_map(const FeatureMap& map, const QuerySet& queries);
void sample_queries_from_map_backward(const FeatureMap& map, const QuerySet& queries,
                                      const Tensor& grad_out, Tensor* grad_map);

}  // namespace ssda

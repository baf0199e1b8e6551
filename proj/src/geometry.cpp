#include "ssda/geometry.hpp"

#include <algorithm>
#include <cmath>

namespace ssda {

namespace {

constexpr double kIntegralTol = 1e-9;

bool nearly_integral(double v) { return std::abs(v - std::round(v)) < kIntegralTol; }

}  // namespace

FeatureMap::FeatureMap(int h, int w, int c, int stride)
    : height(h), width(w), channels(c), stride_to_image(stride), data(Shape{h, w, c}) {
  validate();
}

void FeatureMap::validate() const {
  if (height < 1 || width < 1 || channels < 1) {
    throw DimensionError("feature map: degenerate dims " + shape_str({height, width, channels}));
  }
  if (stride_to_image != 16 && stride_to_image != 64) {
    throw ConfigError("feature map: stride_to_image must be 16 or 64, got " +
                      std::to_string(stride_to_image));
  }
  require_shape(data, Shape{height, width, channels}, "feature map");
}

Point FeatureMap::denormalize(const Point& normalized) const {
  return {normalized[0] * (width - 1), normalized[1] * (height - 1)};
}

void QuerySet::validate() const {
  if (count != static_cast<int>(positions.size())) {
    throw DimensionError("query set: " + std::to_string(positions.size()) +
                         " positions for count " + std::to_string(count));
  }
  if (features.rank() != 2 || features.dim(0) != count) {
    throw DimensionError("query set: features shape " + shape_str(features.shape) +
                         " does not match count " + std::to_string(count));
  }
  for (const Point& p : positions) {
    if (!(p[0] >= 0.0 && p[0] <= 1.0 && p[1] >= 0.0 && p[1] <= 1.0)) {
      throw ConfigError("query set: position outside [0,1]^2");
    }
  }
  features.check_finite("query set features");
}

void ShapeScalePreset::validate() const {
  if (entries.empty()) {
    throw ConfigError("shape&scale preset: empty entry list");
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const ShapeScaleEntry& e = entries[i];
    if (!(e.ratio > 0.0) || !(e.width >= 1.0)) {
      throw ConfigError("shape&scale preset entry " + std::to_string(i) + ": need r > 0, w >= 1");
    }
    if (!nearly_integral(e.width)) {
      throw ConfigError("shape&scale preset entry " + std::to_string(i) + ": width " +
                        std::to_string(e.width) + " must be integral");
    }
    if (!nearly_integral(e.ratio * e.width) || e.ratio * e.width < 1.0 - kIntegralTol) {
      throw ConfigError("shape&scale preset entry " + std::to_string(i) + ": r*w = " +
                        std::to_string(e.ratio * e.width) + " must be a positive integer");
    }
  }
}

ShapeScalePreset preset_car() {
  return ShapeScalePreset{{{1, 1}, {1, 2}, {1, 4}, {1, 6}, {0.5, 4}, {0.5, 8}}};
}

ShapeScalePreset preset_pedestrian() { return ShapeScalePreset{{{2, 2}, {2, 4}, {3, 2}}}; }

ShapeScalePreset preset_cyclist() { return ShapeScalePreset{{{1, 2}, {1, 4}, {2, 2}}}; }

ShapeScalePreset preset_multi_category() {
  ShapeScalePreset p = preset_car();
  p.entries.push_back({2, 2});
  p.entries.push_back({3, 2});
  p.entries.push_back({2, 4});
  return p;
}

ShapeScalePreset preset_for_category(const std::string& category) {
  if (category == "Car" || category == "Vehicle") return preset_car();
  if (category == "Pedestrian") return preset_pedestrian();
  if (category == "Cyclist") return preset_cyclist();
  if (category == "Multi") return preset_multi_category();
  throw ConfigError("no preset table for category '" + category + "'");
}

std::vector<Point> mask_lattice(double ratio, double width, const Point& center) {
  if (!(width >= 1.0) || !nearly_integral(width)) {
    throw ConfigError("mask lattice: width " + std::to_string(width) +
                      " must be an integer >= 1");
  }
  const double rw = ratio * width;
  if (!(ratio > 0.0) || !nearly_integral(rw) || rw < 1.0 - kIntegralTol) {
    throw ConfigError("mask lattice: r*w = " + std::to_string(rw) +
                      " must be a positive integer");
  }
  const int rows = static_cast<int>(std::round(rw)) + 1;
  const int cols = static_cast<int>(std::round(width)) + 1;
  std::vector<Point> coords;
  coords.reserve(static_cast<std::size_t>(rows) * cols);
  const double y0 = center[1] - std::round(rw) / 2.0;
  const double x0 = center[0] - std::round(width) / 2.0;
  for (int iy = 0; iy < rows; ++iy) {
    for (int ix = 0; ix < cols; ++ix) {
      coords.push_back({x0 + ix, y0 + iy});
    }
  }
  return coords;
}

namespace {

struct Taps {
  int x0, x1, y0, y1;
  double fx, fy;
  bool clamped_x, clamped_y;
};

Taps compute_taps(const FeatureMap& map, const Point& p) {
  Taps t{};
  double cx = std::clamp(p[0], 0.0, static_cast<double>(map.width - 1));
  double cy = std::clamp(p[1], 0.0, static_cast<double>(map.height - 1));
  t.clamped_x = cx != p[0];
  t.clamped_y = cy != p[1];
  t.x0 = static_cast<int>(std::floor(cx));
  t.y0 = static_cast<int>(std::floor(cy));
  t.x1 = std::min(t.x0 + 1, map.width - 1);
  t.y1 = std::min(t.y0 + 1, map.height - 1);
  t.fx = cx - t.x0;
  t.fy = cy - t.y0;
  return t;
}

}  // namespace

Tensor bilinear_sample(const FeatureMap& map, std::span<const Point> coords) {
  map.validate();
  const int c = map.channels;
  const int w = map.width;
  Tensor out(Shape{static_cast<int>(coords.size()), c});
  const double* mv = map.data.values.data();
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const Point& p = coords[i];
    if (!std::isfinite(p[0]) || !std::isfinite(p[1])) {
      throw NumericError("bilinear_sample: non-finite coordinate at index " + std::to_string(i));
    }
    const Taps t = compute_taps(map, p);
    const double* v00 = mv + (static_cast<std::size_t>(t.y0) * w + t.x0) * c;
    const double* v01 = mv + (static_cast<std::size_t>(t.y0) * w + t.x1) * c;
    const double* v10 = mv + (static_cast<std::size_t>(t.y1) * w + t.x0) * c;
    const double* v11 = mv + (static_cast<std::size_t>(t.y1) * w + t.x1) * c;
    double* orow = out.values.data() + i * c;
    const double w00 = (1 - t.fy) * (1 - t.fx), w01 = (1 - t.fy) * t.fx;
    const double w10 = t.fy * (1 - t.fx), w11 = t.fy * t.fx;
    for (int ch = 0; ch < c; ++ch) {
      orow[ch] = w00 * v00[ch] + w01 * v01[ch] + w10 * v10[ch] + w11 * v11[ch];
    }
  }
  return out;
}

void bilinear_sample_backward(const FeatureMap& map, std::span<const Point> coords,
                              const Tensor& grad_out, Tensor* grad_map,
                              std::vector<Point>* grad_coords) {
  const int c = map.channels;
  const int w = map.width;
  require_shape(grad_out, Shape{static_cast<int>(coords.size()), c}, "bilinear backward");
  if (grad_map) {
    require_shape(*grad_map, map.data.shape, "bilinear backward grad_map");
  }
  if (grad_coords) {
    grad_coords->assign(coords.size(), Point{0.0, 0.0});
  }
  const double* mv = map.data.values.data();
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const Taps t = compute_taps(map, coords[i]);
    const double* g = grad_out.values.data() + i * c;
    const double w00 = (1 - t.fy) * (1 - t.fx), w01 = (1 - t.fy) * t.fx;
    const double w10 = t.fy * (1 - t.fx), w11 = t.fy * t.fx;
    if (grad_map) {
      double* gm = grad_map->values.data();
      double* g00 = gm + (static_cast<std::size_t>(t.y0) * w + t.x0) * c;
      double* g01 = gm + (static_cast<std::size_t>(t.y0) * w + t.x1) * c;
      double* g10 = gm + (static_cast<std::size_t>(t.y1) * w + t.x0) * c;
      double* g11 = gm + (static_cast<std::size_t>(t.y1) * w + t.x1) * c;
      for (int ch = 0; ch < c; ++ch) {
        g00[ch] += w00 * g[ch];
        g01[ch] += w01 * g[ch];
        g10[ch] += w10 * g[ch];
        g11[ch] += w11 * g[ch];
      }
    }
    if (grad_coords) {
      const double* v00 = mv + (static_cast<std::size_t>(t.y0) * w + t.x0) * c;
      const double* v01 = mv + (static_cast<std::size_t>(t.y0) * w + t.x1) * c;
      const double* v10 = mv + (static_cast<std::size_t>(t.y1) * w + t.x0) * c;
      const double* v11 = mv + (static_cast<std::size_t>(t.y1) * w + t.x1) * c;
      double gx = 0.0, gy = 0.0;
      for (int ch = 0; ch < c; ++ch) {
        gx += g[ch] * ((1 - t.fy) * (v01[ch] - v00[ch]) + t.fy * (v11[ch] - v10[ch]));
        gy += g[ch] * ((1 - t.fx) * (v10[ch] - v00[ch]) + t.fx * (v11[ch] - v01[ch]));
      }
      // Clamped coordinates have zero derivative wrt the raw input.
      (*grad_coords)[i] = {t.clamped_x ? 0.0 : gx, t.clamped_y ? 0.0 : gy};
    }
  }
}

Tensor local_feature_average(const Tensor& samples) {
  if (samples.rank() != 2 || samples.dim(0) < 1) {
    throw DimensionError("local_feature_average: empty lattice, got shape " +
                         shape_str(samples.shape));
  }
  const int k = samples.dim(0);
  const int c = samples.dim(1);
  Tensor out(Shape{c});
  for (int i = 0; i < k; ++i) {
    const double* row = samples.values.data() + static_cast<std::size_t>(i) * c;
    for (int ch = 0; ch < c; ++ch) out[ch] += row[ch];
  }
  for (int ch = 0; ch < c; ++ch) out[ch] /= k;
  return out;
}

LocalFeatureStack extract_local_features(const FeatureMap& map, const QuerySet& queries,
                                         const ShapeScalePreset& presets) {
  if (map.stride_to_image != 16) {
    throw ConfigError("extract_local_features: requires a stride-16 map, got stride " +
                      std::to_string(map.stride_to_image));
  }
  presets.validate();
  const int n = queries.count;
  const int i_count = presets.size();
  const int c = map.channels;
  LocalFeatureStack stack{Tensor(Shape{n, i_count, c})};
  for (int q = 0; q < n; ++q) {
    const Point center = map.denormalize(queries.positions[static_cast<std::size_t>(q)]);
    for (int i = 0; i < i_count; ++i) {
      const ShapeScaleEntry& e = presets.entries[static_cast<std::size_t>(i)];
      const std::vector<Point> lattice = mask_lattice(e.ratio, e.width, center);
      const Tensor samples = bilinear_sample(map, lattice);
      const Tensor mean = local_feature_average(samples);
      double* dst =
          stack.data.values.data() + (static_cast<std::size_t>(q) * i_count + i) * c;
      for (int ch = 0; ch < c; ++ch) dst[ch] = mean[ch];
    }
  }
  stack.data.check_finite("extract_local_features");
  return stack;
}

void extract_local_features_backward(const FeatureMap& map, const QuerySet& queries,
                                     const ShapeScalePreset& presets, const Tensor& grad_stack,
                                     Tensor* grad_map) {
  const int n = queries.count;
  const int i_count = presets.size();
  const int c = map.channels;
  require_shape(grad_stack, Shape{n, i_count, c}, "extract_local_features backward");
  if (!grad_map) return;
  for (int q = 0; q < n; ++q) {
    const Point center = map.denormalize(queries.positions[static_cast<std::size_t>(q)]);
    for (int i = 0; i < i_count; ++i) {
      const ShapeScaleEntry& e = presets.entries[static_cast<std::size_t>(i)];
      const std::vector<Point> lattice = mask_lattice(e.ratio, e.width, center);
      const int k = static_cast<int>(lattice.size());
      const double* g =
          grad_stack.values.data() + (static_cast<std::size_t>(q) * i_count + i) * c;
      Tensor grad_samples(Shape{k, c});
      for (int s = 0; s < k; ++s) {
        double* row = grad_samples.values.data() + static_cast<std::size_t>(s) * c;
        for (int ch = 0; ch < c; ++ch) row[ch] = g[ch] / k;
      }
      bilinear_sample_backward(map, lattice, grad_samples, grad_map, nullptr);
    }
  }
}

Tensor sample_queries_from_map(const FeatureMap& map, const QuerySet& queries) {
  std::vector<Point> coords(static_cast<std::size_t>(queries.count));
  for (int q = 0; q < queries.count; ++q) {
    coords[static_cast<std::size_t>(q)] =
        map.denormalize(queries.positions[static_cast<std::size_t>(q)]);
  }
  return bilinear_sample(map, coords);
}

void sample_queries_from_map_backward(const FeatureMap& map, const QuerySet& queries,
                                      const Tensor& grad_out, Tensor* grad_map) {
  std::vector<Point> coords(static_cast<std::size_t>(queries.count));
  for (int q = 0; q < queries.count; ++q) {
    coords[static_cast<std::size_t>(q)] =
        map.denormalize(queries.positions[static_cast<std::size_t>(q)]);
  }
  bilinear_sample_backward(map, coords, grad_out, grad_map, nullptr);
}

}  // namespace ssda

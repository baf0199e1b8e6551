#include "ssda/scene.hpp"

#include <algorithm>
#include <cmath>

namespace ssda {

namespace {

constexpr double kPi = 3.14159265358979323846;

struct BoxFt {
  double cx, cy, half_w, half_h;
};

double box_iou(const BoxFt& a, const BoxFt& b) {
  const double ix = std::min(a.cx + a.half_w, b.cx + b.half_w) -
                    std::max(a.cx - a.half_w, b.cx - b.half_w);
  const double iy = std::min(a.cy + a.half_h, b.cy + b.half_h) -
                    std::max(a.cy - a.half_h, b.cy - b.half_h);
  if (ix <= 0.0 || iy <= 0.0) return 0.0;
  const double inter = ix * iy;
  const double uni = 4.0 * a.half_w * a.half_h + 4.0 * b.half_w * b.half_h - inter;
  return inter / uni;
}

}  // namespace

void SceneParams::validate() const {
  if (map_height < 3 || map_width < 3) {
    throw ConfigError("scene: map dims must be >= 3, got " +
                      shape_str({map_height, map_width}));
  }
  if (channels < 1) throw ConfigError("scene: channels must be >= 1");
  if (min_objects < 0 || max_objects < min_objects) {
    throw ConfigError("scene: invalid object count range");
  }
  if (num_classes < 1) throw ConfigError("scene: num_classes must be >= 1");
  if (!(focal_length > 0.0)) throw ConfigError("scene: focal length must be positive");
  if (placement_grid < 0 || center_jitter < 0.0) {
    throw ConfigError("scene: invalid placement settings");
  }
}

ObjectTarget place_object(SyntheticScene& scene, RandomStream& rng, const SceneParams& params,
                          double ratio, double width, int class_id, const Point* center_ft) {
  const int h = params.map_height;
  const int w = params.map_width;
  const int c = params.channels;
  const double half_w = width / 2.0;
  const double half_h = ratio * width / 2.0;

  Point center{};
  if (center_ft) {
    center = *center_ft;
  } else {
    const double xlo = half_w + 0.1;
    const double xhi = (w - 1) - half_w - 0.1;
    const double ylo = half_h + 0.1;
    const double yhi = (h - 1) - half_h - 0.1;
    center = {xhi > xlo ? rng.uniform(xlo, xhi) : (w - 1) / 2.0,
              yhi > ylo ? rng.uniform(ylo, yhi) : (h - 1) / 2.0};
  }

  // Depth follows the pinhole relation for a plausible metric height.
  const double h3d = rng.uniform(1.25, 1.85);
  const double box_height_img = ratio * width * 16.0;
  double depth = params.focal_length * h3d / box_height_img * rng.uniform(0.9, 1.1);
  depth = std::clamp(depth, 4.0, params.background_depth - 5.0);

  // Instance-distinct pattern component.
  std::array<double, 8> instance{};
  for (double& v : instance) v = rng.normal(0.0, 1.0);

  // Anti-aliased stamp: each texel blends toward the object pattern by its
  // coverage fraction, so pooled responses stay continuous in the box area.
  double* mv = scene.map_v.data.values.data();
  double* md = scene.map_d.data.values.data();
  auto overlap = [](double lo, double hi, double p) {
    return std::max(0.0, std::min(hi, p + 0.5) - std::max(lo, p - 0.5));
  };
  for (int iy = 0; iy < h; ++iy) {
    const double cov_y = overlap(center[1] - half_h, center[1] + half_h, iy);
    if (cov_y <= 0.0) continue;
    for (int ix = 0; ix < w; ++ix) {
      const double cov = cov_y * overlap(center[0] - half_w, center[0] + half_w, ix);
      if (cov <= 0.0) continue;
      // Radial appearance profile: brightest at the object center, decaying
      // toward the box edge. Gives the interior a feature gradient.
      const double dn = std::min(1.0, std::max(std::abs(ix - center[0]) / std::max(0.5, half_w),
                                               std::abs(iy - center[1]) / std::max(0.5, half_h)));
      const double bump = 1.0 - 0.5 * dn;
      double* vrow = mv + (static_cast<std::size_t>(iy) * w + ix) * c;
      double* drow = md + (static_cast<std::size_t>(iy) * w + ix) * c;
      auto blend = [&](int ch, double value) {
        if (ch < c) vrow[ch] += cov * (value - vrow[ch]);
      };
      blend(0, 2.0 * bump + rng.normal(0.0, 0.1));
      blend(20, 2.5 * (1.0 - dn) + rng.normal(0.0, 0.1));
      blend(21, 2.5 * (1.0 - dn) * (1.0 - dn) + rng.normal(0.0, 0.1));
      blend(1, 1.5 * ratio + rng.normal(0.0, 0.1));
      blend(2, 0.5 * width + rng.normal(0.0, 0.1));
      blend(3, 0.5 * ratio * width + rng.normal(0.0, 0.1));
      blend(16, 1.5 * std::log(width) + rng.normal(0.0, 0.1));
      blend(17, 2.0 / width + rng.normal(0.0, 0.1));
      blend(18, std::log(ratio * width) + rng.normal(0.0, 0.1));
      blend(19, 3.0 * ratio - 0.5 * width + rng.normal(0.0, 0.1));
      blend(4 + class_id, 1.5 + rng.normal(0.0, 0.1));
      for (int j = 0; j < 8; ++j) {
        const int ch = 8 + j;
        if (ch < c) vrow[ch] += cov * 0.5 * instance[static_cast<std::size_t>(j)];
      }
      drow[0] += cov * (depth - drow[0]);
      if (c > 1) drow[1] += cov * (20.0 / depth + rng.normal(0.0, 0.05) - drow[1]);
      if (c > 2) drow[2] += cov * (depth / 20.0 + rng.normal(0.0, 0.05) - drow[2]);
    }
  }

  // Projected 3D center sits near the box center with a small jitter; the
  // (l,r,t,b) offsets are measured from it.
  const double jx = rng.uniform(-0.08, 0.08) * width * 16.0;
  const double jy = rng.uniform(-0.08, 0.08) * ratio * width * 16.0;
  const double left = (center[0] - half_w) * 16.0;
  const double right = (center[0] + half_w) * 16.0;
  const double top = (center[1] - half_h) * 16.0;
  const double bottom = (center[1] + half_h) * 16.0;
  ObjectTarget target;
  target.class_id = class_id;
  target.center3d_proj = {(left + right) / 2.0 + jx, (top + bottom) / 2.0 + jy};
  target.box_lrtb = {target.center3d_proj[0] - left, right - target.center3d_proj[0],
                     target.center3d_proj[1] - top, bottom - target.center3d_proj[1]};
  target.size3d = {h3d, rng.uniform(1.5, 2.0), rng.uniform(3.6, 4.6)};
  target.depth = depth;
  target.angle = rng.uniform(-kPi, kPi);
  target.focal_length = params.focal_length;
  target.validate();
  scene.targets.push_back(target);
  return target;
}

SyntheticScene generate_scene(const SceneParams& params, const ShapeScalePreset& presets,
                              std::uint64_t seed) {
  params.validate();
  presets.validate();
  RandomStream rng(seed);

  SyntheticScene scene;
  scene.seed = seed;
  scene.map_v = FeatureMap(params.map_height, params.map_width, params.channels, 16);
  scene.map_d = FeatureMap(params.map_height, params.map_width, params.channels, 16);
  for (double& v : scene.map_v.data.values) v = rng.normal(0.0, 0.25);
  for (int i = 0; i < scene.map_d.data.numel(); ++i) {
    const bool depth_channel = (i % params.channels) == 0;
    scene.map_d.data[i] =
        depth_channel ? params.background_depth + rng.normal(0.0, 0.5) : rng.normal(0.0, 0.25);
  }

  double rlo = presets.entries[0].ratio, rhi = rlo;
  double wlo = presets.entries[0].width, whi = wlo;
  for (const ShapeScaleEntry& e : presets.entries) {
    rlo = std::min(rlo, e.ratio);
    rhi = std::max(rhi, e.ratio);
    wlo = std::min(wlo, e.width);
    whi = std::max(whi, e.width);
  }

  const int count =
      params.min_objects + rng.randint(params.max_objects - params.min_objects + 1);
  std::vector<BoxFt> placed;
  std::vector<int> used_cells;
  for (int obj = 0; obj < count; ++obj) {
    double ratio, width;
    if (rng.uniform() < params.near_preset_fraction) {
      const ShapeScaleEntry& e =
          presets.entries[static_cast<std::size_t>(rng.randint(presets.size()))];
      ratio = e.ratio * rng.uniform(0.88, 1.12);
      width = e.width * rng.uniform(0.86, 1.14);
    } else {
      ratio = rng.uniform(0.8 * rlo, 1.2 * rhi);
      width = rng.uniform(std::max(0.8, 0.9 * wlo), 1.05 * whi);
    }
    // Keep the box inside the map with a small margin.
    width = std::min(width, (params.map_width - 1.5));
    width = std::min(width, (params.map_height - 1.5) / ratio);
    width = std::max(width, 0.8);

    const double half_w = width / 2.0;
    const double half_h = ratio * width / 2.0;
    const double xlo = half_w + 0.1;
    const double xhi = (params.map_width - 1) - half_w - 0.1;
    const double ylo = half_h + 0.1;
    const double yhi = (params.map_height - 1) - half_h - 0.1;
    auto clamp_center = [&](Point p) {
      return Point{xhi > xlo ? std::clamp(p[0], xlo, xhi) : (params.map_width - 1) / 2.0,
                   yhi > ylo ? std::clamp(p[1], ylo, yhi) : (params.map_height - 1) / 2.0};
    };
    Point center{};
    bool ok = false;
    for (int attempt = 0; attempt < 12 && !ok; ++attempt) {
      if (params.placement_grid > 0) {
        const int g = params.placement_grid;
        const int cell = rng.randint(g * g);
        const double cx = (cell % g + 0.5) / g * (params.map_width - 1);
        const double cy = (cell / g + 0.5) / g * (params.map_height - 1);
        center = clamp_center({cx + rng.uniform(-params.center_jitter, params.center_jitter),
                               cy + rng.uniform(-params.center_jitter, params.center_jitter)});
        ok = std::find(used_cells.begin(), used_cells.end(), cell) == used_cells.end();
        if (ok) used_cells.push_back(cell);
      } else {
        center = {xhi > xlo ? rng.uniform(xlo, xhi) : (params.map_width - 1) / 2.0,
                  yhi > ylo ? rng.uniform(ylo, yhi) : (params.map_height - 1) / 2.0};
        ok = true;
      }
      for (const BoxFt& b : placed) {
        if (box_iou({center[0], center[1], half_w, half_h}, b) > 0.25) {
          ok = false;
          break;
        }
      }
    }
    placed.push_back({center[0], center[1], half_w, half_h});
    place_object(scene, rng, params, ratio, width, rng.randint(params.num_classes), &center);
  }
  return scene;
}

}  // namespace ssda

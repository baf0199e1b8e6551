#pragma once

#include <string>
#include <vector>

#include "ssda/geometry.hpp"
#include "ssda/msm.hpp"

namespace ssda {

/// One line of a KITTI label file: 15 whitespace-separated fields.
struct KittiLabelRecord {
  std::string type;
  double truncated = 0.0;
  int occluded = 0;
  double alpha = 0.0;
  double bbox_left = 0.0, bbox_top = 0.0, bbox_right = 0.0, bbox_bottom = 0.0;
  double dim_height = 0.0, dim_width = 0.0, dim_length = 0.0;
  double loc_x = 0.0, loc_y = 0.0, loc_z = 0.0;
  double rotation_y = 0.0;
  int line_number = 0;

  bool dont_care() const { return type == "DontCare"; }
  double bbox_width() const { return bbox_right - bbox_left; }
  double bbox_height() const { return bbox_bottom - bbox_top; }
};

/// Parses one file; throws ParseError citing the line number on malformed
/// lines. DontCare rows are retained (flagged via dont_care()).
std::vector<KittiLabelRecord> parse_kitti_labels(const std::string& path);

/// Parses every *.txt under a directory (sorted by name), or a single file.
std::vector<KittiLabelRecord> parse_kitti_label_path(const std::string& path);

struct LabelStats {
  std::string category;
  int total_records = 0;
  int category_count = 0;  // non-DontCare records of the category
  int dontcare_count = 0;
  double fraction_w_in_1_14 = 0.0;
  double mean_r = 0.0;
  double mean_w = 0.0;
  std::vector<long long> w_histogram;   // bins [0,1),[1,2),...,[15,16), plus overflow
  std::vector<long long> r_histogram;   // bins of width 0.25 over [0,4), plus overflow
  std::vector<long long> preset_assignments;
  long long tie_count = 0;
};

/// Per-category distribution report: histograms of r_hat and w_hat
/// (bbox width / 16), the fraction with w_hat in [1,14], preset assignment
/// counts under the weighted-distance rule, and tie counts.
LabelStats label_stats(const std::vector<KittiLabelRecord>& records, const std::string& category,
                       const ShapeScalePreset& presets, const MSMConfig& cfg);

/// Deterministic JSON rendering (byte-stable for identical inputs).
std::string label_stats_to_json(const LabelStats& stats);

}  // namespace ssda

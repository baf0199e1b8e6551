#include "ssda/kitti.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace ssda {

std::vector<KittiLabelRecord> parse_kitti_labels(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw ParseError("cannot open label file: " + path);
  }
  std::vector<KittiLabelRecord> records;
  std::string line;
  int line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    std::istringstream ss(line);
    std::vector<std::string> fields;
    std::string tok;
    while (ss >> tok) fields.push_back(tok);
    if (fields.empty()) continue;
    if (fields.size() != 15) {
      throw ParseError(path + ":" + std::to_string(line_number) + ": expected 15 fields, got " +
                       std::to_string(fields.size()));
    }
    KittiLabelRecord rec;
    rec.type = fields[0];
    rec.line_number = line_number;
    try {
      std::size_t pos = 0;
      auto num = [&](int i) {
        const double v = std::stod(fields[static_cast<std::size_t>(i)], &pos);
        if (pos != fields[static_cast<std::size_t>(i)].size()) {
          throw std::invalid_argument("trailing characters");
        }
        return v;
      };
      rec.truncated = num(1);
      rec.occluded = static_cast<int>(std::llround(num(2)));
      rec.alpha = num(3);
      rec.bbox_left = num(4);
      rec.bbox_top = num(5);
      rec.bbox_right = num(6);
      rec.bbox_bottom = num(7);
      rec.dim_height = num(8);
      rec.dim_width = num(9);
      rec.dim_length = num(10);
      rec.loc_x = num(11);
      rec.loc_y = num(12);
      rec.loc_z = num(13);
      rec.rotation_y = num(14);
    } catch (const std::exception&) {
      throw ParseError(path + ":" + std::to_string(line_number) + ": malformed numeric field");
    }
    if (!rec.dont_care() && (rec.bbox_right <= rec.bbox_left || rec.bbox_bottom <= rec.bbox_top)) {
      throw ParseError(path + ":" + std::to_string(line_number) + ": degenerate bbox for type " +
                       rec.type);
    }
    records.push_back(std::move(rec));
  }
  return records;
}

std::vector<KittiLabelRecord> parse_kitti_label_path(const std::string& path) {
  namespace fs = std::filesystem;
  if (fs::is_directory(path)) {
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(path)) {
      if (entry.is_regular_file() && entry.path().extension() == ".txt") {
        files.push_back(entry.path().string());
      }
    }
    std::sort(files.begin(), files.end());
    std::vector<KittiLabelRecord> all;
    for (const std::string& f : files) {
      std::vector<KittiLabelRecord> recs = parse_kitti_labels(f);
      all.insert(all.end(), recs.begin(), recs.end());
    }
    return all;
  }
  return parse_kitti_labels(path);
}

LabelStats label_stats(const std::vector<KittiLabelRecord>& records, const std::string& category,
                       const ShapeScalePreset& presets, const MSMConfig& cfg) {
  presets.validate();
  LabelStats stats;
  stats.category = category;
  stats.total_records = static_cast<int>(records.size());
  stats.w_histogram.assign(17, 0);  // 16 integer bins + overflow
  stats.r_histogram.assign(17, 0);  // 16 quarter bins + overflow
  stats.preset_assignments.assign(static_cast<std::size_t>(presets.size()), 0);

  long long in_range = 0;
  double sum_r = 0.0, sum_w = 0.0;
  for (const KittiLabelRecord& rec : records) {
    if (rec.dont_care()) {
      ++stats.dontcare_count;
      continue;
    }
    if (rec.type != category) continue;
    ++stats.category_count;
    const double w_px = rec.bbox_width();
    const double w_hat = w_px / 16.0;
    const double r_hat = rec.bbox_height() / w_px;
    sum_r += r_hat;
    sum_w += w_hat;
    if (w_hat >= 1.0 && w_hat <= 14.0) ++in_range;
    const int wbin = w_hat < 16.0 ? static_cast<int>(w_hat) : 16;
    ++stats.w_histogram[static_cast<std::size_t>(wbin)];
    const int rbin = r_hat < 4.0 ? static_cast<int>(r_hat * 4.0) : 16;
    ++stats.r_histogram[static_cast<std::size_t>(rbin)];

    const CategoryLabel label = generate_category_label({r_hat, w_hat}, presets, cfg);
    ++stats.preset_assignments[static_cast<std::size_t>(label.index)];
    // A tie means at least one other preset sits at the same minimal distance.
    double best = 0.0;
    bool tied = false;
    for (int i = 0; i < presets.size(); ++i) {
      const ShapeScaleEntry& e = presets.entries[static_cast<std::size_t>(i)];
      const double dist = cfg.w1 * std::abs(r_hat - e.ratio) + cfg.w2 * std::abs(w_hat - e.width);
      if (i == label.index) {
        best = dist;
      }
    }
    for (int i = 0; i < presets.size(); ++i) {
      if (i == label.index) continue;
      const ShapeScaleEntry& e = presets.entries[static_cast<std::size_t>(i)];
      const double dist = cfg.w1 * std::abs(r_hat - e.ratio) + cfg.w2 * std::abs(w_hat - e.width);
      if (std::abs(dist - best) <= 1e-12) {
        tied = true;
        break;
      }
    }
    if (tied) ++stats.tie_count;
  }
  if (stats.category_count > 0) {
    stats.fraction_w_in_1_14 = static_cast<double>(in_range) / stats.category_count;
    stats.mean_r = sum_r / stats.category_count;
    stats.mean_w = sum_w / stats.category_count;
  }
  return stats;
}

std::string label_stats_to_json(const LabelStats& stats) {
  nlohmann::ordered_json j;
  j["category"] = stats.category;
  j["total_records"] = stats.total_records;
  j["category_count"] = stats.category_count;
  j["dontcare_count"] = stats.dontcare_count;
  j["fraction_w_in_1_14"] = stats.fraction_w_in_1_14;
  j["mean_r"] = stats.mean_r;
  j["mean_w"] = stats.mean_w;
  j["w_histogram"] = stats.w_histogram;
  j["r_histogram"] = stats.r_histogram;
  j["preset_assignments"] = stats.preset_assignments;
  j["tie_count"] = stats.tie_count;
  return j.dump(2) + "\n";
}

}  // namespace ssda

// Acceptance suite: one pass/fail line per criterion, nonzero exit on failure.
//
// Training-based criteria share runs: the lambda sweep reuses the seeds of the
// matching-accuracy and supervision-direction checks wherever configs agree.

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ssda/config.hpp"
#include "ssda/detection.hpp"
#include "ssda/gradsuite.hpp"
#include "ssda/kitti.hpp"
#include "ssda/msm.hpp"
#include "ssda/query_update.hpp"
#include "ssda/rng.hpp"
#include "ssda/scene.hpp"
#include "ssda/train.hpp"

namespace fs = std::filesystem;
using namespace ssda;

namespace {

const std::string kFixtures = SSDA_FIXTURE_DIR;

struct CriterionResult {
  int id;
  std::string name;
  bool pass;
  std::string detail;
};

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------- criterion 1

CriterionResult criterion_gradients(int seeds) {
  const std::vector<GradCheckCase> cases = run_gradient_suite(seeds, 2026);
  double worst = 0.0;
  std::string worst_name;
  bool pass = true;
  for (const GradCheckCase& c : cases) {
    if (c.max_rel_error > worst) {
      worst = c.max_rel_error;
      worst_name = c.name;
    }
    pass = pass && c.pass;
  }
  std::ostringstream detail;
  detail << cases.size() << " ops x " << seeds << " seeds, worst " << worst_name << " "
         << worst;
  return {1, "gradient suite < 1e-4", pass, detail.str()};
}

// ---------------------------------------------------------------- criterion 2

CriterionResult criterion_msm_oracle() {
  const MSMConfig cfg;  // W1=2, W2=1
  bool pass = generate_category_label({0.9, 3.5}, preset_car(), cfg).index == 2;
  long long checked = 0;
  RandomStream rng(90210);
  for (const ShapeScalePreset& table :
       {preset_car(), preset_pedestrian(), preset_cyclist(), preset_multi_category()}) {
    for (int trial = 0; trial < 10000; ++trial) {
      const ShapeScaleTruth truth{rng.uniform(0.05, 4.5), rng.uniform(0.2, 18.0)};
      int best = 0;
      double best_dist = 1e300;
      for (int i = 0; i < table.size(); ++i) {
        const ShapeScaleEntry& e = table.entries[static_cast<std::size_t>(i)];
        const double dist =
            cfg.w1 * std::abs(truth.r_hat - e.ratio) + cfg.w2 * std::abs(truth.w_hat - e.width);
        if (dist < best_dist) {
          best = i;
          best_dist = dist;
        }
      }
      if (generate_category_label(truth, table, cfg).index != best) {
        pass = false;
      }
      ++checked;
    }
  }
  std::ostringstream detail;
  detail << checked << " draws across 4 preset tables, worked example (0.9,3.5)->[1,4]";
  return {2, "matching-label oracle agreement", pass, detail.str()};
}

// ---------------------------------------------------------------- criterion 3

CriterionResult criterion_equations() {
  bool pass = true;
  std::ostringstream detail;

  FeatureMap depth_map(4, 4, 1, 16);
  for (double& v : depth_map.data.values) v = 8.0;
  ObjectTarget target;
  target.class_id = 0;
  target.box_lrtb = {20, 20, 20, 20};
  target.center3d_proj = {32, 32};
  target.size3d = {1.5, 1.8, 4.0};
  target.depth = 20.0;
  target.focal_length = 700.0;
  QueryPrediction pred;
  pred.box_lrtb = {70, 70, 75, 75};
  pred.size3d = {1.5, 1.8, 4.0};
  pred.center3d_proj = {32, 32};
  pred.d_reg = 6.0;
  const DepthComponents parts = depth_components(pred, target, depth_map);
  pass = pass && std::abs(parts.d_geo - 7.0) < 1e-12;
  pass = pass && std::abs(parts.d_pre - 7.0) < 1e-12;

  const double laplace = laplacian_depth_loss(4.0, 5.0, std::log(2.0));
  pass = pass && std::abs(laplace - (1.0 + std::log(2.0))) < 1e-12;

  FusionWeights weights(1, "w");
  weights.w.tensor[0] = 0.3;
  Tensor fv(Shape{1, 3}, 1.0);
  Tensor fd(Shape{1, 3}, 2.0);
  const Tensor fused = fuse_query_features(fv, fd, weights);
  for (int i = 0; i < 3; ++i) pass = pass && std::abs(fused[i] - 1.7) < 1e-12;

  detail << "depth mean(6,7,8)=" << parts.d_pre << ", d_geo=" << parts.d_geo
         << ", laplacian=" << laplace << ", fused=" << fused[0];
  return {3, "equation fidelity spot-checks", pass, detail.str()};
}

// ---------------------------------------------------------------- criterion 4

CriterionResult criterion_structure() {
  bool pass = true;
  RandomStream rng(777);
  const int n = 6, c = 16;
  const ShapeScalePreset presets = preset_car();
  DecoderLayer layer(c, presets.size(), n, DeformableConfig{4, 4}, 0, "layer0", rng);
  for (double& v : layer.deform.offset_weight.tensor.values) v = rng.normal(0.0, 0.2);
  for (double& v : layer.deform.score_weight.tensor.values) v = rng.normal(0.0, 0.2);
  FeatureMap map_v(12, 12, c, 16), map_d(12, 12, c, 16);
  for (double& v : map_v.data.values) v = rng.normal();
  for (double& v : map_d.data.values) v = rng.normal();
  QuerySet qs;
  qs.count = n;
  qs.features = Tensor(Shape{n, c});
  for (double& v : qs.features.values) v = rng.normal(0.0, 0.5);
  for (int q = 0; q < n; ++q) qs.positions.push_back({rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)});

  DecoderLayerCache cache;
  const DecoderOutput out = decoder_layer_forward(layer, map_v, map_d, qs, presets, &cache);
  for (int q = 0; q < n; ++q) {
    double sum = 0.0;
    for (int i = 0; i < presets.size(); ++i) sum += out.dist.p[q * presets.size() + i];
    if (std::abs(sum - 1.0) > 1e-6) pass = false;
  }
  std::vector<double> head_sums(static_cast<std::size_t>(n * 4), 0.0);
  for (const KeyPointRecord& rec : out.records) {
    head_sums[static_cast<std::size_t>(rec.query * 4 + rec.head)] += rec.attention_weight;
  }
  for (double s : head_sums) {
    if (std::abs(s - 1.0) > 1e-6) pass = false;
  }
  for (int i = 0; i < cache.filter_cache.filter.numel(); ++i) {
    const double f = cache.filter_cache.filter[i];
    if (!(f > 0.0 && f < 1.0)) pass = false;
  }
  long long lattices = 0;
  for (const ShapeScalePreset& table :
       {preset_car(), preset_pedestrian(), preset_cyclist(), preset_multi_category()}) {
    for (const ShapeScaleEntry& e : table.entries) {
      const auto lattice = mask_lattice(e.ratio, e.width, {5.0, 5.0});
      const long long expected =
          (std::llround(e.ratio * e.width) + 1) * (std::llround(e.width) + 1);
      if (static_cast<long long>(lattice.size()) != expected) pass = false;
      ++lattices;
    }
  }
  std::ostringstream detail;
  detail << "rows stochastic, " << out.records.size() << " key points normalized per head, "
         << "filter in (0,1), " << lattices << " preset lattices counted";
  return {4, "structural invariants", pass, detail.str()};
}

// ------------------------------------------------------- training criteria 5-7

RunConfig acceptance_config() {
  RunConfig cfg;
  cfg.category = "Car";
  cfg.presets = preset_car();
  cfg.query_count = 16;
  cfg.channels = 32;
  cfg.heads = 8;
  cfg.points_per_head = 4;
  cfg.map_height = 16;
  cfg.map_width = 16;
  cfg.min_objects = 1;
  cfg.max_objects = 3;
  cfg.steps = 2000;
  cfg.eval_interval = 2000;
  cfg.eval_scenes = 200;
  cfg.learning_rate = 0.05;
  cfg.momentum = 0.9;
  return cfg;
}

struct RunKey {
  double lambda;
  std::uint64_t seed;
  bool operator<(const RunKey& other) const {
    if (lambda != other.lambda) return lambda < other.lambda;
    return seed < other.seed;
  }
};

class RunCache {
 public:
  explicit RunCache(const RunConfig& base) : base_(base) {}

  const EvalStats& get(double lambda, std::uint64_t seed) {
    const RunKey key{lambda, seed};
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    RunConfig cfg = base_;
    cfg.weights.lambda_msm = lambda;
    cfg.seed = seed;
    std::fprintf(stderr, "  [train lambda=%.2g seed=%llu ...]\n", lambda,
                 static_cast<unsigned long long>(seed));
    const TrainResult result = train_loop(cfg);
    return cache_.emplace(key, result.final_eval).first->second;
  }

 private:
  RunConfig base_;
  std::map<RunKey, EvalStats> cache_;
};

CriterionResult criterion_matching_accuracy(RunCache& runs, double lambda,
                                            const std::vector<std::uint64_t>& seeds) {
  int passing = 0;
  std::ostringstream detail;
  detail << "accuracy per seed:";
  for (std::uint64_t seed : seeds) {
    const EvalStats& stats = runs.get(lambda, seed);
    detail << ' ' << stats.matching_accuracy;
    if (stats.matching_accuracy >= 0.90) ++passing;
  }
  detail << " (need >= 0.90 in >= 4 of " << seeds.size() << ")";
  return {5, "synthetic matching accuracy", passing >= 4, detail.str()};
}

CriterionResult criterion_supervision_direction(RunCache& runs,
                                                const std::vector<std::uint64_t>& seeds) {
  double mean_on = 0.0, mean_off = 0.0;
  int weighted_ge_unweighted = 0;
  std::ostringstream detail;
  for (std::uint64_t seed : seeds) {
    const EvalStats& on = runs.get(0.1, seed);
    const EvalStats& off = runs.get(0.0, seed);
    mean_on += on.position_precision;
    mean_off += off.position_precision;
    const double unweighted_margin = on.position_precision - off.position_precision;
    const double weighted_margin =
        on.weighted_position_precision - off.weighted_position_precision;
    if (weighted_margin >= unweighted_margin) ++weighted_ge_unweighted;
  }
  mean_on /= static_cast<double>(seeds.size());
  mean_off /= static_cast<double>(seeds.size());
  const bool pass = mean_on > mean_off && weighted_ge_unweighted >= 3;
  detail << "mean precision " << mean_off << " -> " << mean_on << ", weighted margin >= "
         << "unweighted in " << weighted_ge_unweighted << "/" << seeds.size() << " seeds";
  return {6, "supervision improves key-point precision", pass, detail.str()};
}

CriterionResult criterion_lambda_sweep(RunCache& runs, const std::vector<double>& lambdas,
                                       const std::vector<std::uint64_t>& seeds) {
  std::vector<double> means;
  std::ostringstream detail;
  detail << "mean accuracy by lambda:";
  for (double lambda : lambdas) {
    double mean = 0.0;
    for (std::uint64_t seed : seeds) mean += runs.get(lambda, seed).matching_accuracy;
    mean /= static_cast<double>(seeds.size());
    means.push_back(mean);
    detail << ' ' << lambda << "->" << mean;
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < means.size(); ++i) {
    if (means[i] > means[best]) best = i;
  }
  // Best lambda must be interior (0.1/0.2/0.3): never 0, never 0.4.
  const bool pass = best >= 1 && best + 1 < means.size();
  detail << "; best lambda " << lambdas[best];
  return {7, "lambda sweep peaks at an interior value", pass, detail.str()};
}

// ---------------------------------------------------------------- criterion 8

CriterionResult criterion_label_stats(const std::string& cli) {
  bool pass = true;
  std::ostringstream detail;
  const fs::path tmp = fs::temp_directory_path() / "ssda_acceptance_labels";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  const std::string labels_dir = kFixtures + "/kitti";
  for (int round = 0; round < 2; ++round) {
    const fs::path out = tmp / ("round" + std::to_string(round));
    std::ostringstream cmd;
    cmd << '"' << cli << '"' << " label-stats --labels \"" << labels_dir
        << "\" --category Car --out \"" << out.string() << "\" > " << (tmp / "stdout.txt");
    if (std::system(cmd.str().c_str()) != 0) {
      pass = false;
      detail << "CLI label-stats failed; ";
    }
  }
  const std::string a = read_file(tmp / "round0" / "label_stats_Car.json");
  const std::string b = read_file(tmp / "round1" / "label_stats_Car.json");
  if (a.empty() || a != b) pass = false;
  detail << "fixture report deterministic (" << a.size() << " bytes)";

  if (const char* real = std::getenv("KITTI_LABEL_DIR"); real && *real) {
    const auto records = parse_kitti_label_path(real);
    const LabelStats stats = label_stats(records, "Car", preset_car(), MSMConfig{});
    detail << "; real KITTI Car w-in-[1,14] fraction " << stats.fraction_w_in_1_14;
    if (!(stats.fraction_w_in_1_14 > 0.9)) pass = false;
  } else {
    detail << "; real-KITTI check skipped (KITTI_LABEL_DIR unset)";
  }
  return {8, "label statistics", pass, detail.str()};
}

// ---------------------------------------------------------------- criterion 9

CriterionResult criterion_determinism(const std::string& cli) {
  const fs::path tmp = fs::temp_directory_path() / "ssda_acceptance_determinism";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  RunConfig cfg = acceptance_config();
  cfg.steps = 40;
  cfg.eval_interval = 10;
  cfg.eval_scenes = 16;
  cfg.seed = 11;
  const fs::path cfg_path = tmp / "config.json";
  {
    std::ofstream out(cfg_path);
    out << cfg.to_json_text();
  }
  bool pass = true;
  for (int round = 0; round < 2; ++round) {
    const fs::path out = tmp / ("round" + std::to_string(round));
    std::ostringstream cmd;
    cmd << '"' << cli << '"' << " train-synth --config \"" << cfg_path.string()
        << "\" --out \"" << out.string() << "\" > " << (tmp / "stdout.txt");
    if (std::system(cmd.str().c_str()) != 0) pass = false;
  }
  const std::string a = read_file(tmp / "round0" / "train_report.csv");
  const std::string b = read_file(tmp / "round1" / "train_report.csv");
  if (a.empty() || a != b) pass = false;
  std::ostringstream detail;
  detail << "two train-synth runs, CSV " << a.size() << " bytes, byte-identical="
         << (a == b ? "yes" : "no");
  return {9, "training determinism", pass, detail.str()};
}

}  // namespace

int main(int argc, char** argv) {
  std::string cli;
  bool quick = false;
  std::vector<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--cli" && i + 1 < argc) {
      cli = argv[++i];
    } else if (arg == "--quick") {
      quick = true;
    } else if (arg == "--only" && i + 1 < argc) {
      only.push_back(std::atoi(argv[++i]));
    }
  }
  auto wanted = [&](int id) {
    return only.empty() || std::find(only.begin(), only.end(), id) != only.end();
  };

  RunConfig base = acceptance_config();
  if (quick) {
    base.steps = 300;
    base.eval_scenes = 50;
  }
  RunCache runs(base);
  const std::vector<std::uint64_t> five_seeds{1, 2, 3, 4, 5};
  const std::vector<std::uint64_t> sweep_seeds{1, 2, 3};
  const std::vector<double> lambdas{0.0, 0.1, 0.2, 0.3, 0.4};

  std::vector<CriterionResult> results;
  try {
    if (wanted(1)) results.push_back(criterion_gradients(quick ? 3 : 10));
    if (wanted(2)) results.push_back(criterion_msm_oracle());
    if (wanted(3)) results.push_back(criterion_equations());
    if (wanted(4)) results.push_back(criterion_structure());
    if (wanted(5)) results.push_back(criterion_matching_accuracy(runs, 0.1, five_seeds));
    if (wanted(6)) results.push_back(criterion_supervision_direction(runs, five_seeds));
    if (wanted(7)) results.push_back(criterion_lambda_sweep(runs, lambdas, sweep_seeds));
    if (wanted(8)) {
      if (cli.empty()) {
        results.push_back({8, "label statistics", false, "no --cli path provided"});
      } else {
        results.push_back(criterion_label_stats(cli));
      }
    }
    if (wanted(9)) {
      if (cli.empty()) {
        results.push_back({9, "training determinism", false, "no --cli path provided"});
      } else {
        results.push_back(criterion_determinism(cli));
      }
    }
  } catch (const std::exception& e) {
    std::printf("[FAIL] acceptance aborted: %s\n", e.what());
    return 1;
  }

  int failures = 0;
  for (const CriterionResult& r : results) {
    std::printf("[%s] criterion %d: %s (%s)\n", r.pass ? "PASS" : "FAIL", r.id, r.name.c_str(),
                r.detail.c_str());
    if (!r.pass) ++failures;
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(results.size()) - failures,
              results.size());
  return failures == 0 ? 0 : 1;
}

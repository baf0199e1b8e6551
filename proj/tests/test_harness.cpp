#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <doctest.h>

#include "ssda/config.hpp"
#include "ssda/kitti.hpp"
#include "ssda/scene.hpp"
#include "ssda/train.hpp"

using namespace ssda;

namespace {

const std::string kFixtures = SSDA_FIXTURE_DIR;

RunConfig tiny_config() {
  RunConfig cfg;
  cfg.query_count = 4;
  cfg.channels = 16;
  cfg.heads = 4;
  cfg.points_per_head = 2;
  cfg.map_height = 12;
  cfg.map_width = 12;
  cfg.min_objects = 1;
  cfg.max_objects = 2;
  cfg.steps = 5;
  cfg.eval_interval = 5;
  cfg.eval_scenes = 4;
  cfg.learning_rate = 0.02;
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST_CASE("generate_scene: identical seeds reproduce identical scenes") {
  RunConfig cfg = tiny_config();
  const SyntheticScene a = generate_scene(cfg.scene_params(), preset_car(), 42);
  const SyntheticScene b = generate_scene(cfg.scene_params(), preset_car(), 42);
  CHECK(a.map_v.data.values == b.map_v.data.values);
  CHECK(a.map_d.data.values == b.map_d.data.values);
  REQUIRE(a.targets.size() == b.targets.size());
  for (std::size_t i = 0; i < a.targets.size(); ++i) {
    CHECK(a.targets[i].box_lrtb == b.targets[i].box_lrtb);
    CHECK(a.targets[i].center3d_proj == b.targets[i].center3d_proj);
    CHECK(a.targets[i].depth == b.targets[i].depth);
    CHECK(a.targets[i].angle == b.targets[i].angle);
  }
  const SyntheticScene c = generate_scene(cfg.scene_params(), preset_car(), 43);
  CHECK(a.map_v.data.values != c.map_v.data.values);
}

TEST_CASE("place_object: a (r=1, w=4) request measures 64x64 image pixels") {
  RunConfig cfg = tiny_config();
  SyntheticScene scene;
  scene.map_v = FeatureMap(12, 12, 16, 16);
  scene.map_d = FeatureMap(12, 12, 16, 16);
  RandomStream rng(7);
  const ObjectTarget target = place_object(scene, rng, cfg.scene_params(), 1.0, 4.0, 0);
  CHECK(target.box_lrtb[0] + target.box_lrtb[1] == doctest::Approx(64.0).epsilon(1e-12));
  CHECK(target.box_lrtb[2] + target.box_lrtb[3] == doctest::Approx(64.0).epsilon(1e-12));
  const ShapeScaleTruth truth =
      truth_from_box(target.box_lrtb[0], target.box_lrtb[1], target.box_lrtb[2], target.box_lrtb[3]);
  CHECK(truth.r_hat == doctest::Approx(1.0));
  CHECK(truth.w_hat == doctest::Approx(4.0));
}

TEST_CASE("generate_scene: zero-object request gives pure-noise maps") {
  RunConfig cfg = tiny_config();
  cfg.min_objects = 0;
  cfg.max_objects = 0;
  const SyntheticScene scene = generate_scene(cfg.scene_params(), preset_car(), 5);
  CHECK(scene.targets.empty());
}

TEST_CASE("generate_scene: every target box lies within image bounds") {
  RunConfig cfg = tiny_config();
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const SyntheticScene scene = generate_scene(cfg.scene_params(), preset_car(), seed);
    for (const ObjectTarget& t : scene.targets) {
      CHECK(t.center3d_proj[0] - t.box_lrtb[0] >= 0.0);
      CHECK(t.center3d_proj[0] + t.box_lrtb[1] <= cfg.map_width * 16.0);
      CHECK(t.center3d_proj[1] - t.box_lrtb[2] >= 0.0);
      CHECK(t.center3d_proj[1] + t.box_lrtb[3] <= cfg.map_height * 16.0);
    }
  }
}

TEST_CASE("parse_kitti_labels: the reference line parses field-exactly") {
  const auto records = parse_kitti_labels(kFixtures + "/kitti/000001.txt");
  REQUIRE(records.size() == 4);
  const KittiLabelRecord& car = records[0];
  CHECK(car.type == "Car");
  CHECK(car.bbox_width() == doctest::Approx(27.11).epsilon(1e-12));
  CHECK(car.alpha == doctest::Approx(-1.58));
  CHECK(car.dim_height == doctest::Approx(1.65));
  CHECK(car.loc_z == doctest::Approx(46.70));
  CHECK(car.rotation_y == doctest::Approx(-1.59));
  CHECK(records[3].dont_care());
}

TEST_CASE("parse_kitti_labels: empty files and malformed lines") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "ssda_kitti_test";
  fs::create_directories(dir);
  {
    std::ofstream empty(dir / "empty.txt");
  }
  CHECK(parse_kitti_labels((dir / "empty.txt").string()).empty());
  {
    std::ofstream bad(dir / "bad.txt");
    bad << "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59\n";
    bad << "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70\n";
  }
  CHECK_THROWS_WITH_AS(parse_kitti_labels((dir / "bad.txt").string()),
                       doctest::Contains(":2:"), ParseError);
  fs::remove_all(dir);
}

TEST_CASE("label_stats: fixture statistics and preset assignment") {
  const auto records = parse_kitti_label_path(kFixtures + "/kitti");
  const MSMConfig cfg;
  const LabelStats stats = label_stats(records, "Car", preset_car(), cfg);
  CHECK(stats.total_records == 6);
  CHECK(stats.category_count == 3);
  CHECK(stats.dontcare_count == 1);
  CHECK(stats.fraction_w_in_1_14 == doctest::Approx(1.0));
  long long assigned = 0;
  for (long long c : stats.preset_assignments) assigned += c;
  CHECK(assigned == stats.category_count);
  // The 27.11 px car: w_hat ~ 1.694, r_hat ~ 0.988 -> preset [1,2].
  CHECK(stats.preset_assignments[1] >= 1);
  // The 80 px car from 000002: w_hat = 5, r_hat = 0.5 -> preset [0.5,4].
  CHECK(stats.preset_assignments[4] >= 1);

  const std::string json1 = label_stats_to_json(stats);
  const std::string json2 = label_stats_to_json(label_stats(records, "Car", preset_car(), cfg));
  CHECK(json1 == json2);
}

TEST_CASE("label_stats: single worked record") {
  const auto records = parse_kitti_labels(kFixtures + "/kitti/000001.txt");
  const std::vector<KittiLabelRecord> one{records[0]};
  const LabelStats stats = label_stats(one, "Car", preset_car(), MSMConfig{});
  CHECK(stats.mean_w == doctest::Approx(27.11 / 16.0).epsilon(1e-9));
  CHECK(stats.mean_r == doctest::Approx(26.79 / 27.11).epsilon(1e-9));
  CHECK(stats.preset_assignments[1] == 1);
}

TEST_CASE("eval_keypoint_precision: counting and weighting") {
  std::vector<ObjectTarget> targets(1);
  targets[0].class_id = 0;
  targets[0].center3d_proj = {80.0, 80.0};
  targets[0].box_lrtb = {40.0, 40.0, 40.0, 40.0};  // box [40,120]^2 image px
  targets[0].size3d = {1.5, 1.8, 4.0};
  targets[0].depth = 20.0;
  targets[0].focal_length = 700.0;
  const std::vector<std::pair<int, int>> matches{{0, 0}};

  auto rec = [](double x_ft, double y_ft, double w) {
    KeyPointRecord r;
    r.position = {x_ft, y_ft};
    r.attention_weight = w;
    r.head = 0;
    r.query = 0;
    return r;
  };
  // Three inside (feature px in [2.5, 7.5]), one outside.
  std::vector<KeyPointRecord> records{rec(5.0, 5.0, 0.25), rec(3.0, 6.0, 0.25),
                                      rec(6.5, 4.0, 0.25), rec(11.0, 5.0, 0.25)};
  const KeypointPrecision equal = eval_keypoint_precision(records, matches, targets, 16);
  CHECK(equal.position_precision == doctest::Approx(0.75));
  CHECK(equal.weighted_position_precision == doctest::Approx(0.75));

  records[0].attention_weight = 0.4;
  records[1].attention_weight = 0.3;
  records[2].attention_weight = 0.2;
  records[3].attention_weight = 0.1;  // the outside point
  const KeypointPrecision weighted = eval_keypoint_precision(records, matches, targets, 16);
  CHECK(weighted.position_precision == doctest::Approx(0.75));
  CHECK(weighted.weighted_position_precision == doctest::Approx(0.9));

  records[3].position = {5.5, 5.5};
  const KeypointPrecision all_in = eval_keypoint_precision(records, matches, targets, 16);
  CHECK(all_in.position_precision == doctest::Approx(1.0));
  CHECK(all_in.weighted_position_precision == doctest::Approx(1.0));

  const KeypointPrecision none = eval_keypoint_precision(records, {}, targets, 16);
  CHECK(none.empty);
}

TEST_CASE("train_loop: identical config and seed give identical CSV reports") {
  const RunConfig cfg = tiny_config();
  const TrainResult a = train_loop(cfg);
  const TrainResult b = train_loop(cfg);
  CHECK(a.csv == b.csv);
  CHECK(!a.rows.empty());
}

TEST_CASE("train_loop: null objective leaves parameters untouched") {
  RunConfig cfg = tiny_config();
  cfg.weights = LossWeights{0, 0, 0, 0, 0, 0, 0, 0};
  TrainResult result = train_loop(cfg);
  for (const MetricsRow& row : result.rows) CHECK(row.total_loss == 0.0);
  Model reference(cfg.model_config(), preset_car(), derive_seed(cfg.seed, "model", 0));
  std::vector<Parameter*> got = result.model.parameters();
  std::vector<Parameter*> want = reference.parameters();
  REQUIRE(got.size() == want.size());
  for (std::size_t i = 0; i < got.size(); ++i) {
    CHECK(got[i]->tensor.values == want[i]->tensor.values);
  }
}

TEST_CASE("train_loop: loss decreases on a single fixed scene") {
  RunConfig cfg = tiny_config();
  cfg.fixed_scene = true;
  cfg.batch_size = 1;
  cfg.steps = 10;
  cfg.eval_interval = 1;
  cfg.eval_scenes = 0;
  cfg.learning_rate = 0.002;
  cfg.lr_schedule = "constant";
  cfg.momentum = 0.0;
  const TrainResult result = train_loop(cfg);
  REQUIRE(result.rows.size() == 10);
  for (std::size_t i = 1; i < result.rows.size(); ++i) {
    CHECK(result.rows[i].total_loss < result.rows[i - 1].total_loss);
  }
}

TEST_CASE("model state: save/load roundtrip preserves the forward pass") {
  RunConfig cfg = tiny_config();
  Model model(cfg.model_config(), preset_car(), 77);
  const SyntheticScene scene = generate_scene(cfg.scene_params(), preset_car(), 9);
  const Model::ForwardResult before = model.forward(scene.map_v, scene.map_d, nullptr);
  const std::string text = model.save_state_text();

  Model restored(cfg.model_config(), preset_car(), 12345);
  restored.load_state_text(text);
  const Model::ForwardResult after = restored.forward(scene.map_v, scene.map_d, nullptr);
  CHECK(before.features.values == after.features.values);
  CHECK(before.preds.box.values == after.preds.box.values);
  CHECK(before.dist.p.values == after.dist.p.values);
}

TEST_CASE("run config: defaults, json round trip, and validation") {
  const RunConfig defaults = RunConfig::from_json_text("{}");
  CHECK(defaults.category == "Car");
  CHECK(defaults.presets.size() == 6);
  CHECK(defaults.weights.lambda1 == 2.0);
  CHECK(defaults.weights.lambda3 == 10.0);
  CHECK(defaults.weights.lambda_msm == doctest::Approx(0.1));
  CHECK(defaults.msm_w1 == 2.0);
  CHECK(defaults.msm_w2 == 1.0);

  RunConfig cfg = tiny_config();
  cfg.presets = preset_car();
  const RunConfig round = RunConfig::from_json_text(cfg.to_json_text());
  CHECK(round.query_count == cfg.query_count);
  CHECK(round.channels == cfg.channels);
  CHECK(round.learning_rate == cfg.learning_rate);
  CHECK(round.seed == cfg.seed);

  CHECK_THROWS_AS(RunConfig::from_json_text(R"({"channels": 10, "heads": 4})"), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json_text(R"({"presets": [[0.3, 2]]})"), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json_text("not json"), ParseError);
}

TEST_CASE("fusion excursions are counted, not clamped") {
  RunConfig cfg = tiny_config();
  cfg.steps = 3;
  const TrainResult result = train_loop(cfg);
  CHECK(result.fusion_excursion_steps >= 0);
  CHECK(result.fusion_excursion_steps <= cfg.steps);
}

// Command-line harness: gradient verification, synthetic training, key-point
// evaluation, KITTI label statistics, and the lambda ablation sweep.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ssda/config.hpp"
#include "ssda/gradsuite.hpp"
#include "ssda/kitti.hpp"
#include "ssda/model.hpp"
#include "ssda/train.hpp"

namespace {

namespace fs = std::filesystem;

std::string resolve_out_dir(const std::string& flag_value, const ssda::RunConfig* cfg) {
  if (const char* env = std::getenv("SSDA_OUT_DIR"); env && *env) return env;
  if (!flag_value.empty()) return flag_value;
  if (cfg) return cfg->output_dir;
  return "out";
}

void write_file(const fs::path& path, const std::string& content) {
  fs::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << content;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

int cmd_gradcheck(std::uint64_t seed, int seeds_per_case, const std::string& json_out) {
  const std::vector<ssda::GradCheckCase> cases = ssda::run_gradient_suite(seeds_per_case, seed);
  bool all_pass = true;
  for (const ssda::GradCheckCase& c : cases) {
    std::printf("%s %-24s max_rel_err=%.3e (tol %.0e)\n", c.pass ? "PASS" : "FAIL",
                c.name.c_str(), c.max_rel_error, c.tolerance);
    all_pass = all_pass && c.pass;
  }
  if (!json_out.empty()) {
    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    for (const ssda::GradCheckCase& c : cases) {
      j.push_back({{"name", c.name},
                   {"max_rel_error", c.max_rel_error},
                   {"tolerance", c.tolerance},
                   {"pass", c.pass}});
    }
    write_file(json_out, j.dump(2) + "\n");
  }
  std::printf("%s: %zu cases\n", all_pass ? "OK" : "FAILED", cases.size());
  return all_pass ? 0 : 1;
}

nlohmann::ordered_json eval_to_json(const ssda::EvalStats& stats) {
  return {{"matching_accuracy", stats.matching_accuracy},
          {"position_precision", stats.position_precision},
          {"weighted_position_precision", stats.weighted_position_precision},
          {"matched_queries", stats.matched_queries},
          {"empty", stats.empty}};
}

int cmd_train(ssda::RunConfig cfg, const std::string& out_dir) {
  const ssda::TrainResult result = ssda::train_loop(cfg);
  const fs::path dir(out_dir);
  fs::create_directories(dir);
  write_file(dir / "train_report.csv", result.csv);
  write_file(dir / "model.json", result.model.save_state_text());
  nlohmann::ordered_json summary;
  summary["config"] = nlohmann::ordered_json::parse(cfg.to_json_text());
  summary["final"] = eval_to_json(result.final_eval);
  summary["fusion_excursion_steps"] = result.fusion_excursion_steps;
  write_file(dir / "summary.json", summary.dump(2) + "\n");
  std::printf("trained %d steps; matching_accuracy=%s position_precision=%s weighted=%s\n",
              cfg.steps, format_double(result.final_eval.matching_accuracy).c_str(),
              format_double(result.final_eval.position_precision).c_str(),
              format_double(result.final_eval.weighted_position_precision).c_str());
  std::printf("reports written to %s\n", dir.string().c_str());
  return 0;
}

int cmd_eval_keypoints(const std::string& model_path, ssda::RunConfig cfg,
                       const std::string& out_dir) {
  ssda::Model model(cfg.model_config(), cfg.presets, ssda::derive_seed(cfg.seed, "model", 0));
  std::ifstream in(model_path);
  if (!in) throw ssda::ParseError("cannot open model file: " + model_path);
  std::ostringstream ss;
  ss << in.rdbuf();
  model.load_state_text(ss.str());
  const ssda::EvalStats stats = ssda::evaluate_model(model, cfg, cfg.eval_scenes);
  const fs::path dir(out_dir);
  fs::create_directories(dir);
  nlohmann::ordered_json j = eval_to_json(stats);
  j["eval_scenes"] = cfg.eval_scenes;
  write_file(dir / "keypoint_report.json", j.dump(2) + "\n");
  std::printf("matching_accuracy=%s position_precision=%s weighted_position_precision=%s\n",
              format_double(stats.matching_accuracy).c_str(),
              format_double(stats.position_precision).c_str(),
              format_double(stats.weighted_position_precision).c_str());
  return 0;
}

int cmd_label_stats(const std::string& labels_path, const std::string& category, double w1,
                    double w2, const std::string& out_dir) {
  const std::vector<ssda::KittiLabelRecord> records = ssda::parse_kitti_label_path(labels_path);
  ssda::MSMConfig cfg;
  cfg.w1 = w1;
  cfg.w2 = w2;
  const ssda::LabelStats stats =
      ssda::label_stats(records, category, ssda::preset_for_category(category), cfg);
  const std::string json = ssda::label_stats_to_json(stats);
  const fs::path dir(out_dir);
  fs::create_directories(dir);
  write_file(dir / ("label_stats_" + category + ".json"), json);
  std::printf("%s: %d/%d records, w in [1,14] fraction %s, ties %lld\n", category.c_str(),
              stats.category_count, stats.total_records,
              format_double(stats.fraction_w_in_1_14).c_str(), stats.tie_count);
  std::printf("report written to %s\n",
              (dir / ("label_stats_" + category + ".json")).string().c_str());
  return 0;
}

int cmd_ablate_lambda(ssda::RunConfig cfg, const std::vector<double>& lambdas,
                      const std::vector<std::uint64_t>& seeds, const std::string& out_dir) {
  std::ostringstream csv;
  csv << "lambda,mean_matching_accuracy,mean_position_precision,"
         "mean_weighted_position_precision\n";
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (double lambda : lambdas) {
    double acc = 0.0, prec = 0.0, wprec = 0.0;
    nlohmann::ordered_json per_seed = nlohmann::ordered_json::array();
    for (std::uint64_t seed : seeds) {
      ssda::RunConfig run = cfg;
      run.weights.lambda_msm = lambda;
      run.seed = seed;
      const ssda::TrainResult result = ssda::train_loop(run);
      acc += result.final_eval.matching_accuracy;
      prec += result.final_eval.position_precision;
      wprec += result.final_eval.weighted_position_precision;
      per_seed.push_back({{"seed", seed}, {"final", eval_to_json(result.final_eval)}});
      std::printf("lambda=%s seed=%llu accuracy=%s precision=%s\n",
                  format_double(lambda).c_str(), static_cast<unsigned long long>(seed),
                  format_double(result.final_eval.matching_accuracy).c_str(),
                  format_double(result.final_eval.position_precision).c_str());
    }
    const double n = static_cast<double>(seeds.size());
    csv << format_double(lambda) << ',' << format_double(acc / n) << ','
        << format_double(prec / n) << ',' << format_double(wprec / n) << '\n';
    rows.push_back({{"lambda", lambda},
                    {"mean_matching_accuracy", acc / n},
                    {"mean_position_precision", prec / n},
                    {"mean_weighted_position_precision", wprec / n},
                    {"runs", per_seed}});
  }
  const fs::path dir(out_dir);
  fs::create_directories(dir);
  write_file(dir / "ablation_lambda.csv", csv.str());
  write_file(dir / "ablation_lambda.json", rows.dump(2) + "\n");
  std::printf("ablation written to %s\n", dir.string().c_str());
  return 0;
}

std::vector<double> parse_double_list(const std::string& text) {
  std::vector<double> values;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) values.push_back(std::stod(item));
  }
  if (values.empty()) throw ssda::ConfigError("empty value list: '" + text + "'");
  return values;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> values;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) values.push_back(std::stoull(item));
  }
  if (values.empty()) throw ssda::ConfigError("empty seed list: '" + text + "'");
  return values;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Shape&scale-aware deformable attention harness"};
  app.require_subcommand(1);

  auto* grad = app.add_subcommand("gradcheck", "Run the finite-difference gradient suite");
  std::uint64_t grad_seed = 7;
  int grad_seeds_per_case = 10;
  std::string grad_json;
  grad->add_option("--seed", grad_seed, "Root seed");
  grad->add_option("--seeds-per-case", grad_seeds_per_case, "Random seeds per operation");
  grad->add_option("--json", grad_json, "Optional JSON report path");

  auto* train = app.add_subcommand("train-synth", "Train on synthetic scenes");
  std::string train_config;
  std::uint64_t train_seed = 0;
  bool train_seed_set = false;
  std::string train_out;
  train->add_option("--config", train_config, "Run config JSON")->required();
  train->add_option("--seed", train_seed, "Override config seed")
      ->each([&](const std::string&) { train_seed_set = true; });
  train->add_option("--out", train_out, "Output directory (overrides config)");

  auto* evalkp = app.add_subcommand("eval-keypoints", "Evaluate key-point precision");
  std::string eval_model, eval_config, eval_out;
  std::uint64_t eval_seed = 0;
  bool eval_seed_set = false;
  evalkp->add_option("--model", eval_model, "Model state JSON")->required();
  evalkp->add_option("--config", eval_config, "Run config JSON")->required();
  evalkp->add_option("--seed", eval_seed, "Override config seed")
      ->each([&](const std::string&) { eval_seed_set = true; });
  evalkp->add_option("--out", eval_out, "Output directory");

  auto* labels = app.add_subcommand("label-stats", "KITTI label shape&scale statistics");
  std::string labels_path, labels_category = "Car", labels_out;
  double labels_w1 = 2.0, labels_w2 = 1.0;
  labels->add_option("--labels", labels_path, "Label file or directory")->required();
  labels->add_option("--category", labels_category, "Category name");
  labels->add_option("--w1", labels_w1, "Shape distance weight");
  labels->add_option("--w2", labels_w2, "Scale distance weight");
  labels->add_option("--out", labels_out, "Output directory");

  auto* ablate = app.add_subcommand("ablate-lambda", "Sweep the matching-loss weight");
  std::string ablate_config, ablate_values = "0,0.1,0.2,0.3,0.4", ablate_seeds = "1,2,3",
              ablate_out;
  ablate->add_option("--config", ablate_config, "Run config JSON")->required();
  ablate->add_option("--values", ablate_values, "Comma-separated lambda values");
  ablate->add_option("--seeds", ablate_seeds, "Comma-separated seeds");
  ablate->add_option("--out", ablate_out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (grad->parsed()) {
      return cmd_gradcheck(grad_seed, grad_seeds_per_case, grad_json);
    }
    if (train->parsed()) {
      ssda::RunConfig cfg = ssda::RunConfig::load(train_config);
      if (train_seed_set) cfg.seed = train_seed;
      return cmd_train(cfg, resolve_out_dir(train_out, &cfg));
    }
    if (evalkp->parsed()) {
      ssda::RunConfig cfg = ssda::RunConfig::load(eval_config);
      if (eval_seed_set) cfg.seed = eval_seed;
      return cmd_eval_keypoints(eval_model, cfg, resolve_out_dir(eval_out, &cfg));
    }
    if (labels->parsed()) {
      return cmd_label_stats(labels_path, labels_category, labels_w1, labels_w2,
                             resolve_out_dir(labels_out, nullptr));
    }
    if (ablate->parsed()) {
      ssda::RunConfig cfg = ssda::RunConfig::load(ablate_config);
      return cmd_ablate_lambda(cfg, parse_double_list(ablate_values),
                               parse_seed_list(ablate_seeds),
                               resolve_out_dir(ablate_out, &cfg));
    }
  } catch (const ssda::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const ssda::ParseError& e) {
    std::fprintf(stderr, "parse error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}

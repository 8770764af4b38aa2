// omnidet command line: dataset generation, training, evaluation, inference,
// unlabeled-pool screening, budget planning and the label-assignment
// ablation.
//
// Exit codes: 0 success, 2 configuration error, 1 runtime failure.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "omnidet/data.hpp"
#include "omnidet/eval.hpp"
#include "omnidet/image.hpp"
#include "omnidet/kernels.hpp"
#include "omnidet/model.hpp"
#include "omnidet/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace omnidet;

namespace {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path);
  try {
    json j;
    in >> j;
    return j;
  } catch (const json::exception& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
}

data::GenConfig gen_config_from_json(const json& j) {
  data::GenConfig cfg;
  cfg.image_size = j.value("image_size", cfg.image_size);
  cfg.lesion_mean = j.value("lesion_mean", cfg.lesion_mean);
  cfg.axis_min = j.value("axis_min", cfg.axis_min);
  cfg.axis_max = j.value("axis_max", cfg.axis_max);
  cfg.lesion_offset_min = j.value("lesion_offset_min", cfg.lesion_offset_min);
  cfg.lesion_offset_max = j.value("lesion_offset_max", cfg.lesion_offset_max);
  cfg.base_level = j.value("base_level", cfg.base_level);
  cfg.base_jitter = j.value("base_jitter", cfg.base_jitter);
  cfg.field_amplitude = j.value("field_amplitude", cfg.field_amplitude);
  cfg.stripe_amplitude = j.value("stripe_amplitude", cfg.stripe_amplitude);
  cfg.stripe_period_min = j.value("stripe_period_min", cfg.stripe_period_min);
  cfg.stripe_period_max = j.value("stripe_period_max", cfg.stripe_period_max);
  cfg.noise_sigma = j.value("noise_sigma", cfg.noise_sigma);
  cfg.distractor_mean = j.value("distractor_mean", cfg.distractor_mean);
  cfg.distractor_offset_min =
      j.value("distractor_offset_min", cfg.distractor_offset_min);
  cfg.distractor_offset_max =
      j.value("distractor_offset_max", cfg.distractor_offset_max);
  cfg.val_count = j.value("val_count", cfg.val_count);
  cfg.test_count = j.value("test_count", cfg.test_count);
  cfg.seed = j.value("seed", cfg.seed);
  if (j.contains("train_counts")) {
    cfg.train_counts.clear();
    for (const auto& [key, value] : j.at("train_counts").items())
      cfg.train_counts[data::granularity_from_string(key)] = value.get<int>();
  }
  return cfg;
}

json eval_result_to_json(const eval::EvalResult& r) {
  json j;
  j["map"] = r.map;
  j["ap50"] = r.ap50;
  json per = json::array();
  for (std::size_t i = 0; i < r.thresholds.size(); ++i)
    per.push_back(json{{"iou", r.thresholds[i]}, {"ap", r.ap[i]}});
  j["per_threshold"] = per;
  return j;
}

void print_eval_table(const eval::EvalResult& r, const std::string& title) {
  std::printf("%s\n", title.c_str());
  std::printf("  %-6s", "IoU");
  for (double t : r.thresholds) std::printf("  %5.2f", t);
  std::printf("\n  %-6s", "AP");
  for (double ap : r.ap) std::printf("  %5.3f", ap);
  std::printf("\n  mAP %.4f (%.2f)   AP50 %.4f (%.2f)\n", r.map, 100 * r.map,
              r.ap50, 100 * r.ap50);
}

json detections_to_json(const std::vector<geom::Detection>& dets) {
  json arr = json::array();
  for (const auto& d : dets)
    arr.push_back(json{{"box", {d.box.x0, d.box.y0, d.box.x1, d.box.y1}},
                       {"score", d.score}});
  return arr;
}

int run_gen_data(const std::string& config_path, const std::string& out_dir,
                 std::int64_t seed_override) {
  data::GenConfig cfg;
  if (!config_path.empty()) cfg = gen_config_from_json(load_json_file(config_path));
  if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  data::generate_dataset(cfg, out_dir);
  int total = cfg.val_count + cfg.test_count;
  for (const auto& [g, n] : cfg.train_counts) {
    (void)g;
    total += n;
  }
  std::printf("generated %d images under %s (seed %llu)\n", total,
              out_dir.c_str(),
              static_cast<unsigned long long>(cfg.seed));
  return 0;
}

int run_train(const std::string& config_path, std::int64_t seed_override,
              const std::string& out_override, int threads_override) {
  train::TrainConfig cfg;
  try {
    cfg = train::train_config_from_json_file(config_path);
    if (seed_override >= 0) {
      cfg.seed = static_cast<std::uint64_t>(seed_override);
      cfg.model.init_seed = cfg.seed + 7;
    }
    if (!out_override.empty()) cfg.out_dir = out_override;
    if (threads_override > 0) cfg.threads = threads_override;
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  const auto result = train::train(cfg);
  std::printf("training done: best val mAP %.4f at iteration %llu\n",
              result.best_val_map,
              static_cast<unsigned long long>(result.best_iteration));
  std::printf("best checkpoint: %s\n", result.best_checkpoint.c_str());
  return 0;
}

int run_eval(const std::string& ckpt, const std::string& manifest_path,
             bool per_branch, const std::string& compare_ckpt, int bootstrap_n,
             std::int64_t seed, const std::string& json_out,
             const std::string& pr_dump) {
  const nn::Model model = nn::load_checkpoint(ckpt);
  const data::Manifest manifest = data::load_manifest(manifest_path);
  const auto evaluation = train::evaluate_on_manifest(model, manifest, per_branch);
  print_eval_table(evaluation.fused, "fused detection quality");
  json out;
  out["fused"] = eval_result_to_json(evaluation.fused);
  if (per_branch) {
    for (const auto& [g, r] : evaluation.per_branch) {
      print_eval_table(r, std::string("branch ") + data::to_string(g));
      out["per_branch"][data::to_string(g)] = eval_result_to_json(r);
    }
  }
  if (!compare_ckpt.empty()) {
    const nn::Model other = nn::load_checkpoint(compare_ckpt);
    const auto other_eval = train::evaluate_on_manifest(other, manifest, false);
    print_eval_table(other_eval.fused, "comparison checkpoint");
    const auto boot = eval::bootstrap_compare_map(
        evaluation.per_image, other_eval.per_image, bootstrap_n,
        static_cast<std::uint64_t>(seed < 0 ? 1234 : seed));
    std::printf(
        "bootstrap (%d resamples): mean mAP %.4f vs %.4f, t=%.3f, p=%.6g\n",
        bootstrap_n, boot.mean_a, boot.mean_b, boot.t_statistic, boot.p_value);
    out["bootstrap"] = json{{"resamples", bootstrap_n},
                            {"mean_a", boot.mean_a},
                            {"mean_b", boot.mean_b},
                            {"t", boot.t_statistic},
                            {"p", boot.p_value}};
  }
  if (!pr_dump.empty()) {
    json curves = json::array();
    for (double thr : eval::map_thresholds()) {
      const auto c = eval::pr_curve(evaluation.per_image, thr);
      curves.push_back(json{{"iou", thr},
                            {"recall", c.recall},
                            {"precision", c.precision},
                            {"score", c.score}});
    }
    std::ofstream f(pr_dump, std::ios::trunc);
    f << curves.dump(2) << "\n";
  }
  if (!json_out.empty()) {
    std::ofstream f(json_out, std::ios::trunc);
    f << out.dump(2) << "\n";
  }
  return 0;
}

int run_predict(const std::string& ckpt, const std::string& image_path,
                const std::string& branch, const std::string& json_out) {
  const nn::Model model = nn::load_checkpoint(ckpt);
  const img::GrayImage image = img::read_png(image_path);
  const auto preds = model.forward(image);
  std::vector<data::Granularity> subset;
  if (!branch.empty())
    subset.push_back(data::granularity_from_string(branch));
  const auto dets = nn::fuse_and_detect(preds, model.config(), subset);
  const json j = detections_to_json(dets);
  if (!json_out.empty()) {
    std::ofstream f(json_out, std::ios::trunc);
    f << j.dump(2) << "\n";
  } else {
    std::printf("%s\n", j.dump(2).c_str());
  }
  return 0;
}

int run_screen(const std::string& ckpt, const std::string& manifest_path,
               const std::string& out_path, double threshold) {
  const nn::Model model = nn::load_checkpoint(ckpt);
  const data::Manifest manifest = data::load_manifest(manifest_path);
  data::Manifest filtered = train::screen_manifest(model, manifest, threshold);
  const std::size_t dropped = manifest.items.size() - filtered.items.size();
  train::rebase_manifest(filtered, out_path);
  data::save_manifest(filtered, out_path);
  std::printf("screened %zu/%zu unlabeled items out (threshold %.3f) -> %s\n",
              dropped, manifest.items.size(), threshold, out_path.c_str());
  return 0;
}

void print_budget_plan(const train::BudgetPlan& plan) {
  std::printf("%-10s  boxes %4d  masks %4d  dots %4d  used %8.0fs  unused %6.0fs\n",
              plan.policy.c_str(), plan.boxes, plan.masks, plan.dots,
              plan.used_seconds, plan.unused_seconds);
}

int run_budget(const std::string& policy, double budget, double cost_dot,
               double cost_box, double cost_mask, bool all) {
  train::BudgetPolicy p;
  p.budget_seconds = budget;
  p.cost_dot = cost_dot;
  p.cost_box = cost_box;
  p.cost_mask = cost_mask;
  std::printf("budget %.0fs; per-scan costs: dot %.0fs, box %.0fs, mask %.0fs\n",
              budget, cost_dot, cost_box, cost_mask);
  std::vector<std::string> names;
  if (all)
    names = {"STRONG-B", "STRONG-M", "EQUAL", "EQUAL-NUM"};
  else
    names = {policy};
  std::string note;
  for (const auto& name : names) {
    p.name = name;
    train::BudgetPlan plan;
    try {
      plan = train::budget_plan(p);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    print_budget_plan(plan);
    note = plan.note;
  }
  std::printf("note: %s\n", note.c_str());
  return 0;
}

int run_ablate(const std::string& config_path, const std::string& strategies,
               int n_seeds, std::int64_t first_seed, bool include_fixed,
               const std::string& test_manifest, const std::string& out_dir,
               int threads_override) {
  train::TrainConfig base;
  std::vector<std::string> names;
  try {
    base = train::train_config_from_json_file(config_path);
    if (threads_override > 0) base.threads = threads_override;
    std::stringstream ss(strategies);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      if (tok != "HLA" && tok != "SLA" && tok != "DLA" && tok != "FIXED")
        throw ConfigError("unknown strategy in list: " + tok);
      names.push_back(tok);
    }
    if (include_fixed &&
        std::find(names.begin(), names.end(), "FIXED") == names.end())
      names.push_back("FIXED");
    if (names.empty()) throw ConfigError("no strategies given");
    if (n_seeds < 1) throw ConfigError("--seeds must be >= 1");
    if (test_manifest.empty()) throw ConfigError("--test-manifest is required");
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }

  fs::create_directories(out_dir);
  json table = json::array();
  std::printf("%-7s %-6s %-8s %-8s\n", "method", "seed", "mAP", "AP50");
  std::map<std::string, std::vector<double>> maps_by_strategy;
  const data::Manifest test = data::load_manifest(test_manifest);
  for (const auto& name : names) {
    for (int s = 0; s < n_seeds; ++s) {
      train::TrainConfig cfg = base;
      const std::uint64_t seed = static_cast<std::uint64_t>(first_seed) + s;
      cfg.seed = seed;
      cfg.model.init_seed = seed + 7;
      if (name == "FIXED") {
        cfg.fixed_assignment = true;
        cfg.model.enabled_branches = {data::Granularity::box};
        cfg.screen_checkpoint.clear();
      } else {
        cfg.fixed_assignment = false;
        cfg.loss.strategy = losses::strategy_from_string(name);
      }
      cfg.out_dir =
          (fs::path(out_dir) / (name + "_seed" + std::to_string(seed))).string();
      cfg.validate();
      const auto result = train::train(cfg);
      const nn::Model model = nn::load_checkpoint(result.best_checkpoint);
      const auto evaluation = train::evaluate_on_manifest(model, test, false);
      std::printf("%-7s %-6llu %-8.4f %-8.4f\n", name.c_str(),
                  static_cast<unsigned long long>(seed), evaluation.fused.map,
                  evaluation.fused.ap50);
      std::fflush(stdout);
      maps_by_strategy[name].push_back(evaluation.fused.map);
      table.push_back(json{{"strategy", name},
                           {"seed", seed},
                           {"map", evaluation.fused.map},
                           {"ap50", evaluation.fused.ap50},
                           {"best_checkpoint", result.best_checkpoint}});
    }
  }
  std::printf("medians:\n");
  json medians;
  for (auto& [name, maps] : maps_by_strategy) {
    std::vector<double> sorted = maps;
    std::sort(sorted.begin(), sorted.end());
    const double median = sorted[sorted.size() / 2];
    std::printf("  %-7s mAP %.4f\n", name.c_str(), median);
    medians[name] = median;
  }
  json out;
  out["runs"] = table;
  out["median_map"] = medians;
  std::ofstream f((fs::path(out_dir) / "ablation.json").string(),
                  std::ios::trunc);
  f << out.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"omni-supervised lesion detector"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  std::string gen_config, gen_out = "data";
  std::int64_t gen_seed = -1;
  gen->add_option("--config", gen_config, "generator config JSON");
  gen->add_option("--out", gen_out, "output dataset root");
  gen->add_option("--seed", gen_seed, "seed override");

  // train
  auto* tr = app.add_subcommand("train", "train a detector");
  std::string train_config, train_out;
  std::int64_t train_seed = -1;
  int train_threads = 0;
  tr->add_option("--config", train_config, "train config JSON")->required();
  tr->add_option("--seed", train_seed, "seed override");
  tr->add_option("--out", train_out, "output directory override");
  tr->add_option("--threads", train_threads, "worker threads override");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string eval_ckpt, eval_manifest, eval_compare, eval_json, eval_pr;
  bool eval_per_branch = false;
  int eval_bootstrap = 1000;
  std::int64_t eval_seed = 1234;
  ev->add_option("--checkpoint", eval_ckpt)->required();
  ev->add_option("--manifest", eval_manifest)->required();
  ev->add_flag("--per-branch", eval_per_branch, "also evaluate each branch");
  ev->add_option("--compare", eval_compare, "second checkpoint for bootstrap");
  ev->add_option("--bootstrap", eval_bootstrap, "bootstrap resamples");
  ev->add_option("--seed", eval_seed, "bootstrap seed");
  ev->add_option("--json", eval_json, "write results JSON here");
  ev->add_option("--pr-dump", eval_pr, "write PR-curve data JSON here");

  // predict
  auto* pr = app.add_subcommand("predict", "run inference on one image");
  std::string pred_ckpt, pred_image, pred_branch, pred_json;
  pr->add_option("--checkpoint", pred_ckpt)->required();
  pr->add_option("--image", pred_image)->required();
  pr->add_option("--branch", pred_branch,
                 "decode a single branch instead of the fusion");
  pr->add_option("--json", pred_json, "write detections here");

  // screen
  auto* sc = app.add_subcommand("screen", "filter an unlabeled pool");
  std::string screen_ckpt, screen_manifest_path, screen_out;
  double screen_thr = 0.3;
  sc->add_option("--checkpoint", screen_ckpt)->required();
  sc->add_option("--manifest", screen_manifest_path)->required();
  sc->add_option("--out", screen_out)->required();
  sc->add_option("--threshold", screen_thr, "fused score threshold");

  // budget
  auto* bu = app.add_subcommand("budget", "budget-aware labeling plan");
  std::string budget_policy = "STRONG-B";
  double budget_seconds = 66000, cost_dot = 228, cost_box = 305,
         cost_mask = 629;
  bool budget_all = false;
  bu->add_option("--policy", budget_policy,
                 "STRONG-B | STRONG-M | EQUAL | EQUAL-NUM");
  bu->add_flag("--all", budget_all, "print every policy");
  bu->add_option("--budget", budget_seconds, "labeling budget in seconds");
  bu->add_option("--cost-dot", cost_dot);
  bu->add_option("--cost-box", cost_box);
  bu->add_option("--cost-mask", cost_mask);

  // ablate
  auto* ab = app.add_subcommand("ablate",
                                "compare label-assignment strategies");
  std::string ab_config, ab_strategies = "HLA,SLA,DLA", ab_test, ab_out;
  int ab_seeds = 3, ab_threads = 0;
  std::int64_t ab_first_seed = 1;
  bool ab_fixed = false;
  ab->add_option("--config", ab_config, "base train config JSON")->required();
  ab->add_option("--strategies", ab_strategies, "comma list of strategies");
  ab->add_option("--seeds", ab_seeds, "seeds per strategy");
  ab->add_option("--first-seed", ab_first_seed, "first seed value");
  ab->add_flag("--include-fixed", ab_fixed,
               "add the fixed-assignment box-only baseline");
  ab->add_option("--test-manifest", ab_test, "test split manifest")->required();
  ab->add_option("--out", ab_out, "output directory")->required();
  ab->add_option("--threads", ab_threads, "worker threads override");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) return run_gen_data(gen_config, gen_out, gen_seed);
    if (tr->parsed())
      return run_train(train_config, train_seed, train_out, train_threads);
    if (ev->parsed())
      return run_eval(eval_ckpt, eval_manifest, eval_per_branch, eval_compare,
                      eval_bootstrap, eval_seed, eval_json, eval_pr);
    if (pr->parsed())
      return run_predict(pred_ckpt, pred_image, pred_branch, pred_json);
    if (sc->parsed())
      return run_screen(screen_ckpt, screen_manifest_path, screen_out,
                        screen_thr);
    if (bu->parsed())
      return run_budget(budget_policy, budget_seconds, cost_dot, cost_box,
                        cost_mask, budget_all);
    if (ab->parsed())
      return run_ablate(ab_config, ab_strategies, ab_seeds, ab_first_seed,
                        ab_fixed, ab_test, ab_out, ab_threads);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

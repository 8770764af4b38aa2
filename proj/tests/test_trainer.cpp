#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "omnidet/data.hpp"
#include "omnidet/trainer.hpp"

namespace fs = std::filesystem;
using namespace omnidet;
using data::Granularity;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) {
    path = fs::temp_directory_path() / name;
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

void generate_small_dataset(const fs::path& root, std::uint64_t seed) {
  data::GenConfig cfg;
  cfg.train_counts = {{Granularity::box, 6},
                      {Granularity::mask, 6},
                      {Granularity::dot, 6},
                      {Granularity::unlabeled, 6}};
  cfg.val_count = 4;
  cfg.test_count = 4;
  cfg.seed = seed;
  data::generate_dataset(cfg, root.string());
}

train::TrainConfig smoke_config(const fs::path& data_root,
                                const fs::path& out_dir) {
  train::TrainConfig cfg;
  cfg.train_manifest = (data_root / "train" / "manifest.json").string();
  cfg.val_manifest = (data_root / "val" / "manifest.json").string();
  cfg.out_dir = out_dir.string();
  cfg.model.fpn_channels = 8;
  cfg.model.init_seed = 3;
  cfg.total_iterations = 10;
  cfg.val_every = 5;
  cfg.batch_size = 2;
  cfg.lr_decay_every = 6;
  cfg.warmup_iterations = 4;
  cfg.seed = 5;
  return cfg;
}

}  // namespace

TEST_CASE("budget planner reproduces the four policies with floor rounding") {
  train::BudgetPolicy p;
  p.name = "STRONG-B";
  auto plan = train::budget_plan(p);
  CHECK(plan.boxes == 216);
  CHECK(plan.masks == 0);
  CHECK(plan.dots == 0);
  CHECK(plan.used_seconds == doctest::Approx(216 * 305.0));
  CHECK(plan.unused_seconds == doctest::Approx(66000 - 216 * 305.0));
  CHECK(!plan.note.empty());

  p.name = "STRONG-M";
  plan = train::budget_plan(p);
  CHECK(plan.masks == 104);

  p.name = "EQUAL";
  plan = train::budget_plan(p);
  CHECK(plan.dots == 96);   // floor(22000 / 228)
  CHECK(plan.boxes == 72);  // floor(22000 / 305)
  CHECK(plan.masks == 34);  // floor(22000 / 629)

  p.name = "EQUAL-NUM";
  plan = train::budget_plan(p);
  CHECK(plan.dots == 56);  // floor(66000 / 1162)
  CHECK(plan.boxes == 56);
  CHECK(plan.masks == 56);

  p.name = "STRONG-B";
  p.budget_seconds = 0;
  plan = train::budget_plan(p);
  CHECK(plan.boxes == 0);
  CHECK(plan.unused_seconds == 0);

  p.name = "NOPE";
  CHECK_THROWS_AS(train::budget_plan(p), std::invalid_argument);
}

TEST_CASE("learning-rate schedule is the documented step function") {
  train::TrainConfig cfg;
  cfg.base_lr = 1e-3;
  cfg.lr_decay_every = 3000;
  cfg.lr_decay_factor = 0.1;
  cfg.warmup_iterations = 0;
  CHECK(train::lr_at_iteration(cfg, 1) == doctest::Approx(1e-3));
  CHECK(train::lr_at_iteration(cfg, 3000) == doctest::Approx(1e-3));
  CHECK(train::lr_at_iteration(cfg, 3001) == doctest::Approx(1e-4));
  CHECK(train::lr_at_iteration(cfg, 6000) == doctest::Approx(1e-4));
  CHECK(train::lr_at_iteration(cfg, 6001) == doctest::Approx(1e-5));
  CHECK(train::lr_at_iteration(cfg, 7000) == doctest::Approx(1e-5));

  // Linear warmup ramps to base_lr then hands over to the step schedule.
  cfg.warmup_iterations = 100;
  CHECK(train::lr_at_iteration(cfg, 1) == doctest::Approx(1e-5));
  CHECK(train::lr_at_iteration(cfg, 50) == doctest::Approx(5e-4));
  CHECK(train::lr_at_iteration(cfg, 100) == doctest::Approx(1e-3));
  CHECK(train::lr_at_iteration(cfg, 101) == doctest::Approx(1e-3));
}

TEST_CASE("config validation rejects bad setups") {
  train::TrainConfig cfg;
  cfg.train_manifest = "x.json";
  cfg.out_dir = "out";
  cfg.total_iterations = 10;
  cfg.val_every = 3;  // does not divide evenly
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.val_every = 5;
  cfg.fixed_assignment = true;  // needs box-only branches
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.fixed_assignment = false;
  cfg.model.enabled_branches = {Granularity::dot};
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.model.enabled_branches = {Granularity::box};
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("loss routing: gradients stay inside the supervised branch") {
  nn::ModelConfig mc;
  mc.fpn_channels = 8;
  mc.image_size = 64;
  mc.enabled_branches = {Granularity::box, Granularity::mask, Granularity::dot,
                         Granularity::unlabeled};
  mc.init_seed = 9;
  nn::Model model(mc);

  train::TrainConfig cfg;
  cfg.model = mc;
  cfg.train_manifest = "unused";
  cfg.out_dir = "unused";

  img::GrayImage image;
  image.width = 64;
  image.height = 64;
  image.pixels.assign(64 * 64, 30);
  for (int y = 20; y < 30; ++y)
    for (int x = 20; x < 32; ++x) image.set(x, y, 200);

  const auto grad_norms = [&]() {
    std::map<std::string, double> norms;
    model.visit_grads([&](const std::string& name, std::vector<float>& g) {
      double s = 0;
      for (float v : g) s += static_cast<double>(v) * v;
      std::string key = "trunk";
      if (name.rfind("cls.", 0) == 0)
        key = name.substr(0, name.find('.', 4));
      else if (name.rfind("reg.", 0) == 0)
        key = "reg";
      norms[key] += s;
    });
    return norms;
  };

  // Dot item: only the dot tower and the trunk receive gradient.
  {
    data::DatasetItem item;
    item.granularity = Granularity::dot;
    item.dots = {geom::Dot{25, 24}};
    train::train_item_step(model, item, image, cfg, 1.0);
    const auto norms = grad_norms();
    CHECK(norms.at("cls.dot") > 0.0);
    CHECK(norms.at("trunk") > 0.0);
    CHECK(norms.at("cls.box") == 0.0);
    CHECK(norms.at("cls.mask") == 0.0);
    CHECK(norms.at("cls.unlabeled") == 0.0);
    CHECK(norms.at("reg") == 0.0);
    model.zero_grads();
  }

  // Box item: box tower + regression tower + trunk.
  {
    data::DatasetItem item;
    item.granularity = Granularity::box;
    item.boxes = {geom::Box{20, 20, 32, 30}};
    const auto step = train::train_item_step(model, item, image, cfg, 1.0);
    CHECK(step.terms.regression > 0.0);
    const auto norms = grad_norms();
    CHECK(norms.at("cls.box") > 0.0);
    CHECK(norms.at("reg") > 0.0);
    CHECK(norms.at("cls.dot") == 0.0);
    CHECK(norms.at("cls.mask") == 0.0);
    CHECK(norms.at("cls.unlabeled") == 0.0);
    model.zero_grads();
  }

  // Unlabeled item: unlabeled tower + trunk only; delta is max of I_u.
  {
    data::DatasetItem item;
    item.granularity = Granularity::unlabeled;
    const auto step = train::train_item_step(model, item, image, cfg, 1.0);
    CHECK(step.delta >= 0.0);
    CHECK(step.delta <= 1.0);
    const auto norms = grad_norms();
    CHECK(norms.at("cls.unlabeled") > 0.0);
    CHECK(norms.at("cls.box") == 0.0);
    CHECK(norms.at("reg") == 0.0);
    model.zero_grads();
  }
}

TEST_CASE("smoke training run: logs, checkpoints, determinism") {
  TempDir data_dir("omnidet_train_data");
  generate_small_dataset(data_dir.path, 321);

  TempDir out_a("omnidet_train_a");
  auto cfg = smoke_config(data_dir.path, out_a.path / "run");
  const auto result = train::train(cfg);

  // 10 loss lines + 2 validation lines.
  const std::string log = slurp(result.log_path);
  CHECK(std::count(log.begin(), log.end(), '\n') == 12);
  CHECK(log.find("val_map") != std::string::npos);
  CHECK(fs::exists(result.best_checkpoint));
  CHECK(fs::exists(result.last_checkpoint));
  CHECK(fs::exists(out_a.path / "run" / "summary.json"));
  CHECK(result.best_iteration > 0);

  // lr schedule recorded in the log matches the step function, and the best
  // checkpoint is the argmax of the logged validation mAPs (earliest tie).
  {
    std::ifstream in(result.log_path);
    std::string line;
    int iter = 0;
    double best_map = -1;
    std::uint64_t best_iter = 0;
    while (std::getline(in, line)) {
      const auto j = nlohmann::json::parse(line);
      if (j.contains("val_map")) {
        if (j.at("val_map").get<double>() > best_map) {
          best_map = j.at("val_map").get<double>();
          best_iter = j.at("iter").get<std::uint64_t>();
        }
        continue;
      }
      ++iter;
      CHECK(j.at("iter").get<int>() == iter);
      CHECK(j.at("lr").get<double>() ==
            doctest::Approx(train::lr_at_iteration(cfg, iter)));
    }
    CHECK(result.best_iteration == best_iter);
    CHECK(result.best_val_map == doctest::Approx(best_map));
    const auto info = nn::read_checkpoint_info(result.best_checkpoint);
    CHECK(info.iteration == best_iter);
  }

  // Same seed, fresh run: byte-identical logs and checkpoints.
  TempDir out_b("omnidet_train_b");
  auto cfg_b = smoke_config(data_dir.path, out_b.path / "run");
  const auto result_b = train::train(cfg_b);
  CHECK(slurp(result.log_path) == slurp(result_b.log_path));
  CHECK(slurp(result.best_checkpoint) == slurp(result_b.best_checkpoint));

  // Different seed diverges.
  TempDir out_c("omnidet_train_c");
  auto cfg_c = smoke_config(data_dir.path, out_c.path / "run");
  cfg_c.seed = 6;
  const auto result_c = train::train(cfg_c);
  CHECK(slurp(result.log_path) != slurp(result_c.log_path));
}

TEST_CASE("fixed-assignment baseline trains box-only") {
  TempDir data_dir("omnidet_train_fixed_data");
  generate_small_dataset(data_dir.path, 654);
  TempDir out("omnidet_train_fixed");
  auto cfg = smoke_config(data_dir.path, out.path / "run");
  cfg.fixed_assignment = true;
  cfg.model.enabled_branches = {Granularity::box};
  const auto result = train::train(cfg);
  CHECK(fs::exists(result.best_checkpoint));
  const auto info = nn::read_checkpoint_info(result.best_checkpoint);
  CHECK(info.config.enabled_branches.size() == 1);
}

TEST_CASE("screening keeps labeled items and thresholds unlabeled ones") {
  TempDir data_dir("omnidet_screen_data");
  generate_small_dataset(data_dir.path, 987);
  const auto manifest = data::load_manifest(
      (data_dir.path / "train" / "manifest.json").string());

  nn::ModelConfig mc;
  mc.fpn_channels = 8;
  mc.image_size = 128;
  mc.enabled_branches = {Granularity::box};
  mc.init_seed = 1;
  nn::Model model(mc);

  // Threshold 0 keeps everything.
  const auto all = train::screen_manifest(model, manifest, 0.0);
  CHECK(all.items.size() == manifest.items.size());

  // Threshold above 1 drops every unlabeled item, keeps the labeled ones.
  const auto none = train::screen_manifest(model, manifest, 1.01);
  std::size_t unlabeled = 0;
  for (const auto& item : manifest.items)
    unlabeled += item.granularity == Granularity::unlabeled;
  CHECK(none.items.size() == manifest.items.size() - unlabeled);
  for (const auto& item : none.items)
    CHECK(item.granularity != Granularity::unlabeled);
}

TEST_CASE("evaluate_on_manifest produces per-branch results") {
  TempDir data_dir("omnidet_eval_data");
  generate_small_dataset(data_dir.path, 135);
  const auto manifest =
      data::load_manifest((data_dir.path / "test" / "manifest.json").string());

  nn::ModelConfig mc;
  mc.fpn_channels = 8;
  mc.image_size = 128;
  mc.enabled_branches = {Granularity::box, Granularity::dot};
  mc.init_seed = 2;
  nn::Model model(mc);

  const auto ev = train::evaluate_on_manifest(model, manifest, true);
  CHECK(ev.per_image.size() == manifest.items.size());
  CHECK(ev.per_branch.size() == 2);
  CHECK(ev.fused.map >= 0.0);
  CHECK(ev.fused.map <= 1.0);
}

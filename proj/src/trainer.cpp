#include "omnidet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "omnidet/image.hpp"
#include "omnidet/kernels.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace omnidet::train {

void TrainConfig::validate() const {
  model.validate();
  loss.validate();
  if (total_iterations < 1 || val_every < 1)
    throw std::invalid_argument("iteration counts must be positive");
  if (total_iterations % val_every != 0)
    throw std::invalid_argument(
        "val_every must divide total_iterations evenly");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (base_lr <= 0) throw std::invalid_argument("base_lr must be > 0");
  if (momentum < 0 || momentum >= 1)
    throw std::invalid_argument("momentum must be in [0, 1)");
  if (lr_decay_every < 1)
    throw std::invalid_argument("lr_decay_every must be >= 1");
  if (warmup_iterations < 0)
    throw std::invalid_argument("warmup_iterations must be >= 0");
  if (threads < 1) throw std::invalid_argument("threads must be >= 1");
  if (screen_threshold < 0 || screen_threshold > 1 + 1e-9)
    throw std::invalid_argument("screen_threshold must be in [0, 1]");
  if (train_manifest.empty() || out_dir.empty())
    throw std::invalid_argument("train_manifest and out_dir are required");
  if (fixed_assignment) {
    if (model.enabled_branches.size() != 1 ||
        model.enabled_branches[0] != data::Granularity::box)
      throw std::invalid_argument(
          "fixed_assignment requires a box-only branch set");
  }
  if (model.enabled_branches.size() == 1) {
    const data::Granularity g = model.enabled_branches[0];
    if (g == data::Granularity::dot || g == data::Granularity::unlabeled)
      throw std::invalid_argument(
          "single-branch training needs box or mask supervision");
  }
}

TrainConfig train_config_from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::invalid_argument("config parse error: " + std::string(e.what()));
  }

  TrainConfig cfg;
  cfg.train_manifest = j.value("train_manifest", "");
  cfg.val_manifest = j.value("val_manifest", "");
  cfg.out_dir = j.value("out_dir", "");

  if (j.contains("branches")) {
    cfg.model.enabled_branches.clear();
    for (const auto& s : j.at("branches"))
      cfg.model.enabled_branches.push_back(
          data::granularity_from_string(s.get<std::string>()));
  }
  cfg.model.fpn_channels = j.value("fpn_channels", cfg.model.fpn_channels);
  cfg.model.image_size = j.value("image_size", cfg.model.image_size);
  cfg.model.score_threshold =
      j.value("score_threshold", cfg.model.score_threshold);
  cfg.model.nms_iou = j.value("nms_iou", cfg.model.nms_iou);
  cfg.model.max_detections =
      j.value("max_detections", cfg.model.max_detections);
  cfg.model.fuse_include_unlabeled =
      j.value("fuse_include_unlabeled", cfg.model.fuse_include_unlabeled);
  if (j.contains("strides"))
    cfg.model.grid.strides = j.at("strides").get<std::vector<int>>();
  if (j.contains("range_cuts")) {
    cfg.model.grid.range_max = j.at("range_cuts").get<std::vector<double>>();
    cfg.model.grid.range_max.push_back(
        std::numeric_limits<double>::infinity());
  }

  const std::string strategy = j.value("strategy", "DLA");
  if (strategy == "FIXED") {
    cfg.fixed_assignment = true;
  } else {
    cfg.loss.strategy = losses::strategy_from_string(strategy);
  }
  cfg.loss.gamma = j.value("gamma", cfg.loss.gamma);
  cfg.loss.t = j.value("t", cfg.loss.t);
  cfg.loss.eps = j.value("eps", cfg.loss.eps);

  if (j.contains("alpha")) {
    if (j.at("alpha").is_number()) {
      cfg.weighting.alpha_from_max_I = false;
      cfg.weighting.alpha_fixed = j.at("alpha").get<double>();
    } else if (j.at("alpha").get<std::string>() != "max_I") {
      throw std::invalid_argument("alpha must be a number or \"max_I\"");
    }
  }
  cfg.weighting.beta = j.value("beta", cfg.weighting.beta);

  if (j.contains("delta")) {
    if (j.at("delta").is_number()) {
      cfg.delta_from_max_I = false;
      cfg.delta_fixed = j.at("delta").get<double>();
    } else if (j.at("delta").get<std::string>() != "max_I_u") {
      throw std::invalid_argument("delta must be a number or \"max_I_u\"");
    }
  }

  cfg.base_lr = j.value("base_lr", cfg.base_lr);
  cfg.momentum = j.value("momentum", cfg.momentum);
  cfg.lr_decay_every = j.value("lr_decay_every", cfg.lr_decay_every);
  cfg.lr_decay_factor = j.value("lr_decay_factor", cfg.lr_decay_factor);
  cfg.warmup_iterations = j.value("warmup_iterations", cfg.warmup_iterations);
  cfg.total_iterations = j.value("total_iterations", cfg.total_iterations);
  cfg.val_every = j.value("val_every", cfg.val_every);
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.hflip = j.value("hflip", cfg.hflip);
  cfg.threads = j.value("threads", cfg.threads);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.model.init_seed = j.value("init_seed", cfg.seed + 7);
  cfg.screen_checkpoint = j.value("screen_checkpoint", "");
  cfg.screen_threshold = j.value("screen_threshold", cfg.screen_threshold);
  cfg.dump_maps_every = j.value("dump_maps_every", 0);
  return cfg;
}

std::string train_config_to_json(const TrainConfig& cfg) {
  json j;
  j["train_manifest"] = cfg.train_manifest;
  j["val_manifest"] = cfg.val_manifest;
  j["out_dir"] = cfg.out_dir;
  json branches = json::array();
  for (auto g : cfg.model.enabled_branches) branches.push_back(data::to_string(g));
  j["branches"] = branches;
  j["fpn_channels"] = cfg.model.fpn_channels;
  j["image_size"] = cfg.model.image_size;
  j["score_threshold"] = cfg.model.score_threshold;
  j["nms_iou"] = cfg.model.nms_iou;
  j["max_detections"] = cfg.model.max_detections;
  j["fuse_include_unlabeled"] = cfg.model.fuse_include_unlabeled;
  j["strategy"] =
      cfg.fixed_assignment ? "FIXED" : losses::to_string(cfg.loss.strategy);
  j["gamma"] = cfg.loss.gamma;
  j["t"] = cfg.loss.t;
  j["eps"] = cfg.loss.eps;
  if (cfg.weighting.alpha_from_max_I)
    j["alpha"] = "max_I";
  else
    j["alpha"] = cfg.weighting.alpha_fixed;
  j["beta"] = cfg.weighting.beta;
  if (cfg.delta_from_max_I)
    j["delta"] = "max_I_u";
  else
    j["delta"] = cfg.delta_fixed;
  j["base_lr"] = cfg.base_lr;
  j["momentum"] = cfg.momentum;
  j["lr_decay_every"] = cfg.lr_decay_every;
  j["lr_decay_factor"] = cfg.lr_decay_factor;
  j["warmup_iterations"] = cfg.warmup_iterations;
  j["total_iterations"] = cfg.total_iterations;
  j["val_every"] = cfg.val_every;
  j["batch_size"] = cfg.batch_size;
  j["hflip"] = cfg.hflip;
  j["threads"] = cfg.threads;
  j["seed"] = cfg.seed;
  j["init_seed"] = cfg.model.init_seed;
  j["screen_checkpoint"] = cfg.screen_checkpoint;
  j["screen_threshold"] = cfg.screen_threshold;
  j["dump_maps_every"] = cfg.dump_maps_every;
  return j.dump(2);
}

double lr_at_iteration(const TrainConfig& cfg, int iteration) {
  const int drops = (iteration - 1) / cfg.lr_decay_every;
  double lr = cfg.base_lr * std::pow(cfg.lr_decay_factor, drops);
  if (cfg.warmup_iterations > 0 && iteration <= cfg.warmup_iterations)
    lr *= static_cast<double>(iteration) / cfg.warmup_iterations;
  return lr;
}

// ---------------------------------------------------------------------------
// Screening
// ---------------------------------------------------------------------------

namespace {

double max_fused_score(const cotrain::BranchPredictions& preds) {
  double best = 0;
  for (std::size_t l = 0; l < preds.shapes.size(); ++l) {
    const int n = preds.shapes[l].points();
    for (int i = 0; i < n; ++i) {
      double s = 0;
      for (const auto& [g, maps] : preds.prob) {
        (void)g;
        s += maps[l][i];
      }
      s /= static_cast<double>(preds.prob.size());
      best = std::max(best, s);
    }
  }
  return best;
}

}  // namespace

data::Manifest screen_manifest(const nn::Model& baseline,
                               const data::Manifest& manifest,
                               double threshold) {
  data::Manifest out = manifest;
  out.items.clear();
  for (const auto& item : manifest.items) {
    if (item.granularity != data::Granularity::unlabeled) {
      out.items.push_back(item);
      continue;
    }
    const img::GrayImage image = img::read_png(item.image_path);
    const auto preds = baseline.forward(image);
    if (max_fused_score(preds) >= threshold) out.items.push_back(item);
  }
  return out;
}

void rebase_manifest(data::Manifest& manifest,
                     const std::string& manifest_path) {
  const fs::path dir = fs::absolute(manifest_path).parent_path();
  for (auto& item : manifest.items)
    item.image_rel =
        fs::relative(fs::absolute(item.image_path), dir).generic_string();
}

// ---------------------------------------------------------------------------
// Budget planner
// ---------------------------------------------------------------------------

BudgetPlan budget_plan(const BudgetPolicy& policy) {
  if (policy.budget_seconds < 0)
    throw std::invalid_argument("budget must be >= 0");
  if (policy.cost_dot <= 0 || policy.cost_box <= 0 || policy.cost_mask <= 0)
    throw std::invalid_argument("annotation costs must be > 0");

  BudgetPlan plan;
  plan.policy = policy.name;
  const double budget = policy.budget_seconds;
  if (policy.name == "STRONG-B") {
    plan.boxes = static_cast<int>(budget / policy.cost_box);
  } else if (policy.name == "STRONG-M") {
    plan.masks = static_cast<int>(budget / policy.cost_mask);
  } else if (policy.name == "EQUAL") {
    const double third = budget / 3.0;
    plan.dots = static_cast<int>(third / policy.cost_dot);
    plan.boxes = static_cast<int>(third / policy.cost_box);
    plan.masks = static_cast<int>(third / policy.cost_mask);
  } else if (policy.name == "EQUAL-NUM") {
    const double per_scan =
        policy.cost_dot + policy.cost_box + policy.cost_mask;
    const int n = static_cast<int>(budget / per_scan);
    plan.dots = plan.boxes = plan.masks = n;
  } else {
    throw std::invalid_argument("unknown budget policy: " + policy.name);
  }
  plan.used_seconds = plan.dots * policy.cost_dot +
                      plan.boxes * policy.cost_box +
                      plan.masks * policy.cost_mask;
  plan.unused_seconds = budget - plan.used_seconds;
  plan.note =
      "counts are floor(budget/cost) so the plan never exceeds the budget; "
      "tallies that round up instead (e.g. 217 boxes or 105 masks at the "
      "default costs) overshoot it by one scan.";
  return plan;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

namespace {

std::vector<eval::ImageEval> collect_image_evals(
    const nn::Model& model, const data::Manifest& manifest,
    const std::vector<img::GrayImage>* preloaded,
    const std::vector<data::Granularity>& subset) {
  std::vector<eval::ImageEval> evals;
  evals.reserve(manifest.items.size());
  for (std::size_t i = 0; i < manifest.items.size(); ++i) {
    const auto& item = manifest.items[i];
    const img::GrayImage image =
        preloaded ? (*preloaded)[i] : img::read_png(item.image_path);
    const auto preds = model.forward(image);
    eval::ImageEval ev;
    ev.dets = nn::fuse_and_detect(preds, model.config(), subset);
    ev.gts = item.boxes;
    evals.push_back(std::move(ev));
  }
  return evals;
}

}  // namespace

CheckpointEvaluation evaluate_on_manifest(const nn::Model& model,
                                          const data::Manifest& manifest,
                                          bool per_branch) {
  CheckpointEvaluation out;
  std::map<data::Granularity, std::vector<eval::ImageEval>> branch_evals;
  // One forward per image; fused and per-branch detections decode from the
  // same prediction maps.
  for (const auto& item : manifest.items) {
    const img::GrayImage image = img::read_png(item.image_path);
    const auto preds = model.forward(image);
    eval::ImageEval ev;
    ev.dets = nn::fuse_and_detect(preds, model.config(), {});
    ev.gts = item.boxes;
    out.per_image.push_back(std::move(ev));
    if (per_branch) {
      for (data::Granularity g : model.config().enabled_branches) {
        eval::ImageEval bev;
        bev.dets = nn::fuse_and_detect(preds, model.config(), {g});
        bev.gts = item.boxes;
        branch_evals[g].push_back(std::move(bev));
      }
    }
  }
  out.fused = eval::map_metric(out.per_image);
  for (const auto& [g, evals] : branch_evals)
    out.per_branch[g] = eval::map_metric(evals);
  return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

struct FlippedItem {
  data::DatasetItem item;
  img::GrayImage image;
};

FlippedItem hflip_item(const data::DatasetItem& item,
                       const img::GrayImage& image) {
  FlippedItem out;
  out.image.width = image.width;
  out.image.height = image.height;
  out.image.pixels.resize(image.pixels.size());
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      out.image.set(x, y, image.at(image.width - 1 - x, y));

  out.item.granularity = item.granularity;
  const double w = image.width;
  for (const auto& b : item.boxes)
    out.item.boxes.push_back(geom::Box{w - b.x1, b.y0, w - b.x0, b.y1});
  for (const auto& d : item.dots)
    out.item.dots.push_back(geom::Dot{w - d.x, d.y});
  for (const auto& m : item.masks) {
    geom::InstanceMask fm;
    fm.width = m.width;
    fm.height = m.height;
    fm.bits.resize(m.bits.size());
    for (int y = 0; y < m.height; ++y)
      for (int x = 0; x < m.width; ++x)
        fm.set(x, y, m.at(m.width - 1 - x, y));
    out.item.masks.push_back(std::move(fm));
  }
  return out;
}

// Per-item loss state: values, probability gradients, regression gradients.
struct ItemLoss {
  losses::BranchTerms terms;
  double delta = 1.0;
  double norm = 1.0;
  bool finite = true;
};

void dump_map_png(const std::string& path, const std::vector<float>& map,
                  int h, int w) {
  img::GrayImage image;
  image.width = w;
  image.height = h;
  image.pixels.resize(map.size());
  for (std::size_t i = 0; i < map.size(); ++i)
    image.pixels[i] = static_cast<std::uint8_t>(
        std::clamp(map[i], 0.0f, 1.0f) * 255.0f + 0.5f);
  img::write_png(path, image);
}

void dump_maps(const std::string& dir, const std::string& tag,
               const std::vector<assign::LevelShape>& shapes,
               const LevelMaps& maps) {
  fs::create_directories(dir);
  for (std::size_t l = 0; l < maps.size(); ++l) {
    char name[128];
    std::snprintf(name, sizeof(name), "%s_l%zu.png", tag.c_str(), l);
    dump_map_png((fs::path(dir) / name).string(), maps[l], shapes[l].h,
                 shapes[l].w);
  }
}

json loss_report_to_json(const losses::LossReport& r) {
  const auto terms = [](const losses::BranchTerms& t) {
    return json{{"certain", t.certain},
                {"uncertain", t.uncertain},
                {"regression", t.regression}};
  };
  json j;
  if (r.box.present) j["box"] = terms(r.box);
  if (r.mask.present) j["mask"] = terms(r.mask);
  if (r.dot.present) j["dot"] = terms(r.dot);
  if (r.unlabeled.present) {
    j["unlabeled"] = terms(r.unlabeled);
    j["delta"] = r.delta;
  }
  j["total"] = r.total;
  return j;
}

}  // namespace

ItemStep train_item_step(nn::Model& model, const data::DatasetItem& item,
                         const img::GrayImage& image, const TrainConfig& cfg,
                         double batch_inv) {
  const auto& shapes = model.level_shapes();
  const data::Granularity g = item.granularity;
  const int n_branches =
      static_cast<int>(cfg.model.enabled_branches.size());

  nn::ForwardCache cache;
  const auto preds = model.forward(nn::image_to_tensor(image), &cache);
  const auto tm = assign::build_targets(item, cfg.model.image_size,
                                        cfg.model.image_size, cfg.model.grid);

  // Fixed-assignment baseline: promote every region pixel to a certain
  // positive and drop the uncertain set.
  assign::TargetMaps fixed_tm;
  const assign::TargetMaps* targets = &tm;
  if (cfg.fixed_assignment) {
    fixed_tm = tm;
    for (const auto& region : fixed_tm.regions)
      for (std::size_t l = 0; l < region.pixels.size(); ++l)
        for (int idx : region.pixels[l]) fixed_tm.certain_pos[l][idx] = 1;
    targets = &fixed_tm;
  }

  // Per-term normalizers. A single 1/|certain_pos| divisor leaves the
  // uncertain sums two orders of magnitude above everything else on dot and
  // unlabeled items (their uncertain set is the whole grid), which diverges
  // under SGD; each term is scaled by its own pixel population instead. The
  // certain term keeps the positives-count anchor whenever positives exist.
  const std::size_t n_pos = targets->count_pos();
  const std::size_t n_neg = targets->count_neg();
  std::size_t n_uncertain = 0, n_reg = 0;
  for (const auto& region : targets->regions) n_uncertain += region.size();
  for (std::size_t l = 0; l < targets->reg_valid.size(); ++l)
    for (std::uint8_t v : targets->reg_valid[l]) n_reg += v;
  const double norm_certain =
      static_cast<double>(std::max<std::size_t>(1, n_pos > 0 ? n_pos : n_neg));
  const double norm_uncertain =
      static_cast<double>(std::max<std::size_t>(1, n_uncertain));
  const double norm_reg = static_cast<double>(std::max<std::size_t>(1, n_reg));

  // Inter-guided map for this branch (detached by construction: weights are
  // plain values, never part of the gradient path).
  std::optional<LevelMaps> inter;
  if (n_branches >= 2) inter = cotrain::inter_guided_map(preds, g);

  ItemStep step;
  if (g == data::Granularity::unlabeled)
    step.delta = cfg.delta_from_max_I
                     ? cotrain::max_over_region(*inter, targets->regions.front())
                     : cfg.delta_fixed;

  step.weights = make_level_maps(shapes);
  bool any_uncertain = false;
  if (!cfg.fixed_assignment) {
    for (const auto& region : targets->regions) {
      if (region.size() == 0) continue;
      any_uncertain = true;
      cotrain::SampleWeightMap wm;
      if (g == data::Granularity::box || g == data::Granularity::mask) {
        const LevelMaps iou = cotrain::iou_map(preds.reg, shapes, region);
        wm = cotrain::weights_strong(inter ? &*inter : nullptr, iou,
                                     cfg.weighting, region);
      } else {
        wm = cotrain::weights_weak(*inter, region);
      }
      for (std::size_t l = 0; l < step.weights.size(); ++l)
        for (int idx : region.pixels[l])
          step.weights[l][idx] = wm.w[l][idx];
    }
  }

  nn::BranchGrads grads;
  LevelMaps& d_logit = grads.d_logit[g];
  d_logit = make_level_maps(shapes);

  step.terms.present = true;
  step.terms.certain =
      losses::focal_certain(preds.prob.at(g), *targets, cfg.loss, &d_logit,
                            batch_inv / norm_certain) /
      norm_certain;
  if (any_uncertain) {
    const double grad_scale =
        (g == data::Granularity::unlabeled ? step.delta : 1.0) * batch_inv /
        norm_uncertain;
    step.terms.uncertain =
        losses::uncertain_loss(preds.prob.at(g), step.weights, *targets,
                               cfg.loss, &d_logit, grad_scale) /
        norm_uncertain;
  }
  if (g == data::Granularity::box || g == data::Granularity::mask) {
    grads.d_reg.clear();
    for (const auto& sh : shapes)
      grads.d_reg.emplace_back(static_cast<std::size_t>(sh.points()) * 4,
                               0.0f);
    step.terms.regression = losses::giou_loss(preds.reg, *targets,
                                              &grads.d_reg, batch_inv / norm_reg) /
                            norm_reg;
  }

  // Non-finite loss: dump the probability and weight maps for diagnosis.
  losses::BranchTerms single[4];
  single[static_cast<int>(g)] = step.terms;
  const losses::LossReport item_report =
      losses::total_loss(single[0], single[1], single[2], single[3], step.delta);
  if (!std::isfinite(item_report.total)) {
    const std::string diag_dir =
        (fs::path(cfg.out_dir) / "diagnostic").string();
    for (const auto& [bg, maps] : preds.prob)
      dump_maps(diag_dir, std::string("P_") + data::to_string(bg), shapes,
                maps);
    dump_maps(diag_dir, "W", shapes, step.weights);
    throw std::runtime_error("non-finite loss; P and W maps dumped to " +
                             diag_dir);
  }

  model.backward(cache, grads);
  step.inter_guided = std::move(inter);
  return step;
}

TrainResult train(const TrainConfig& cfg) {
  cfg.validate();
  kern::set_num_threads(cfg.threads);

  data::Manifest manifest = data::load_manifest(cfg.train_manifest);
  if (manifest.image_width != cfg.model.image_size ||
      manifest.image_height != cfg.model.image_size)
    throw std::runtime_error("train: manifest image size differs from model");

  TrainResult result;

  // Optional screening of the unlabeled pool before any sampling.
  if (!cfg.screen_checkpoint.empty() &&
      cfg.model.has_branch(data::Granularity::unlabeled)) {
    const nn::Model baseline = nn::load_checkpoint(cfg.screen_checkpoint);
    const std::size_t before = manifest.items.size();
    manifest = screen_manifest(baseline, manifest, cfg.screen_threshold);
    result.screened_out = static_cast<int>(before - manifest.items.size());
  }

  std::optional<data::Manifest> val_manifest;
  std::vector<img::GrayImage> val_images;
  if (!cfg.val_manifest.empty()) {
    val_manifest = data::load_manifest(cfg.val_manifest);
    for (const auto& item : val_manifest->items)
      val_images.push_back(img::read_png(item.image_path));
  }

  std::vector<img::GrayImage> images;
  images.reserve(manifest.items.size());
  for (const auto& item : manifest.items)
    images.push_back(img::read_png(item.image_path));

  nn::Model model(cfg.model);
  const auto& shapes = model.level_shapes();
  data::RoundSampler sampler(manifest, cfg.model.enabled_branches,
                             cfg.batch_size, rng::derive_seed(cfg.seed, 1));
  rng::Engine aug_eng(rng::derive_seed(cfg.seed, 2));

  fs::create_directories(cfg.out_dir);
  const std::string log_path = (fs::path(cfg.out_dir) / "train_log.jsonl").string();
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) throw std::runtime_error("cannot write log: " + log_path);
  {
    std::ofstream cfg_out((fs::path(cfg.out_dir) / "config.json").string(),
                          std::ios::trunc);
    cfg_out << train_config_to_json(cfg) << "\n";
  }

  const std::string best_path = (fs::path(cfg.out_dir) / "best.ckpt").string();
  const std::string last_path = (fs::path(cfg.out_dir) / "last.ckpt").string();
  double best_map = -1.0;
  std::uint64_t best_iter = 0;

  for (int iter = 1; iter <= cfg.total_iterations; ++iter) {
    const double lr = lr_at_iteration(cfg, iter);
    const auto round = sampler.next_round();

    losses::BranchTerms batch_terms[4];  // indexed by Granularity
    double delta_sum = 0;
    int delta_count = 0;

    for (data::Granularity g : cfg.model.enabled_branches) {
      const auto& batch = round.at(g);
      losses::BranchTerms& acc = batch_terms[static_cast<int>(g)];
      acc.present = true;

      const double inv_b = 1.0 / static_cast<double>(batch.size());
      for (std::size_t bi = 0; bi < batch.size(); ++bi) {
        const std::size_t item_idx = batch[bi];
        const data::DatasetItem* item = &manifest.items[item_idx];
        const img::GrayImage* image = &images[item_idx];
        FlippedItem flipped;
        if (cfg.hflip && rng::uniform(aug_eng) < 0.5) {
          flipped = hflip_item(*item, *image);
          item = &flipped.item;
          image = &flipped.image;
        }

        ItemStep step;
        try {
          step = train_item_step(model, *item, *image, cfg, inv_b);
        } catch (const std::runtime_error& e) {
          throw std::runtime_error(std::string(e.what()) + " (iteration " +
                                   std::to_string(iter) + ")");
        }

        if (g == data::Granularity::unlabeled) {
          delta_sum += step.delta;
          ++delta_count;
        }
        // Batch means; the unlabeled uncertain term carries its per-item
        // delta so the logged total matches the optimized objective.
        acc.certain += step.terms.certain * inv_b;
        acc.uncertain += (g == data::Granularity::unlabeled
                              ? step.delta * step.terms.uncertain
                              : step.terms.uncertain) *
                         inv_b;
        acc.regression += step.terms.regression * inv_b;

        if (cfg.dump_maps_every > 0 && iter % cfg.dump_maps_every == 0 &&
            bi == 0 && step.inter_guided) {
          const std::string map_dir =
              (fs::path(cfg.out_dir) / "maps" / ("iter_" + std::to_string(iter)))
                  .string();
          dump_maps(map_dir, std::string("I_") + data::to_string(g), shapes,
                    *step.inter_guided);
          dump_maps(map_dir, std::string("W_") + data::to_string(g), shapes,
                    step.weights);
        }
      }
    }

    model.sgd_step(static_cast<float>(lr), static_cast<float>(cfg.momentum));

    // The unlabeled term is already delta-weighted per item above.
    losses::LossReport report = losses::total_loss(
        batch_terms[0], batch_terms[1], batch_terms[2], batch_terms[3], 1.0);
    report.delta = delta_count ? delta_sum / delta_count : 0.0;
    json line = loss_report_to_json(report);
    line["iter"] = iter;
    line["lr"] = lr;
    log << line.dump() << "\n";

    if (val_manifest && iter % cfg.val_every == 0) {
      auto evals = collect_image_evals(model, *val_manifest, &val_images, {});
      const auto metric = eval::map_metric(evals);
      json vline;
      vline["iter"] = iter;
      vline["val_map"] = metric.map;
      vline["val_ap50"] = metric.ap50;
      log << vline.dump() << "\n";
      log.flush();
      model.save_checkpoint(last_path, static_cast<std::uint64_t>(iter),
                            metric.map);
      if (metric.map > best_map) {  // ties keep the earliest
        best_map = metric.map;
        best_iter = static_cast<std::uint64_t>(iter);
        model.save_checkpoint(best_path, best_iter, best_map);
      }
    }
  }

  if (!val_manifest) {
    // No validation split: the final state doubles as the best checkpoint.
    model.save_checkpoint(last_path, cfg.total_iterations, 0.0);
    model.save_checkpoint(best_path, cfg.total_iterations, 0.0);
    best_iter = cfg.total_iterations;
    best_map = 0.0;
  }

  result.best_checkpoint = best_path;
  result.last_checkpoint = last_path;
  result.log_path = log_path;
  result.best_val_map = best_map;
  result.best_iteration = best_iter;

  json summary;
  summary["best_iteration"] = best_iter;
  summary["best_val_map"] = best_map;
  summary["best_checkpoint"] = best_path;
  summary["last_checkpoint"] = last_path;
  summary["screened_out"] = result.screened_out;
  summary["iterations"] = cfg.total_iterations;
  std::ofstream sum_out((fs::path(cfg.out_dir) / "summary.json").string(),
                        std::ios::trunc);
  sum_out << summary.dump(2) << "\n";
  return result;
}

}  // namespace omnidet::train

#pragma once

// Training loop (equal-type sampling, branch-routed losses, SGD with a step
// schedule, periodic validation with best-checkpoint retention), unlabeled
// pool screening, the budget planner, and checkpoint evaluation.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "omnidet/cotraining.hpp"
#include "omnidet/data.hpp"
#include "omnidet/eval.hpp"
#include "omnidet/losses.hpp"
#include "omnidet/model.hpp"

namespace omnidet::train {

struct TrainConfig {
  std::string train_manifest;
  std::string val_manifest;
  std::string out_dir;

  nn::ModelConfig model;
  losses::LossConfig loss;
  cotrain::WeightingConfig weighting;
  // Weight on the unlabeled uncertain term: per-item max of I_u by default,
  // or a fixed value.
  bool delta_from_max_I = true;
  double delta_fixed = 1.0;
  // Strict fixed-assignment baseline: every in-box pixel is a positive,
  // no uncertain set. Requires a box-only branch set.
  bool fixed_assignment = false;

  double base_lr = 1e-3;
  double momentum = 0.9;
  int lr_decay_every = 3000;
  double lr_decay_factor = 0.1;
  // Linear ramp from ~0 to base_lr over the first iterations; 0 disables.
  // The co-training weights are noise until the branches see enough certain
  // samples, so the first updates must stay small.
  int warmup_iterations = 500;
  int total_iterations = 7000;
  int val_every = 250;
  int batch_size = 4;  // per granularity
  bool hflip = true;
  int threads = 1;
  std::uint64_t seed = 1;

  std::string screen_checkpoint;  // optional: filter unlabeled pool first
  double screen_threshold = 0.3;
  int dump_maps_every = 0;  // heat-map PNGs of I and W; 0 disables

  void validate() const;
};

TrainConfig train_config_from_json_file(const std::string& path);
std::string train_config_to_json(const TrainConfig& cfg);

double lr_at_iteration(const TrainConfig& cfg, int iteration);  // 1-based

struct TrainResult {
  std::string best_checkpoint;
  std::string last_checkpoint;
  std::string log_path;
  double best_val_map = 0;
  std::uint64_t best_iteration = 0;
  int screened_out = 0;
};

TrainResult train(const TrainConfig& cfg);

// One item's forward/loss/backward pass; gradients accumulate into the
// model scaled by batch_inv (1/batch size). Exposed for the routing and
// stop-gradient tests.
struct ItemStep {
  losses::BranchTerms terms;  // already normalized by max(1, |certain_pos|)
  double delta = 1.0;         // max of I_u (unlabeled items only)
  LevelMaps weights;          // sample weights over uncertain pixels
  std::optional<LevelMaps> inter_guided;  // absent on single-branch models
};

ItemStep train_item_step(nn::Model& model, const data::DatasetItem& item,
                         const img::GrayImage& image, const TrainConfig& cfg,
                         double batch_inv);

// Max fused classification score per item; keeps items clearing the
// threshold. Labeled items are always kept.
data::Manifest screen_manifest(const nn::Model& baseline,
                               const data::Manifest& manifest,
                               double threshold);

// Rewrites image paths relative to where the manifest will be saved.
void rebase_manifest(data::Manifest& manifest,
                     const std::string& manifest_path);

// --- budget planning ---------------------------------------------------------

struct BudgetPolicy {
  std::string name;  // STRONG-B | STRONG-M | EQUAL | EQUAL-NUM
  double budget_seconds = 66000;
  double cost_dot = 228, cost_box = 305, cost_mask = 629;
};

struct BudgetPlan {
  std::string policy;
  int boxes = 0, masks = 0, dots = 0;
  double used_seconds = 0, unused_seconds = 0;
  std::string note;
};

BudgetPlan budget_plan(const BudgetPolicy& policy);

// --- evaluation ---------------------------------------------------------------

struct CheckpointEvaluation {
  eval::EvalResult fused;
  std::vector<eval::ImageEval> per_image;  // fused detections vs gt boxes
  std::map<data::Granularity, eval::EvalResult> per_branch;
};

CheckpointEvaluation evaluate_on_manifest(const nn::Model& model,
                                          const data::Manifest& manifest,
                                          bool per_branch);

}  // namespace omnidet::train

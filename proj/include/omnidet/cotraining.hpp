#pragma once

// Inter-guided maps and co-training sample weights. Everything here is
// computed from prediction snapshots and is gradient-free by construction:
// weights act as assignment signals, never as training targets.

#include <map>
#include <optional>
#include <vector>

#include "omnidet/assignment.hpp"
#include "omnidet/data.hpp"
#include "omnidet/maps.hpp"

namespace omnidet::cotrain {

// Forward outputs for one image: a probability map per enabled branch per
// level, plus a shared 4-channel regression map (decoded distances, pixels).
struct BranchPredictions {
  std::vector<assign::LevelShape> shapes;
  std::map<data::Granularity, LevelMaps> prob;
  // Per level: 4 planes (l, t, r, b), each shapes[l].points() long.
  std::vector<std::vector<float>> reg;
};

struct WeightingConfig {
  bool alpha_from_max_I = true;  // alpha = max of I over the region
  double alpha_fixed = 1.0;      // used when alpha_from_max_I is false
  double beta = 1.0;
};

enum class WeightSource { weak, strong, iou_only };

struct SampleWeightMap {
  LevelMaps w;  // defined on uncertain pixels, 0 elsewhere
  WeightSource source = WeightSource::weak;
};

// Elementwise geometric mean of the other enabled branches' probabilities:
// (prod_{k != target} P_k)^(1/(K-1)). Throws if fewer than two branches.
LevelMaps inter_guided_map(const BranchPredictions& preds,
                           data::Granularity target);

// (x - min) / (max - min) over the support pixels; a flat map (max == min)
// normalizes to all zeros. Throws on empty support.
LevelMaps normalize_map(const LevelMaps& values,
                        const assign::UncertainRegion& support);

// Weights for dot/unlabeled items: plain normalization of I over the item's
// single uncertain region (all levels jointly).
SampleWeightMap weights_weak(const LevelMaps& inter_guided,
                             const assign::UncertainRegion& region);

// IoU between boxes decoded from the regression map and the governing box,
// evaluated on the region's pixels. Throws if the region has no box.
LevelMaps iou_map(const std::vector<std::vector<float>>& reg,
                  const std::vector<assign::LevelShape>& shapes,
                  const assign::UncertainRegion& region);

// Weights for box/mask regions: normalize(I^alpha * IoU^beta) within the
// region. Passing no inter-guided map (single-branch baseline) drops the
// I^alpha factor.
SampleWeightMap weights_strong(const LevelMaps* inter_guided,
                               const LevelMaps& iou,
                               const WeightingConfig& cfg,
                               const assign::UncertainRegion& region);

// Max of a map over a region (used for alpha and for the unlabeled-loss
// weight delta).
double max_over_region(const LevelMaps& m, const assign::UncertainRegion& r);

}  // namespace omnidet::cotrain

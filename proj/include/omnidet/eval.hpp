#pragma once

// Detection metrics: greedy per-image matching, 101-point interpolated AP,
// mAP over IoU thresholds 0.40..0.75 (step 0.05), and bootstrap paired
// significance testing.

#include <cstdint>
#include <vector>

#include "omnidet/geometry.hpp"

namespace omnidet::eval {

struct ImageEval {
  std::vector<geom::Detection> dets;
  std::vector<geom::Box> gts;
};

inline const std::vector<double>& map_thresholds() {
  static const std::vector<double> t = {0.40, 0.45, 0.50, 0.55,
                                        0.60, 0.65, 0.70, 0.75};
  return t;
}

// Greedy matching per image in descending score order (one match per ground
// truth at IoU >= threshold), 101-point interpolated AP over the pooled
// ranking. No ground truth anywhere -> 0.
double average_precision(const std::vector<ImageEval>& images,
                         double iou_threshold);

struct EvalResult {
  std::vector<double> thresholds;
  std::vector<double> ap;  // one per threshold
  double map = 0;          // arithmetic mean of ap
  double ap50 = 0;
};

EvalResult map_metric(const std::vector<ImageEval>& images);

// Pooled precision/recall points at one IoU threshold, ranked by score
// (plot-ready dump).
struct PrCurve {
  double iou_threshold = 0;
  std::vector<double> recall, precision, score;
};

PrCurve pr_curve(const std::vector<ImageEval>& images, double iou_threshold);

// mAP recomputed on a resampled multiset of image indices.
double map_on_subset(const std::vector<ImageEval>& images,
                     const std::vector<int>& indices);

struct BootstrapResult {
  double t_statistic = 0;
  double p_value = 1;
  double mean_a = 0, mean_b = 0;
};

// Paired bootstrap over per-image scalar scores; the per-resample aggregate
// is the mean over the resampled multiset. Both methods see identical
// resampled index sets.
BootstrapResult bootstrap_compare(const std::vector<double>& scores_a,
                                  const std::vector<double>& scores_b,
                                  int n_resamples, std::uint64_t seed);

// Same resampling scheme with mAP as the per-resample aggregate.
BootstrapResult bootstrap_compare_map(const std::vector<ImageEval>& a,
                                      const std::vector<ImageEval>& b,
                                      int n_resamples, std::uint64_t seed);

// Two-sided p-value of a Student t statistic with df degrees of freedom.
double student_t_two_sided_p(double t, double df);

}  // namespace omnidet::eval

#include "omnidet/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "omnidet/rng.hpp"

namespace omnidet::eval {

namespace {

struct PooledDet {
  double score;
  int image;
  int det_index;
  bool tp;
};

// Match one image's detections greedily by descending score; each detection
// takes the unmatched ground truth with the highest IoU when that IoU clears
// the threshold.
void match_image(const ImageEval& im, double thr, int image_idx,
                 std::vector<PooledDet>& pooled) {
  std::vector<std::size_t> order(im.dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return im.dets[a].score > im.dets[b].score;
  });
  std::vector<bool> taken(im.gts.size(), false);
  for (std::size_t k : order) {
    double best = 0.0;
    int best_gt = -1;
    for (std::size_t g = 0; g < im.gts.size(); ++g) {
      if (taken[g]) continue;
      const double v = geom::iou(im.dets[k].box, im.gts[g]);
      if (v > best) {
        best = v;
        best_gt = static_cast<int>(g);
      }
    }
    const bool tp = best_gt >= 0 && best >= thr;
    if (tp) taken[best_gt] = true;
    pooled.push_back(PooledDet{im.dets[k].score, image_idx,
                               static_cast<int>(k), tp});
  }
}

double ap_from_pool(std::vector<PooledDet>& pooled, std::size_t total_gt) {
  if (total_gt == 0) return 0.0;
  std::sort(pooled.begin(), pooled.end(),
            [](const PooledDet& a, const PooledDet& b) {
              if (a.score != b.score) return a.score > b.score;
              if (a.image != b.image) return a.image < b.image;
              return a.det_index < b.det_index;
            });
  const std::size_t n = pooled.size();
  std::vector<double> precision(n), recall(n);
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (pooled[i].tp) ++tp;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / static_cast<double>(total_gt);
  }
  // Running max of precision from the right.
  for (std::size_t i = n; i-- > 1;)
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  // 101-point interpolation.
  double sum = 0.0;
  std::size_t k = 0;
  for (int r = 0; r <= 100; ++r) {
    const double target = r / 100.0;
    while (k < n && recall[k] < target - 1e-12) ++k;
    if (k < n) sum += precision[k];
  }
  return sum / 101.0;
}

}  // namespace

double average_precision(const std::vector<ImageEval>& images,
                         double iou_threshold) {
  std::vector<PooledDet> pooled;
  std::size_t total_gt = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    total_gt += images[i].gts.size();
    match_image(images[i], iou_threshold, static_cast<int>(i), pooled);
  }
  return ap_from_pool(pooled, total_gt);
}

PrCurve pr_curve(const std::vector<ImageEval>& images, double iou_threshold) {
  std::vector<PooledDet> pooled;
  std::size_t total_gt = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    total_gt += images[i].gts.size();
    match_image(images[i], iou_threshold, static_cast<int>(i), pooled);
  }
  std::sort(pooled.begin(), pooled.end(),
            [](const PooledDet& a, const PooledDet& b) {
              if (a.score != b.score) return a.score > b.score;
              if (a.image != b.image) return a.image < b.image;
              return a.det_index < b.det_index;
            });
  PrCurve curve;
  curve.iou_threshold = iou_threshold;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < pooled.size(); ++i) {
    if (pooled[i].tp) ++tp;
    curve.precision.push_back(static_cast<double>(tp) /
                              static_cast<double>(i + 1));
    curve.recall.push_back(total_gt == 0
                               ? 0.0
                               : static_cast<double>(tp) /
                                     static_cast<double>(total_gt));
    curve.score.push_back(pooled[i].score);
  }
  return curve;
}

EvalResult map_metric(const std::vector<ImageEval>& images) {
  EvalResult r;
  r.thresholds = map_thresholds();
  double sum = 0.0;
  for (double thr : r.thresholds) {
    const double ap = average_precision(images, thr);
    r.ap.push_back(ap);
    sum += ap;
    if (std::abs(thr - 0.50) < 1e-9) r.ap50 = ap;
  }
  r.map = sum / static_cast<double>(r.thresholds.size());
  return r;
}

double map_on_subset(const std::vector<ImageEval>& images,
                     const std::vector<int>& indices) {
  std::vector<ImageEval> subset;
  subset.reserve(indices.size());
  for (int i : indices) subset.push_back(images[i]);
  return map_metric(subset).map;
}

// --- Student t ---------------------------------------------------------------

namespace {

double betacf(double a, double b, double x) {
  constexpr int kMaxIter = 200;
  constexpr double kEps = 3e-14, kFpMin = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kFpMin) d = kFpMin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

double incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln_beta = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b);
  const double front =
      std::exp(ln_beta + a * std::log(x) + b * std::log(1.0 - x));
  if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
  return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

}  // namespace

double student_t_two_sided_p(double t, double df) {
  if (df <= 0) return 1.0;
  const double x = df / (df + t * t);
  return incomplete_beta(df / 2.0, 0.5, x);
}

// --- bootstrap ---------------------------------------------------------------

namespace {

BootstrapResult paired_ttest(const std::vector<double>& agg_a,
                             const std::vector<double>& agg_b) {
  const std::size_t n = agg_a.size();
  BootstrapResult r;
  double mean_d = 0;
  for (std::size_t i = 0; i < n; ++i) {
    r.mean_a += agg_a[i];
    r.mean_b += agg_b[i];
    mean_d += agg_a[i] - agg_b[i];
  }
  r.mean_a /= static_cast<double>(n);
  r.mean_b /= static_cast<double>(n);
  mean_d /= static_cast<double>(n);
  double var = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = agg_a[i] - agg_b[i] - mean_d;
    var += d * d;
  }
  var /= static_cast<double>(n - 1);
  const double sd = std::sqrt(var);
  if (sd < 1e-15) {
    // Zero variance of differences: identical aggregates give p = 1, a
    // constant nonzero shift is unambiguously significant.
    r.t_statistic = mean_d == 0.0 ? 0.0
                                  : std::numeric_limits<double>::infinity() *
                                        (mean_d > 0 ? 1 : -1);
    r.p_value = std::abs(mean_d) < 1e-15 ? 1.0 : 0.0;
    return r;
  }
  r.t_statistic = mean_d / (sd / std::sqrt(static_cast<double>(n)));
  r.p_value = student_t_two_sided_p(std::abs(r.t_statistic),
                                    static_cast<double>(n - 1));
  return r;
}

std::vector<std::vector<int>> resample_indices(std::size_t n_images,
                                               int n_resamples,
                                               std::uint64_t seed) {
  rng::Engine eng(seed);
  std::vector<std::vector<int>> rounds(n_resamples);
  for (auto& idx : rounds) {
    idx.resize(n_images);
    for (auto& v : idx)
      v = static_cast<int>(rng::below(eng, n_images));
  }
  return rounds;
}

}  // namespace

BootstrapResult bootstrap_compare(const std::vector<double>& scores_a,
                                  const std::vector<double>& scores_b,
                                  int n_resamples, std::uint64_t seed) {
  if (scores_a.size() != scores_b.size() || scores_a.empty())
    throw std::invalid_argument("bootstrap: image sets must match");
  if (n_resamples < 2)
    throw std::invalid_argument("bootstrap: need at least 2 resamples");
  const auto rounds = resample_indices(scores_a.size(), n_resamples, seed);
  std::vector<double> agg_a(n_resamples), agg_b(n_resamples);
  for (int r = 0; r < n_resamples; ++r) {
    double sa = 0, sb = 0;
    for (int i : rounds[r]) {
      sa += scores_a[i];
      sb += scores_b[i];
    }
    agg_a[r] = sa / static_cast<double>(rounds[r].size());
    agg_b[r] = sb / static_cast<double>(rounds[r].size());
  }
  return paired_ttest(agg_a, agg_b);
}

BootstrapResult bootstrap_compare_map(const std::vector<ImageEval>& a,
                                      const std::vector<ImageEval>& b,
                                      int n_resamples, std::uint64_t seed) {
  if (a.size() != b.size() || a.empty())
    throw std::invalid_argument("bootstrap: image sets must match");
  if (n_resamples < 2)
    throw std::invalid_argument("bootstrap: need at least 2 resamples");
  const auto rounds = resample_indices(a.size(), n_resamples, seed);
  std::vector<double> agg_a(n_resamples), agg_b(n_resamples);
  for (int r = 0; r < n_resamples; ++r) {
    agg_a[r] = map_on_subset(a, rounds[r]);
    agg_b[r] = map_on_subset(b, rounds[r]);
  }
  return paired_ttest(agg_a, agg_b);
}

}  // namespace omnidet::eval

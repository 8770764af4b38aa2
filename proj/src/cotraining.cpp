#include "omnidet/cotraining.hpp"

#include <cmath>
#include <stdexcept>

namespace omnidet::cotrain {

LevelMaps inter_guided_map(const BranchPredictions& preds,
                           data::Granularity target) {
  int contributors = 0;
  for (const auto& [g, maps] : preds.prob) {
    (void)maps;
    if (g != target) ++contributors;
  }
  if (preds.prob.size() < 2 || contributors < 1)
    throw std::runtime_error("co-training requires >= 2 branches");

  LevelMaps out = make_level_maps(preds.shapes, 1.0f);
  for (const auto& [g, maps] : preds.prob) {
    if (g == target) continue;
    for (std::size_t l = 0; l < out.size(); ++l)
      for (std::size_t i = 0; i < out[l].size(); ++i) out[l][i] *= maps[l][i];
  }
  const double root = 1.0 / contributors;
  for (auto& level : out)
    for (float& v : level)
      v = static_cast<float>(std::pow(static_cast<double>(v), root));
  return out;
}

LevelMaps normalize_map(const LevelMaps& values,
                        const assign::UncertainRegion& support) {
  if (support.size() == 0)
    throw std::runtime_error("normalize_map: empty support");
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (std::size_t l = 0; l < support.pixels.size(); ++l) {
    for (int idx : support.pixels[l]) {
      const double v = values[l][idx];
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  LevelMaps out;
  out.reserve(values.size());
  for (const auto& level : values) out.emplace_back(level.size(), 0.0f);
  const double span = hi - lo;
  if (span <= 0.0) return out;  // flat map: nothing promoted
  for (std::size_t l = 0; l < support.pixels.size(); ++l)
    for (int idx : support.pixels[l])
      out[l][idx] = static_cast<float>((values[l][idx] - lo) / span);
  return out;
}

SampleWeightMap weights_weak(const LevelMaps& inter_guided,
                             const assign::UncertainRegion& region) {
  SampleWeightMap w;
  w.w = normalize_map(inter_guided, region);
  w.source = WeightSource::weak;
  return w;
}

LevelMaps iou_map(const std::vector<std::vector<float>>& reg,
                  const std::vector<assign::LevelShape>& shapes,
                  const assign::UncertainRegion& region) {
  if (!region.governing_box)
    throw std::runtime_error("iou_map: region has no governing box");
  const geom::Box& gt = *region.governing_box;
  LevelMaps out;
  out.reserve(shapes.size());
  for (const auto& s : shapes)
    out.emplace_back(static_cast<std::size_t>(s.points()), 0.0f);
  for (std::size_t l = 0; l < region.pixels.size(); ++l) {
    const auto& sh = shapes[l];
    const int n = sh.points();
    for (int idx : region.pixels[l]) {
      const double px = sh.stride / 2.0 + (idx % sh.w) * sh.stride;
      const double py = sh.stride / 2.0 + (idx / sh.w) * sh.stride;
      const geom::Box pred{px - reg[l][0 * n + idx], py - reg[l][1 * n + idx],
                           px + reg[l][2 * n + idx], py + reg[l][3 * n + idx]};
      out[l][idx] = static_cast<float>(geom::iou(pred, gt));
    }
  }
  return out;
}

SampleWeightMap weights_strong(const LevelMaps* inter_guided,
                               const LevelMaps& iou,
                               const WeightingConfig& cfg,
                               const assign::UncertainRegion& region) {
  if (!region.governing_box)
    throw std::runtime_error("weights_strong: region has no governing box");
  if (cfg.beta <= 0.0) throw std::invalid_argument("beta must be > 0");
  if (!cfg.alpha_from_max_I && cfg.alpha_fixed <= 0.0)
    throw std::invalid_argument("fixed alpha must be > 0");

  double alpha = cfg.alpha_fixed;
  if (inter_guided && cfg.alpha_from_max_I)
    alpha = max_over_region(*inter_guided, region);

  LevelMaps pre;
  pre.reserve(iou.size());
  for (const auto& level : iou) pre.emplace_back(level.size(), 0.0f);
  for (std::size_t l = 0; l < region.pixels.size(); ++l) {
    for (int idx : region.pixels[l]) {
      double v = std::pow(static_cast<double>(iou[l][idx]), cfg.beta);
      if (inter_guided)
        v *= std::pow(static_cast<double>((*inter_guided)[l][idx]), alpha);
      pre[l][idx] = static_cast<float>(v);
    }
  }
  SampleWeightMap w;
  w.w = normalize_map(pre, region);
  w.source = inter_guided ? WeightSource::strong : WeightSource::iou_only;
  return w;
}

double max_over_region(const LevelMaps& m, const assign::UncertainRegion& r) {
  double hi = 0.0;
  for (std::size_t l = 0; l < r.pixels.size(); ++l)
    for (int idx : r.pixels[l]) hi = std::max(hi, static_cast<double>(m[l][idx]));
  return hi;
}

}  // namespace omnidet::cotrain

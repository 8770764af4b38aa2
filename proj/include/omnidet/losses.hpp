#pragma once

// Training objectives: focal loss on certain samples, the three uncertain
// label-assignment losses (hard / soft / dynamic), box regression via GIoU,
// and the composite total. Probabilities and weights are clamped to
// [eps, 1-eps] before any logarithm, which keeps every component finite and
// non-negative; the in-log weight factors are additive constants under the
// log, so gradients w.r.t. P are unaffected by them.
//
// Pointwise forms are double precision and expose analytic d/dP so they can
// be checked against central finite differences.

#include <vector>

#include "omnidet/assignment.hpp"
#include "omnidet/geometry.hpp"
#include "omnidet/maps.hpp"

namespace omnidet::losses {

enum class Strategy { HLA, SLA, DLA };

const char* to_string(Strategy s);
Strategy strategy_from_string(const std::string& s);

struct LossConfig {
  double gamma = 2.0;
  double t = 0.5;      // hard/soft threshold, W >= t is the positive side
  double eps = 1e-6;   // probability clamp
  Strategy strategy = Strategy::DLA;

  void validate() const;
};

// --- pointwise kernels -----------------------------------------------------

double focal_pos_point(double p, double gamma, double eps, double* dP);
double focal_neg_point(double p, double gamma, double eps, double* dP);
double hla_point(double p, double w, const LossConfig& cfg, double* dP);
double sla_point(double p, double w, const LossConfig& cfg, double* dP);
double dla_point(double p, double w, const LossConfig& cfg, double* dP);
// Dispatches on cfg.strategy.
double uncertain_point(double p, double w, const LossConfig& cfg, double* dP);

// Fused gradients w.r.t. the pre-sigmoid logit z (P = sigmoid(z)). These are
// the exact chain dL/dP * P(1-P) written in a form with no pole: a saturated
// unit (P -> 0 or 1 in float) still receives its bounded restoring gradient,
// so saturation is never an absorbing state.
double focal_pos_logit_grad(double p, double gamma);
double focal_neg_logit_grad(double p, double gamma);
double uncertain_logit_grad(double p, double w, const LossConfig& cfg);

// 1 - giou(decoded box, gt) for one grid point; distances are (l, t, r, b)
// in pixels. d_dist (if non-null) receives the gradient w.r.t. the four
// distances.
double giou_loss_point(double px, double py, const double dist[4],
                       const geom::Box& gt, double d_dist[4]);

// --- map-level sums ---------------------------------------------------------

// Focal loss over certain positives/negatives. Returns the plain sum;
// accumulates scale * dLoss/dz (logit gradient) into d_logit when provided.
double focal_certain(const LevelMaps& prob, const assign::TargetMaps& tm,
                     const LossConfig& cfg, LevelMaps* d_logit, double scale);

// Strategy loss over all uncertain pixels (the per-region sum equals the sum
// over the union since regions partition the uncertain set).
double uncertain_loss(const LevelMaps& prob, const LevelMaps& weights,
                      const assign::TargetMaps& tm, const LossConfig& cfg,
                      LevelMaps* d_logit, double scale);

// GIoU regression loss over region pixels with valid targets. reg holds the
// decoded distances per level (4 planes); d_reg receives scale * gradient.
double giou_loss(const std::vector<std::vector<float>>& reg,
                 const assign::TargetMaps& tm,
                 std::vector<std::vector<float>>* d_reg, double scale);

// --- composition ------------------------------------------------------------

struct BranchTerms {
  bool present = false;
  double certain = 0, uncertain = 0, regression = 0;
  double sum() const { return certain + uncertain + regression; }
};

struct LossReport {
  BranchTerms box, mask, dot, unlabeled;
  double delta = 0;  // weight on the unlabeled uncertain term
  double total = 0;
};

// total = (box.u + box.c + box.r) + (mask.u + mask.c + mask.r)
//       + (dot.u + dot.c) + delta * unlabeled.u, absent branches contribute 0.
LossReport total_loss(const BranchTerms& box, const BranchTerms& mask,
                      const BranchTerms& dot, const BranchTerms& unlabeled,
                      double delta);

}  // namespace omnidet::losses

#include "omnidet/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace omnidet::losses {

const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::HLA: return "HLA";
    case Strategy::SLA: return "SLA";
    case Strategy::DLA: return "DLA";
  }
  return "?";
}

Strategy strategy_from_string(const std::string& s) {
  if (s == "HLA") return Strategy::HLA;
  if (s == "SLA") return Strategy::SLA;
  if (s == "DLA") return Strategy::DLA;
  throw std::invalid_argument("unknown strategy: " + s);
}

void LossConfig::validate() const {
  if (gamma < 0) throw std::invalid_argument("gamma must be >= 0");
  if (t <= 0 || t >= 1) throw std::invalid_argument("t must be in (0,1)");
  if (eps <= 0 || eps >= 0.5)
    throw std::invalid_argument("eps must be in (0, 0.5)");
}

namespace {

// Clamping keeps every log argument positive so losses stay finite. The
// derivative is evaluated at the clamped value rather than zeroed outside
// the band: a saturated unit keeps a restoring gradient (the 1/P and
// 1/(1-P) poles cancel against the sigmoid chain), so saturation is not an
// absorbing state.
inline double clamp_unit(double x, double eps) {
  if (x < eps) return eps;
  if (x > 1.0 - eps) return 1.0 - eps;
  return x;
}

}  // namespace

double focal_pos_point(double p, double gamma, double eps, double* dP) {
  const double v = clamp_unit(p, eps);
  const double one_m = 1.0 - v;
  const double pow_g = std::pow(one_m, gamma);
  const double loss = pow_g * (-std::log(v));
  if (dP) {
    const double pow_gm1 = gamma > 0 ? std::pow(one_m, gamma - 1.0) : 0.0;
    *dP = gamma * pow_gm1 * std::log(v) - pow_g / v;
  }
  return loss;
}

double focal_neg_point(double p, double gamma, double eps, double* dP) {
  const double v = clamp_unit(p, eps);
  const double pow_g = std::pow(v, gamma);
  const double loss = pow_g * (-std::log(1.0 - v));
  if (dP) {
    const double pow_gm1 = gamma > 0 ? std::pow(v, gamma - 1.0) : 0.0;
    *dP = -gamma * pow_gm1 * std::log(1.0 - v) + pow_g / (1.0 - v);
  }
  return loss;
}

double hla_point(double p, double w, const LossConfig& cfg, double* dP) {
  // W exactly at t takes the positive branch.
  return w >= cfg.t ? focal_pos_point(p, cfg.gamma, cfg.eps, dP)
                    : focal_neg_point(p, cfg.gamma, cfg.eps, dP);
}

namespace {

// W^g (1-P)^g * (-log((1-W) P)) with gradient w.r.t. P.
double soft_pos_term(double p, double w, const LossConfig& cfg, double* dP) {
  const double cp = clamp_unit(p, cfg.eps);
  const double cw = clamp_unit(w, cfg.eps);
  const double g = cfg.gamma;
  const double a = std::pow(cw, g);
  const double u = std::pow(1.0 - cp, g);
  const double logarg = -std::log((1.0 - cw) * cp);
  const double loss = a * u * logarg;
  if (dP) {
    const double um1 = g > 0 ? std::pow(1.0 - cp, g - 1.0) : 0.0;
    *dP = a * (-g * um1 * logarg - u / cp);
  }
  return loss;
}

// (1-W)^g P^g * (-log(W (1-P))) with gradient w.r.t. P.
double soft_neg_term(double p, double w, const LossConfig& cfg, double* dP) {
  const double cp = clamp_unit(p, cfg.eps);
  const double cw = clamp_unit(w, cfg.eps);
  const double g = cfg.gamma;
  const double b = std::pow(1.0 - cw, g);
  const double v = std::pow(cp, g);
  const double logarg = -std::log(cw * (1.0 - cp));
  const double loss = b * v * logarg;
  if (dP) {
    const double vm1 = g > 0 ? std::pow(cp, g - 1.0) : 0.0;
    *dP = b * (g * vm1 * logarg + v / (1.0 - cp));
  }
  return loss;
}

}  // namespace

double sla_point(double p, double w, const LossConfig& cfg, double* dP) {
  return w >= cfg.t ? soft_pos_term(p, w, cfg, dP)
                    : soft_neg_term(p, w, cfg, dP);
}

double dla_point(double p, double w, const LossConfig& cfg, double* dP) {
  double d_pos = 0, d_neg = 0;
  const double loss = soft_pos_term(p, w, cfg, dP ? &d_pos : nullptr) +
                      soft_neg_term(p, w, cfg, dP ? &d_neg : nullptr);
  if (dP) *dP = d_pos + d_neg;
  return loss;
}

double uncertain_point(double p, double w, const LossConfig& cfg, double* dP) {
  switch (cfg.strategy) {
    case Strategy::HLA: return hla_point(p, w, cfg, dP);
    case Strategy::SLA: return sla_point(p, w, cfg, dP);
    case Strategy::DLA: return dla_point(p, w, cfg, dP);
  }
  throw std::logic_error("bad strategy");
}

// --- fused logit gradients ----------------------------------------------------

namespace {

// x * ln(x) extended continuously to 0 at x = 0.
inline double xlnx(double x) { return x > 0.0 ? x * std::log(x) : 0.0; }

// A * (1-P)^g * (-ln((1-cw) P)) differentiated through the sigmoid:
// dz = A * (-g (1-P)^g * P*logarg - (1-P)^(g+1)), every factor bounded.
double soft_pos_logit_grad(double p, double w, const LossConfig& cfg) {
  const double cw = clamp_unit(w, cfg.eps);
  const double g = cfg.gamma;
  const double a = std::pow(cw, g);
  const double one_m = 1.0 - p;
  const double p_logarg = -p * std::log(1.0 - cw) - xlnx(p);
  return a * (-g * std::pow(one_m, g) * p_logarg -
              std::pow(one_m, g + 1.0));
}

double soft_neg_logit_grad(double p, double w, const LossConfig& cfg) {
  const double cw = clamp_unit(w, cfg.eps);
  const double g = cfg.gamma;
  const double b = std::pow(1.0 - cw, g);
  const double one_m = 1.0 - p;
  const double q_logarg = -one_m * std::log(cw) - xlnx(one_m);
  return b * (g * std::pow(p, g) * q_logarg + std::pow(p, g + 1.0));
}

}  // namespace

double focal_pos_logit_grad(double p, double gamma) {
  const double one_m = 1.0 - p;
  return gamma * std::pow(one_m, gamma) * xlnx(p) -
         std::pow(one_m, gamma + 1.0);
}

double focal_neg_logit_grad(double p, double gamma) {
  const double one_m = 1.0 - p;
  return -gamma * std::pow(p, gamma) * xlnx(one_m) +
         std::pow(p, gamma + 1.0);
}

double uncertain_logit_grad(double p, double w, const LossConfig& cfg) {
  switch (cfg.strategy) {
    case Strategy::HLA:
      return w >= cfg.t ? focal_pos_logit_grad(p, cfg.gamma)
                        : focal_neg_logit_grad(p, cfg.gamma);
    case Strategy::SLA:
      return w >= cfg.t ? soft_pos_logit_grad(p, w, cfg)
                        : soft_neg_logit_grad(p, w, cfg);
    case Strategy::DLA:
      return soft_pos_logit_grad(p, w, cfg) + soft_neg_logit_grad(p, w, cfg);
  }
  throw std::logic_error("bad strategy");
}

double giou_loss_point(double px, double py, const double dist[4],
                       const geom::Box& gt, double d_dist[4]) {
  const double qx0 = px - dist[0], qy0 = py - dist[1];
  const double qx1 = px + dist[2], qy1 = py + dist[3];

  const double iw = std::min(qx1, gt.x1) - std::max(qx0, gt.x0);
  const double ih = std::min(qy1, gt.y1) - std::max(qy0, gt.y0);
  const double inter = (iw > 0 && ih > 0) ? iw * ih : 0.0;
  const double area_p = (qx1 - qx0) * (qy1 - qy0);
  const double area_g = gt.area();
  const double uni = area_p + area_g - inter;
  const double cw = std::max(qx1, gt.x1) - std::min(qx0, gt.x0);
  const double ch = std::max(qy1, gt.y1) - std::min(qy0, gt.y0);
  const double enc = cw * ch;

  const double g = (uni > 0 ? inter / uni : 0.0) +
                   (enc > 0 ? uni / enc : 0.0) - 1.0;
  const double loss = 1.0 - g;
  if (!d_dist) return loss;

  // Gradients w.r.t. the predicted corners.
  double dI[4] = {0, 0, 0, 0};
  if (inter > 0) {
    dI[0] = (qx0 > gt.x0 ? -1.0 : 0.0) * ih;
    dI[1] = (qy0 > gt.y0 ? -1.0 : 0.0) * iw;
    dI[2] = (qx1 < gt.x1 ? 1.0 : 0.0) * ih;
    dI[3] = (qy1 < gt.y1 ? 1.0 : 0.0) * iw;
  }
  const double dAp[4] = {-(qy1 - qy0), -(qx1 - qx0), (qy1 - qy0),
                         (qx1 - qx0)};
  double dC[4] = {0, 0, 0, 0};
  if (enc > 0) {
    dC[0] = (qx0 < gt.x0 ? -1.0 : 0.0) * ch;
    dC[1] = (qy0 < gt.y0 ? -1.0 : 0.0) * cw;
    dC[2] = (qx1 > gt.x1 ? 1.0 : 0.0) * ch;
    dC[3] = (qy1 > gt.y1 ? 1.0 : 0.0) * cw;
  }
  for (int k = 0; k < 4; ++k) {
    const double dU = dAp[k] - dI[k];
    double dg = 0.0;
    if (uni > 0) dg += (dI[k] * uni - inter * dU) / (uni * uni);
    if (enc > 0) dg += (dU * enc - uni * dC[k]) / (enc * enc);
    const double d_corner = -dg;  // loss = 1 - giou
    // Corner -> distance chain: x0 = px - l, y0 = py - t, x1 = px + r,
    // y1 = py + b.
    d_dist[k] = (k < 2) ? -d_corner : d_corner;
  }
  return loss;
}

double focal_certain(const LevelMaps& prob, const assign::TargetMaps& tm,
                     const LossConfig& cfg, LevelMaps* d_logit, double scale) {
  double total = 0;
  for (std::size_t l = 0; l < prob.size(); ++l) {
    const auto& pos = tm.certain_pos[l];
    const auto& neg = tm.certain_neg[l];
    for (std::size_t i = 0; i < prob[l].size(); ++i) {
      if (!pos[i] && !neg[i]) continue;
      const double p = prob[l][i];
      total += pos[i] ? focal_pos_point(p, cfg.gamma, cfg.eps, nullptr)
                      : focal_neg_point(p, cfg.gamma, cfg.eps, nullptr);
      if (d_logit) {
        const double d = pos[i] ? focal_pos_logit_grad(p, cfg.gamma)
                                : focal_neg_logit_grad(p, cfg.gamma);
        (*d_logit)[l][i] += static_cast<float>(scale * d);
      }
    }
  }
  return total;
}

double uncertain_loss(const LevelMaps& prob, const LevelMaps& weights,
                      const assign::TargetMaps& tm, const LossConfig& cfg,
                      LevelMaps* d_logit, double scale) {
  double total = 0;
  for (const auto& region : tm.regions) {
    for (std::size_t l = 0; l < region.pixels.size(); ++l) {
      for (int idx : region.pixels[l]) {
        total += uncertain_point(prob[l][idx], weights[l][idx], cfg, nullptr);
        if (d_logit)
          (*d_logit)[l][idx] += static_cast<float>(
              scale * uncertain_logit_grad(prob[l][idx], weights[l][idx], cfg));
      }
    }
  }
  return total;
}

double giou_loss(const std::vector<std::vector<float>>& reg,
                 const assign::TargetMaps& tm,
                 std::vector<std::vector<float>>* d_reg, double scale) {
  double total = 0;
  for (const auto& region : tm.regions) {
    if (!region.governing_box) continue;
    const geom::Box& gt = *region.governing_box;
    for (std::size_t l = 0; l < region.pixels.size(); ++l) {
      const auto& sh = tm.shapes[l];
      const int n = sh.points();
      for (int idx : region.pixels[l]) {
        if (!tm.reg_valid[l][idx]) continue;
        const double px = sh.stride / 2.0 + (idx % sh.w) * sh.stride;
        const double py = sh.stride / 2.0 + (idx / sh.w) * sh.stride;
        const double dist[4] = {reg[l][0 * n + idx], reg[l][1 * n + idx],
                                reg[l][2 * n + idx], reg[l][3 * n + idx]};
        double grad[4];
        total += giou_loss_point(px, py, dist, gt, d_reg ? grad : nullptr);
        if (d_reg)
          for (int c = 0; c < 4; ++c)
            (*d_reg)[l][static_cast<std::size_t>(c) * n + idx] +=
                static_cast<float>(scale * grad[c]);
      }
    }
  }
  return total;
}

LossReport total_loss(const BranchTerms& box, const BranchTerms& mask,
                      const BranchTerms& dot, const BranchTerms& unlabeled,
                      double delta) {
  LossReport r;
  r.box = box;
  r.mask = mask;
  r.dot = dot;
  r.unlabeled = unlabeled;
  r.delta = delta;
  double total = 0;
  if (box.present) total += box.sum();
  if (mask.present) total += mask.sum();
  if (dot.present) total += dot.certain + dot.uncertain;
  if (unlabeled.present) total += delta * unlabeled.uncertain;
  r.total = total;
  return r;
}

}  // namespace omnidet::losses

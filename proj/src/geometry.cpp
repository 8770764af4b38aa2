#include "omnidet/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace omnidet::geom {

std::size_t InstanceMask::foreground_count() const {
  return std::count(bits.begin(), bits.end(), std::uint8_t{1});
}

namespace {

double intersection_area(const Box& a, const Box& b) {
  const double w = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double h = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  if (w <= 0.0 || h <= 0.0) return 0.0;
  return w * h;
}

}  // namespace

double iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;  // degenerate boxes
  return inter / uni;
}

double giou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  const double cw = std::max(a.x1, b.x1) - std::min(a.x0, b.x0);
  const double ch = std::max(a.y1, b.y1) - std::min(a.y0, b.y0);
  const double enclose = cw * ch;
  const double i = uni <= 0.0 ? 0.0 : inter / uni;
  if (enclose <= 0.0) return i;
  return i - (enclose - uni) / enclose;
}

std::vector<Detection> nms(const std::vector<Detection>& dets,
                           double iou_threshold) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  // Stable sort: score ties keep input order.
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) {
                     return dets[a].score > dets[b].score;
                   });
  std::vector<Detection> kept;
  kept.reserve(dets.size());
  for (std::size_t idx : order) {
    bool suppressed = false;
    for (const Detection& k : kept) {
      if (iou(dets[idx].box, k.box) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(dets[idx]);
  }
  return kept;
}

Box box_from_mask(const InstanceMask& m) {
  int min_x = m.width, min_y = m.height, max_x = -1, max_y = -1;
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      if (!m.at(x, y)) continue;
      min_x = std::min(min_x, x);
      min_y = std::min(min_y, y);
      max_x = std::max(max_x, x);
      max_y = std::max(max_y, y);
    }
  }
  if (max_x < 0) throw std::invalid_argument("empty mask");
  // Pixel (x, y) spans [x, x+1) x [y, y+1).
  return Box{static_cast<double>(min_x), static_cast<double>(min_y),
             static_cast<double>(max_x + 1), static_cast<double>(max_y + 1)};
}

Dot dot_from_mask(const InstanceMask& m) {
  double sx = 0, sy = 0;
  std::size_t n = 0;
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      if (!m.at(x, y)) continue;
      sx += x + 0.5;
      sy += y + 0.5;
      ++n;
    }
  }
  if (n == 0) throw std::invalid_argument("empty mask");
  return Dot{sx / static_cast<double>(n), sy / static_cast<double>(n)};
}

InstanceMask mask_from_polygon(
    const std::vector<std::pair<double, double>>& poly, int width,
    int height) {
  InstanceMask m;
  m.width = width;
  m.height = height;
  m.bits.assign(static_cast<std::size_t>(width) * height, 0);
  const std::size_t n = poly.size();
  if (n < 3) return m;
  for (int y = 0; y < height; ++y) {
    const double py = y + 0.5;
    // Gather crossings of the horizontal line at py.
    std::vector<double> xs;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& [ax, ay] = poly[i];
      const auto& [bx, by] = poly[(i + 1) % n];
      if ((ay <= py && by > py) || (by <= py && ay > py)) {
        const double t = (py - ay) / (by - ay);
        xs.push_back(ax + t * (bx - ax));
      }
    }
    std::sort(xs.begin(), xs.end());
    // Pixel centers in [left, right): left-inclusive, right-exclusive.
    for (std::size_t i = 0; i + 1 < xs.size(); i += 2) {
      const int x_begin = std::max(0, static_cast<int>(std::ceil(xs[i] - 0.5)));
      const int x_end = std::min(
          width - 1, static_cast<int>(std::ceil(xs[i + 1] - 0.5)) - 1);
      for (int x = x_begin; x <= x_end; ++x) m.set(x, y);
    }
  }
  return m;
}

InstanceMask mask_from_box(const Box& b, int width, int height) {
  InstanceMask m;
  m.width = width;
  m.height = height;
  m.bits.assign(static_cast<std::size_t>(width) * height, 0);
  const int x0 = std::max(0, static_cast<int>(std::ceil(b.x0 - 1e-9)));
  const int y0 = std::max(0, static_cast<int>(std::ceil(b.y0 - 1e-9)));
  const int x1 = std::min(width, static_cast<int>(std::floor(b.x1 + 1e-9)));
  const int y1 = std::min(height, static_cast<int>(std::floor(b.y1 + 1e-9)));
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) m.set(x, y);
  return m;
}

}  // namespace omnidet::geom

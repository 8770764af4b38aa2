#pragma once

// Axis-aligned box, instance-mask and dot geometry for a single-class
// detector. Boxes use half-open pixel-edge coordinates: pixel (x, y) spans
// [x, x+1) x [y, y+1), so a mask -> box -> area round trip is exact.

#include <cstdint>
#include <vector>

namespace omnidet::geom {

struct Box {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return width() * height(); }
  bool valid() const { return x1 >= x0 && y1 >= y0; }
  // Strict interior test (boundary excluded).
  bool contains(double x, double y) const {
    return x > x0 && x < x1 && y > y0 && y < y1;
  }
};

struct Dot {
  double x = 0, y = 0;
};

// Full-image binary bitmap, row-major; bitmap dimensions equal the image's.
struct InstanceMask {
  int width = 0, height = 0;
  std::vector<std::uint8_t> bits;  // 0 or 1, size width*height

  bool at(int x, int y) const {
    return bits[static_cast<std::size_t>(y) * width + x] != 0;
  }
  void set(int x, int y, bool v = true) {
    bits[static_cast<std::size_t>(y) * width + x] = v ? 1 : 0;
  }
  std::size_t foreground_count() const;
};

struct Detection {
  Box box;
  double score = 0;  // in [0, 1]; class is implicitly the single lesion class
};

double iou(const Box& a, const Box& b);
double giou(const Box& a, const Box& b);

// Greedy suppression in descending score order; ties keep input order.
// Output is sorted by descending score; kept boxes have pairwise IoU <= thr.
std::vector<Detection> nms(const std::vector<Detection>& dets,
                           double iou_threshold);

// Tight bounding box of foreground pixels. Throws on an empty mask.
Box box_from_mask(const InstanceMask& m);
// Centroid of foreground pixel centers. Throws on an empty mask.
Dot dot_from_mask(const InstanceMask& m);

// Even-odd scanline fill of a polygon (vertices in pixel coordinates) into a
// width x height bitmap; a pixel is foreground if its center is inside.
InstanceMask mask_from_polygon(const std::vector<std::pair<double, double>>& poly,
                               int width, int height);

// Bitmap of the pixels fully covered by an axis-aligned box (used by tests
// for the mask -> box round trip).
InstanceMask mask_from_box(const Box& b, int width, int height);

}  // namespace omnidet::geom

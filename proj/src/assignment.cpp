#include "omnidet/assignment.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace omnidet::assign {

void GridSpec::validate(int image_w, int image_h) const {
  if (strides.empty() || strides.size() != range_max.size())
    throw std::invalid_argument("grid: strides/ranges size mismatch");
  for (std::size_t i = 1; i < strides.size(); ++i)
    if (strides[i] <= strides[i - 1])
      throw std::invalid_argument("grid: strides must be strictly increasing");
  for (std::size_t i = 1; i < range_max.size(); ++i)
    if (range_max[i] <= range_max[i - 1])
      throw std::invalid_argument("grid: ranges must be increasing");
  if (!std::isinf(range_max.back()))
    throw std::invalid_argument("grid: top range must be unbounded");
  const int top = strides.back();
  if (image_w % top != 0 || image_h % top != 0)
    throw std::invalid_argument(
        "grid: image size must be divisible by the largest stride");
}

std::vector<std::vector<geom::Dot>> grid_points(
    int image_w, int image_h, const std::vector<int>& strides) {
  std::vector<std::vector<geom::Dot>> levels;
  for (int s : strides) {
    if (image_w % s != 0 || image_h % s != 0)
      throw std::invalid_argument(
          "grid: image size must be divisible by every stride");
    const int w = image_w / s, h = image_h / s;
    std::vector<geom::Dot> pts;
    pts.reserve(static_cast<std::size_t>(w) * h);
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        pts.push_back(geom::Dot{s / 2.0 + j * s, s / 2.0 + i * s});
    levels.push_back(std::move(pts));
  }
  return levels;
}

int assign_level(const geom::Box& box, const GridSpec& grid) {
  // At the center, max(l,t,r,b) is half the larger side.
  const double m = std::max(box.width(), box.height()) / 2.0;
  for (std::size_t i = 0; i < grid.range_max.size(); ++i)
    if (m < grid.range_max[i]) return static_cast<int>(i);
  return static_cast<int>(grid.range_max.size()) - 1;
}

std::size_t TargetMaps::count_pos() const {
  std::size_t n = 0;
  for (const auto& v : certain_pos) n += std::count(v.begin(), v.end(), 1);
  return n;
}

std::size_t TargetMaps::count_neg() const {
  std::size_t n = 0;
  for (const auto& v : certain_neg) n += std::count(v.begin(), v.end(), 1);
  return n;
}

namespace {

struct Instance {
  geom::Box box;                       // governing box
  const geom::InstanceMask* mask = nullptr;  // null for box annotations
  double area = 0;
};

// Grid cell of a continuous coordinate: the cell [i*s, (i+1)*s) contains x,
// whose center is also the nearest grid point (boundary ties go to the
// containing cell).
inline int cell_index(double x, int stride, int count) {
  int i = static_cast<int>(std::floor(x / stride));
  return std::clamp(i, 0, count - 1);
}

// Majority-foreground test for a stride-sized cell of the mask.
bool cell_majority(const geom::InstanceMask& m, int cx, int cy, int stride) {
  const int x0 = cx * stride, y0 = cy * stride;
  int fg = 0;
  for (int y = y0; y < std::min(y0 + stride, m.height); ++y)
    for (int x = x0; x < std::min(x0 + stride, m.width); ++x)
      if (m.at(x, y)) ++fg;
  return 2 * fg > stride * stride;
}

}  // namespace

TargetMaps build_targets(const data::DatasetItem& item, int image_w,
                         int image_h, const GridSpec& grid) {
  grid.validate(image_w, image_h);
  TargetMaps tm;
  const int n_levels = static_cast<int>(grid.strides.size());
  for (int s : grid.strides)
    tm.shapes.push_back(LevelShape{s, image_h / s, image_w / s});
  for (const auto& sh : tm.shapes) {
    tm.certain_pos.emplace_back(sh.points(), 0);
    tm.certain_neg.emplace_back(sh.points(), 0);
    tm.reg_target.emplace_back(static_cast<std::size_t>(sh.points()) * 4, 0.0f);
    tm.reg_valid.emplace_back(sh.points(), 0);
  }

  const data::Granularity g = item.granularity;

  if (g == data::Granularity::dot) {
    for (const auto& d : item.dots) {
      if (d.x < 0 || d.x > image_w || d.y < 0 || d.y > image_h)
        throw std::runtime_error("dot outside image bounds");
    }
    // One certain positive per dot per level (collisions merge); everything
    // else is a single uncertain region spanning all levels.
    for (int l = 0; l < n_levels; ++l) {
      const auto& sh = tm.shapes[l];
      for (const auto& d : item.dots) {
        const int cx = cell_index(d.x, sh.stride, sh.w);
        const int cy = cell_index(d.y, sh.stride, sh.h);
        tm.certain_pos[l][static_cast<std::size_t>(cy) * sh.w + cx] = 1;
      }
    }
    UncertainRegion region;
    region.pixels.resize(n_levels);
    for (int l = 0; l < n_levels; ++l)
      for (int i = 0; i < tm.shapes[l].points(); ++i)
        if (!tm.certain_pos[l][i]) region.pixels[l].push_back(i);
    tm.regions.push_back(std::move(region));
    return tm;
  }

  if (g == data::Granularity::unlabeled) {
    UncertainRegion region;
    region.pixels.resize(n_levels);
    for (int l = 0; l < n_levels; ++l)
      for (int i = 0; i < tm.shapes[l].points(); ++i)
        region.pixels[l].push_back(i);
    tm.regions.push_back(std::move(region));
    return tm;
  }

  // Box / mask items: one uncertain region per instance on its assigned
  // level; every other grid point on every level is a certain negative.
  std::vector<Instance> instances;
  if (g == data::Granularity::box) {
    for (const auto& b : item.boxes)
      instances.push_back(Instance{b, nullptr, b.area()});
  } else {
    for (const auto& m : item.masks) {
      const geom::Box b = geom::box_from_mask(m);
      instances.push_back(Instance{b, &m, b.area()});
    }
  }

  // Ownership per (level, pixel): instance index or -1; overlaps go to the
  // minimal-area instance.
  std::vector<std::vector<int>> owner(n_levels);
  for (int l = 0; l < n_levels; ++l) owner[l].assign(tm.shapes[l].points(), -1);

  for (std::size_t k = 0; k < instances.size(); ++k) {
    const Instance& inst = instances[k];
    const int l = assign_level(inst.box, grid);
    const auto& sh = tm.shapes[l];

    // Candidate cells: centers strictly inside the governing box (keeps
    // regression targets strictly positive). For masks, additionally require
    // a majority-foreground cell; if that empties the region, fall back to
    // the tight box.
    std::vector<int> cells;
    std::vector<int> box_cells;
    for (int cy = 0; cy < sh.h; ++cy) {
      for (int cx = 0; cx < sh.w; ++cx) {
        const double px = sh.stride / 2.0 + cx * sh.stride;
        const double py = sh.stride / 2.0 + cy * sh.stride;
        if (!inst.box.contains(px, py)) continue;
        const int idx = cy * sh.w + cx;
        box_cells.push_back(idx);
        if (inst.mask && !cell_majority(*inst.mask, cx, cy, sh.stride))
          continue;
        cells.push_back(idx);
      }
    }
    if (inst.mask && cells.empty()) cells = box_cells;

    for (int idx : cells) {
      int& own = owner[l][idx];
      if (own < 0 || instances[own].area > inst.area)
        own = static_cast<int>(k);
    }
  }

  tm.regions.resize(instances.size());
  for (std::size_t k = 0; k < instances.size(); ++k) {
    tm.regions[k].pixels.resize(n_levels);
    tm.regions[k].governing_box = instances[k].box;
  }
  for (int l = 0; l < n_levels; ++l) {
    const auto& sh = tm.shapes[l];
    for (int i = 0; i < sh.points(); ++i) {
      const int own = owner[l][i];
      if (own < 0) {
        tm.certain_neg[l][i] = 1;
        continue;
      }
      tm.regions[own].pixels[l].push_back(i);
      const geom::Box& b = instances[own].box;
      const double px = sh.stride / 2.0 + (i % sh.w) * sh.stride;
      const double py = sh.stride / 2.0 + (i / sh.w) * sh.stride;
      float* t = tm.reg_target[l].data();
      const int n = sh.points();
      t[0 * n + i] = static_cast<float>(px - b.x0);
      t[1 * n + i] = static_cast<float>(py - b.y0);
      t[2 * n + i] = static_cast<float>(b.x1 - px);
      t[3 * n + i] = static_cast<float>(b.y1 - py);
      tm.reg_valid[l][i] = 1;
    }
  }
  return tm;
}

}  // namespace omnidet::assign

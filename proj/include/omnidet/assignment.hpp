#pragma once

// Per-level certain/uncertain target construction. Every grid point of every
// pyramid level ends up in exactly one of: certain positive, certain
// negative, or a member of one uncertain region.

#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "omnidet/data.hpp"
#include "omnidet/geometry.hpp"

namespace omnidet::assign {

struct GridSpec {
  std::vector<int> strides = {8, 16, 32};
  // Upper bounds (exclusive) on max regression distance per level; the last
  // entry is an infinity sentinel.
  std::vector<double> range_max = {64.0, 128.0,
                                   std::numeric_limits<double>::infinity()};

  void validate(int image_w, int image_h) const;  // throws on misfit
};

struct LevelShape {
  int stride = 0, h = 0, w = 0;
  int points() const { return h * w; }
};

// Grid point centers per level: (stride/2 + i*stride).
std::vector<std::vector<geom::Dot>> grid_points(int image_w, int image_h,
                                                const std::vector<int>& strides);

// Level index whose range contains max(l,t,r,b) measured at the box center.
int assign_level(const geom::Box& box, const GridSpec& grid);

struct UncertainRegion {
  // Flat grid indices per level; disjoint across regions on a level.
  std::vector<std::vector<int>> pixels;
  std::optional<geom::Box> governing_box;

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& v : pixels) n += v.size();
    return n;
  }
};

struct TargetMaps {
  std::vector<LevelShape> shapes;
  // Per level, one byte per grid point.
  std::vector<std::vector<std::uint8_t>> certain_pos;
  std::vector<std::vector<std::uint8_t>> certain_neg;
  // Per level, 4 channels (l, t, r, b) in pixels, plane-major; valid flags.
  std::vector<std::vector<float>> reg_target;
  std::vector<std::vector<std::uint8_t>> reg_valid;
  std::vector<UncertainRegion> regions;

  std::size_t total_points() const {
    std::size_t n = 0;
    for (const auto& s : shapes) n += s.points();
    return n;
  }
  std::size_t count_pos() const;
  std::size_t count_neg() const;
};

// Builds targets for one item. Training never sees hidden_gt: only the
// granularity-matching annotations are read.
TargetMaps build_targets(const data::DatasetItem& item, int image_w,
                         int image_h, const GridSpec& grid);

}  // namespace omnidet::assign

#pragma once

#include <vector>

#include "omnidet/assignment.hpp"

namespace omnidet {

// One scalar field per pyramid level, flat row-major per level.
using LevelMaps = std::vector<std::vector<float>>;

inline LevelMaps make_level_maps(const std::vector<assign::LevelShape>& shapes,
                                 float fill = 0.0f) {
  LevelMaps m;
  m.reserve(shapes.size());
  for (const auto& s : shapes)
    m.emplace_back(static_cast<std::size_t>(s.points()), fill);
  return m;
}

}  // namespace omnidet

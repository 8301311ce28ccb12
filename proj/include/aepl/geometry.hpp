#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>

namespace aepl {

/// Spatial extent in voxels, axis order (x, y, z); z varies fastest in memory.
using Shape3 = std::array<std::int64_t, 3>;

/// Millimetres per voxel along (x, y, z).
using Spacing = std::array<double, 3>;

inline constexpr Spacing kUnitSpacing{1.0, 1.0, 1.0};

inline std::int64_t voxel_count(const Shape3& s) { return s[0] * s[1] * s[2]; }

inline std::size_t linear_index(const Shape3& s, std::int64_t i, std::int64_t j, std::int64_t k) {
  return static_cast<std::size_t>((i * s[1] + j) * s[2] + k);
}

std::string to_string(const Shape3& s);

}  // namespace aepl

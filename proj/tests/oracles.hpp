#pragma once

// Brute-force reference implementations used to check the library. They share
// no code with it: explicit loops over voxels and all pairs, in double.

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "aepl/geometry.hpp"
#include "aepl/metrics.hpp"

namespace oracle {

inline aepl::Mask3 random_mask(const aepl::Shape3& shape, double density, std::mt19937_64& rng) {
  std::bernoulli_distribution on(density);
  aepl::Mask3 m(shape);
  for (auto& v : m.data) v = on(rng) ? 1 : 0;
  return m;
}

inline double dice(const aepl::Mask3& a, const aepl::Mask3& b) {
  double inter = 0, sa = 0, sb = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    inter += a.data[i] && b.data[i];
    sa += a.data[i] != 0;
    sb += b.data[i] != 0;
  }
  return sa + sb == 0 ? 1.0 : 2.0 * inter / (sa + sb);
}

struct Point {
  std::int64_t x, y, z;
};

// Voxels of the mask with at least one of the six face neighbours outside
// the mask (or outside the volume).
inline std::vector<Point> surface(const aepl::Mask3& m) {
  const auto [nx, ny, nz] = m.shape;
  auto at = [&](std::int64_t x, std::int64_t y, std::int64_t z) -> bool {
    if (x < 0 || y < 0 || z < 0 || x >= nx || y >= ny || z >= nz) return false;
    return m.data[static_cast<std::size_t>((x * ny + y) * nz + z)] != 0;
  };
  std::vector<Point> out;
  for (std::int64_t x = 0; x < nx; ++x)
    for (std::int64_t y = 0; y < ny; ++y)
      for (std::int64_t z = 0; z < nz; ++z) {
        if (!at(x, y, z)) continue;
        const bool interior = at(x - 1, y, z) && at(x + 1, y, z) && at(x, y - 1, z) && at(x, y + 1, z) &&
                              at(x, y, z - 1) && at(x, y, z + 1);
        if (!interior) out.push_back({x, y, z});
      }
  return out;
}

inline double percentile95(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const double pos = 0.95 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline double directed95(const std::vector<Point>& from, const std::vector<Point>& to, const aepl::Spacing& sp) {
  std::vector<double> d;
  for (const auto& p : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : to) {
      const double dx = (p.x - q.x) * sp[0], dy = (p.y - q.y) * sp[1], dz = (p.z - q.z) * sp[2];
      best = std::min(best, std::sqrt(dx * dx + dy * dy + dz * dz));
    }
    d.push_back(best);
  }
  return percentile95(d);
}

/// Both masks must be nonempty.
inline double hd95(const aepl::Mask3& a, const aepl::Mask3& b, const aepl::Spacing& sp) {
  const auto sa = surface(a), sb = surface(b);
  return std::max(directed95(sa, sb, sp), directed95(sb, sa, sp));
}

// ---------------------------------------------------------------- losses --

/// Per-channel soft Dice loss; `p` and `t` hold `channels` contiguous blocks.
inline double dice_loss(const std::vector<double>& p, const std::vector<double>& t, int channels, double smooth) {
  const std::size_t per = p.size() / static_cast<std::size_t>(channels);
  double acc = 0.0;
  for (int c = 0; c < channels; ++c) {
    double inter = 0, sp = 0, st = 0;
    for (std::size_t i = 0; i < per; ++i) {
      const auto k = static_cast<std::size_t>(c) * per + i;
      inter += p[k] * t[k];
      sp += p[k];
      st += t[k];
    }
    acc += (2.0 * inter + smooth) / (sp + st + smooth);
  }
  return 1.0 - acc / channels;
}

inline double bce(const std::vector<double>& p, const std::vector<double>& t, double eps) {
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(p[i], eps, 1.0 - eps);
    acc += -(t[i] * std::log(q) + (1.0 - t[i]) * std::log(1.0 - q));
  }
  return acc / static_cast<double>(p.size());
}

inline double cross_entropy(double l0, double l1, int label) {
  const double m = std::max(l0, l1);
  const double lse = m + std::log(std::exp(l0 - m) + std::exp(l1 - m));
  return lse - (label == 0 ? l0 : l1);
}

}  // namespace oracle

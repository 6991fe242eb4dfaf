#pragma once

// Curve-skeleton extraction by directional thinning: border voxels are peeled
// one face direction at a time, deleting only simple points that are not curve
// end points, and every deletion is re-validated sequentially. Simplicity uses
// the 26/6 topological numbers, so foreground components, cavities and
// tunnels are all preserved.

#include <array>
#include <cstdint>
#include <vector>

#include "dualseg/error.hpp"
#include "dualseg/grid.hpp"
#include "dualseg/morphology.hpp"

namespace dualseg {

namespace detail {

constexpr int nb_index(int dz, int dy, int dx) { return (dz + 1) * 9 + (dy + 1) * 3 + (dx + 1); }
inline constexpr int kCenter = 13;

struct NeighborhoodTables {
  std::array<std::uint32_t, 27> adj26{};
  std::array<std::uint32_t, 27> adj6{};
  std::uint32_t n26 = 0;
  std::uint32_t n18 = 0;
  std::uint32_t n6 = 0;

  NeighborhoodTables() {
    for (int a = 0; a < 27; ++a) {
      const int az = a / 9 - 1, ay = (a / 3) % 3 - 1, ax = a % 3 - 1;
      const int nz = (az != 0) + (ay != 0) + (ax != 0);
      if (nz >= 1) n26 |= 1u << a;
      if (nz >= 1 && nz <= 2) n18 |= 1u << a;
      if (nz == 1) n6 |= 1u << a;
      for (int b = 0; b < 27; ++b) {
        if (a == b) continue;
        const int dz = b / 9 - 1 - az, dy = (b / 3) % 3 - 1 - ay, dx = b % 3 - 1 - ax;
        if (std::abs(dz) > 1 || std::abs(dy) > 1 || std::abs(dx) > 1) continue;
        adj26[a] |= 1u << b;
        if (std::abs(dz) + std::abs(dy) + std::abs(dx) == 1) adj6[a] |= 1u << b;
      }
    }
  }
};

inline const NeighborhoodTables& tables() {
  static const NeighborhoodTables t;
  return t;
}

inline std::uint32_t grow_component(std::uint32_t seed, std::uint32_t set,
                                    const std::array<std::uint32_t, 27>& adj) {
  std::uint32_t comp = seed;
  while (true) {
    std::uint32_t grown = comp;
    for (std::uint32_t bits = comp; bits; bits &= bits - 1) grown |= adj[__builtin_ctz(bits)];
    grown &= set;
    if (grown == comp) return comp;
    comp = grown;
  }
}

}  // namespace detail

/// True iff deleting the centre of a 3x3x3 neighbourhood (bit i set = voxel i
/// foreground, index (dz+1)*9+(dy+1)*3+(dx+1)) preserves topology under the
/// 26/6 connectivity pair.
inline bool is_simple_point(std::uint32_t nbhd) {
  const auto& t = detail::tables();
  // T26: exactly one 26-component of foreground in N26*.
  const std::uint32_t fg = nbhd & t.n26;
  if (!fg) return false;
  const std::uint32_t first = detail::grow_component(fg & (~fg + 1), fg, t.adj26);
  if (first != fg) return false;
  // T6-bar: exactly one 6-component of background in N18* that touches a face neighbour.
  const std::uint32_t bg = ~nbhd & t.n18;
  int touching = 0;
  for (std::uint32_t rem = bg; rem;) {
    const std::uint32_t comp = detail::grow_component(rem & (~rem + 1), bg, t.adj6);
    rem &= ~comp;
    if (comp & t.n6) {
      if (++touching > 1) return false;
    }
  }
  return touching == 1;
}

/// Topology-preserving thinning to a 1-voxel-wide curve skeleton.
inline Mask skeletonize3d(const Mask& mask) {
  if (count(mask) == 0) throw Error(Errc::empty_input, "skeletonize3d on empty mask");
  const auto s = mask.shape();
  // One voxel of background padding so every neighbourhood read is in range.
  const Shape3 ps{s.d + 2, s.h + 2, s.w + 2};
  Mask work(ps, 0);
  for (std::size_t z = 0; z < s.d; ++z)
    for (std::size_t y = 0; y < s.h; ++y)
      for (std::size_t x = 0; x < s.w; ++x) work(z + 1, y + 1, x + 1) = mask(z, y, x) ? 1 : 0;

  const long sz = static_cast<long>(ps.h * ps.w), sy = static_cast<long>(ps.w);
  std::array<long, 27> rel{};
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) rel[detail::nb_index(dz, dy, dx)] = dz * sz + dy * sy + dx;

  auto neighborhood = [&](std::size_t i) {
    std::uint32_t bits = 0;
    for (int k = 0; k < 27; ++k) {
      if (work[static_cast<std::size_t>(static_cast<long>(i) + rel[k])]) bits |= 1u << k;
    }
    return bits;
  };
  auto deletable = [&](std::size_t i) {
    const std::uint32_t nb = neighborhood(i);
    const int neighbors = __builtin_popcount(nb & detail::tables().n26);
    return neighbors > 1 && is_simple_point(nb);
  };

  const std::array<int, 6> directions{
      detail::nb_index(0, -1, 0), detail::nb_index(0, 1, 0), detail::nb_index(0, 0, 1),
      detail::nb_index(0, 0, -1), detail::nb_index(1, 0, 0), detail::nb_index(-1, 0, 0)};

  std::vector<std::size_t> candidates;
  bool changed = true;
  while (changed) {
    changed = false;
    for (int dir : directions) {
      candidates.clear();
      for (std::size_t z = 1; z + 1 < ps.d; ++z)
        for (std::size_t y = 1; y + 1 < ps.h; ++y)
          for (std::size_t x = 1; x + 1 < ps.w; ++x) {
            const std::size_t i = work.index(z, y, x);
            if (!work[i]) continue;
            if (work[static_cast<std::size_t>(static_cast<long>(i) + rel[dir])]) continue;
            if (deletable(i)) candidates.push_back(i);
          }
      for (std::size_t i : candidates) {
        if (!deletable(i)) continue;
        work[i] = 0;
        changed = true;
      }
    }
  }

  Mask out(s);
  for (std::size_t z = 0; z < s.d; ++z)
    for (std::size_t y = 0; y < s.h; ++y)
      for (std::size_t x = 0; x < s.w; ++x) out(z, y, x) = work(z + 1, y + 1, x + 1);
  return out;
}

/// Dilated skeleton restricted to the label, used as the positive-sampling region.
inline Mask centerline_mask(const Mask& label, int dilation_radius = 2) {
  if (dilation_radius < 1) throw Error(Errc::invalid_parameter, "centerline dilation radius must be >= 1");
  const Mask skeleton = skeletonize3d(label);
  return mask_and(dilate(skeleton, StructuringElement::ball(dilation_radius)), label);
}

}  // namespace dualseg

#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <limits>
#include <vector>

#include "dualseg/error.hpp"
#include "dualseg/grid.hpp"

namespace dualseg {

struct Offset3 {
  int dz, dy, dx;
  friend bool operator==(const Offset3&, const Offset3&) = default;
};

struct StructuringElement {
  enum class Kind { ball, cube };
  Kind kind = Kind::ball;
  int radius = 1;

  static StructuringElement ball(int r) { return {Kind::ball, r}; }
  static StructuringElement cube(int r) { return {Kind::cube, r}; }

  void validate() const {
    if (radius < 1) throw Error(Errc::invalid_parameter, "structuring element radius must be >= 1");
  }

  bool covers(int dz, int dy, int dx) const noexcept {
    if (kind == Kind::cube) return std::max({std::abs(dz), std::abs(dy), std::abs(dx)}) <= radius;
    return dz * dz + dy * dy + dx * dx <= radius * radius;
  }

  std::vector<Offset3> offsets() const {
    validate();
    std::vector<Offset3> out;
    for (int dz = -radius; dz <= radius; ++dz)
      for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx)
          if (covers(dz, dy, dx)) out.push_back({dz, dy, dx});
    return out;
  }
};

namespace detail {

inline constexpr double kEdtInf = 1e12;
inline constexpr double kEdtSentinel = 1e30;

// Lower envelope of parabolas (Felzenszwalb & Huttenlocher) over one line.
inline void edt_1d(const double* f, double* d, std::size_t n, std::vector<int>& v, std::vector<double>& z) {
  v.resize(n);
  z.resize(n + 1);
  auto intersect = [&](int q, int p) {
    return ((f[q] + static_cast<double>(q) * q) - (f[p] + static_cast<double>(p) * p)) / (2.0 * (q - p));
  };
  int k = 0;
  v[0] = 0;
  z[0] = -kEdtSentinel;
  z[1] = kEdtSentinel;
  for (int q = 1; q < static_cast<int>(n); ++q) {
    double s = intersect(q, v[k]);
    while (s <= z[k]) {
      --k;
      s = intersect(q, v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kEdtSentinel;
  }
  k = 0;
  for (int q = 0; q < static_cast<int>(n); ++q) {
    while (z[k + 1] < q) ++k;
    const double diff = q - v[k];
    d[q] = diff * diff + f[v[k]];
  }
}

}  // namespace detail

/// Exact squared Euclidean distance (in voxels) from every voxel to the
/// nearest foreground voxel; kEdtInf-ish values when the mask is empty.
inline Grid3<double> squared_distance_to(const Mask& mask) {
  const auto s = mask.shape();
  Grid3<double> dist(s);
  for (std::size_t i = 0; i < mask.size(); ++i) dist[i] = mask[i] ? 0.0 : detail::kEdtInf;
  std::vector<int> v;
  std::vector<double> z, line, out;
  auto pass = [&](std::size_t n, auto&& at) {
    line.resize(n);
    out.resize(n);
    for (std::size_t i = 0; i < n; ++i) line[i] = at(i);
    detail::edt_1d(line.data(), out.data(), n, v, z);
    for (std::size_t i = 0; i < n; ++i) at(i) = std::min(out[i], detail::kEdtInf);
  };
  for (std::size_t zz = 0; zz < s.d; ++zz)
    for (std::size_t y = 0; y < s.h; ++y) pass(s.w, [&](std::size_t i) -> double& { return dist(zz, y, i); });
  for (std::size_t zz = 0; zz < s.d; ++zz)
    for (std::size_t x = 0; x < s.w; ++x) pass(s.h, [&](std::size_t i) -> double& { return dist(zz, i, x); });
  for (std::size_t y = 0; y < s.h; ++y)
    for (std::size_t x = 0; x < s.w; ++x) pass(s.d, [&](std::size_t i) -> double& { return dist(i, y, x); });
  return dist;
}

namespace detail {

// out(i) = 1 iff some in(j) with |i - j| <= r is set, along one axis.
template <typename At>
void any_within(std::size_t n, int r, At&& at, std::vector<std::uint32_t>& prefix) {
  prefix.assign(n + 1, 0);
  for (std::size_t i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + (at(i) ? 1u : 0u);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t lo = i >= static_cast<std::size_t>(r) ? i - r : 0;
    const std::size_t hi = std::min(n, i + r + 1);
    at(i) = prefix[hi] - prefix[lo] > 0 ? 1 : 0;
  }
}

}  // namespace detail

/// Binary dilation; voxels outside the grid count as background.
inline Mask dilate(const Mask& mask, const StructuringElement& elem) {
  elem.validate();
  const auto s = mask.shape();
  if (elem.kind == StructuringElement::Kind::ball) {
    const auto dist = squared_distance_to(mask);
    const double r2 = static_cast<double>(elem.radius) * elem.radius;
    Mask out(s);
    for (std::size_t i = 0; i < mask.size(); ++i) out[i] = dist[i] <= r2 ? 1 : 0;
    return out;
  }
  Mask out = mask;
  std::vector<std::uint32_t> prefix;
  for (std::size_t z = 0; z < s.d; ++z)
    for (std::size_t y = 0; y < s.h; ++y)
      detail::any_within(s.w, elem.radius, [&](std::size_t i) -> std::uint8_t& { return out(z, y, i); }, prefix);
  for (std::size_t z = 0; z < s.d; ++z)
    for (std::size_t x = 0; x < s.w; ++x)
      detail::any_within(s.h, elem.radius, [&](std::size_t i) -> std::uint8_t& { return out(z, i, x); }, prefix);
  for (std::size_t y = 0; y < s.h; ++y)
    for (std::size_t x = 0; x < s.w; ++x)
      detail::any_within(s.d, elem.radius, [&](std::size_t i) -> std::uint8_t& { return out(i, y, x); }, prefix);
  return out;
}

/// Background shell around the organ: dilate(y, ball(r)) minus y.
inline Mask ring_region(const Mask& label, int r) {
  if (r < 1) throw Error(Errc::invalid_parameter, "ring radius must be >= 1");
  Mask out = dilate(label, StructuringElement::ball(r));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (out[i] && !label[i]) ? 1 : 0;
  return out;
}

inline Mask mask_and(const Mask& a, const Mask& b) {
  require_same_shape(a, b, "mask_and");
  Mask out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = (a[i] && b[i]) ? 1 : 0;
  return out;
}

/// Tight box around the foreground grown by `margin` voxels and clipped to the grid.
inline BBox bbox_of(const Mask& mask, int margin = 0) {
  if (margin < 0) throw Error(Errc::invalid_parameter, "bbox margin must be >= 0");
  const auto s = mask.shape();
  std::array<std::size_t, 3> lo{s.d, s.h, s.w}, hi{0, 0, 0};
  bool any = false;
  for (std::size_t z = 0; z < s.d; ++z)
    for (std::size_t y = 0; y < s.h; ++y)
      for (std::size_t x = 0; x < s.w; ++x) {
        if (!mask(z, y, x)) continue;
        any = true;
        const std::array<std::size_t, 3> c{z, y, x};
        for (int a = 0; a < 3; ++a) {
          lo[a] = std::min(lo[a], c[a]);
          hi[a] = std::max(hi[a], c[a] + 1);
        }
      }
  if (!any) throw Error(Errc::empty_input, "bbox_of on empty mask");
  BBox box;
  const auto m = static_cast<std::size_t>(margin);
  for (int a = 0; a < 3; ++a) {
    box.lo[a] = lo[a] > m ? lo[a] - m : 0;
    box.hi[a] = std::min(s[a], hi[a] + m);
  }
  return box;
}

enum class Connectivity { face6 = 6, edge18 = 18, vertex26 = 26 };

inline bool adjacent(int dz, int dy, int dx, Connectivity c) {
  const int nz = (dz != 0) + (dy != 0) + (dx != 0);
  if (nz == 0) return false;
  switch (c) {
    case Connectivity::face6: return nz == 1;
    case Connectivity::edge18: return nz <= 2;
    case Connectivity::vertex26: return true;
  }
  return false;
}

/// Labels connected foreground components (1..n, background 0); returns n.
inline std::size_t label_components(const Mask& mask, Grid3<std::int32_t>& labels,
                                    Connectivity conn = Connectivity::vertex26) {
  const auto s = mask.shape();
  labels = Grid3<std::int32_t>(s, 0);
  std::vector<Offset3> nbrs;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx)
        if (adjacent(dz, dy, dx, conn)) nbrs.push_back({dz, dy, dx});
  std::int32_t next = 0;
  std::vector<std::array<long, 3>> stack;
  for (std::size_t z = 0; z < s.d; ++z)
    for (std::size_t y = 0; y < s.h; ++y)
      for (std::size_t x = 0; x < s.w; ++x) {
        if (!mask(z, y, x) || labels(z, y, x)) continue;
        ++next;
        labels(z, y, x) = next;
        stack.push_back({static_cast<long>(z), static_cast<long>(y), static_cast<long>(x)});
        while (!stack.empty()) {
          const auto c = stack.back();
          stack.pop_back();
          for (const auto& o : nbrs) {
            const long nz = c[0] + o.dz, ny = c[1] + o.dy, nx = c[2] + o.dx;
            if (!mask.contains(nz, ny, nx)) continue;
            auto& l = labels(nz, ny, nx);
            if (l || !mask(nz, ny, nx)) continue;
            l = next;
            stack.push_back({nz, ny, nx});
          }
        }
      }
  return static_cast<std::size_t>(next);
}

inline std::size_t count_components(const Mask& mask, Connectivity conn = Connectivity::vertex26) {
  Grid3<std::int32_t> labels;
  return label_components(mask, labels, conn);
}

}  // namespace dualseg

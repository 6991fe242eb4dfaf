#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>

#include "dualseg/error.hpp"
#include "dualseg/grid.hpp"

namespace dualseg {

inline constexpr double kDefaultWindowLo = -100.0;
inline constexpr double kDefaultWindowHi = 240.0;

/// Truncates to [lo, hi] and rescales to [0, 1].
inline Volume window_normalize(const Volume& vol, double lo = kDefaultWindowLo, double hi = kDefaultWindowHi) {
  if (!(lo < hi)) throw Error(Errc::invalid_window, "window lo must be < hi");
  Volume out{Grid3<float>(vol.shape()), vol.spacing, IntensityDomain::normalized_unit};
  const double scale = 1.0 / (hi - lo);
  auto src = vol.voxels.values();
  auto dst = out.voxels.values();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const double v = (static_cast<double>(src[i]) - lo) * scale;
    dst[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  return out;
}

enum class Interp { trilinear, nearest };

namespace detail {

struct AxisMap {
  std::size_t out_size = 0;
  double step = 1.0;  // input-voxel units per output voxel
  std::size_t in_size = 0;
};

inline AxisMap make_axis(std::size_t n_in, float s_in, float s_out) {
  AxisMap m;
  m.in_size = n_in;
  m.step = static_cast<double>(s_out) / static_cast<double>(s_in);
  const double n = std::round(static_cast<double>(n_in) / m.step);
  m.out_size = std::max<std::size_t>(1, static_cast<std::size_t>(n));
  return m;
}

}  // namespace detail

/// Resamples onto a grid with `target` spacing. Voxel i of either grid sits at
/// physical position i * spacing (first voxel centres coincide); samples past
/// the last input voxel replicate the edge.
template <typename T>
Grid3<T> resample_grid(const Grid3<T>& g, const Spacing& source, const Spacing& target, Interp mode) {
  if (!target.positive() || !source.positive()) {
    throw Error(Errc::invalid_spacing, "resample spacing must be strictly positive");
  }
  const auto& s = g.shape();
  const detail::AxisMap az = detail::make_axis(s.d, source.z, target.z);
  const detail::AxisMap ay = detail::make_axis(s.h, source.y, target.y);
  const detail::AxisMap ax = detail::make_axis(s.w, source.x, target.x);
  Grid3<T> out(Shape3{az.out_size, ay.out_size, ax.out_size});

  struct Tap {
    std::size_t i0, i1;
    double frac;
  };
  auto taps = [](const detail::AxisMap& a) {
    std::vector<Tap> t(a.out_size);
    const double last = static_cast<double>(a.in_size - 1);
    for (std::size_t i = 0; i < a.out_size; ++i) {
      const double p = std::min(static_cast<double>(i) * a.step, last);
      const auto i0 = static_cast<std::size_t>(std::floor(p));
      const std::size_t i1 = std::min(i0 + 1, a.in_size - 1);
      t[i] = {i0, i1, p - static_cast<double>(i0)};
    }
    return t;
  };
  const auto tz = taps(az), ty = taps(ay), tx = taps(ax);

  for (std::size_t z = 0; z < az.out_size; ++z) {
    for (std::size_t y = 0; y < ay.out_size; ++y) {
      for (std::size_t x = 0; x < ax.out_size; ++x) {
        if (mode == Interp::nearest) {
          const std::size_t iz = tz[z].frac < 0.5 ? tz[z].i0 : tz[z].i1;
          const std::size_t iy = ty[y].frac < 0.5 ? ty[y].i0 : ty[y].i1;
          const std::size_t ix = tx[x].frac < 0.5 ? tx[x].i0 : tx[x].i1;
          out(z, y, x) = g(iz, iy, ix);
          continue;
        }
        const double fz = tz[z].frac, fy = ty[y].frac, fx = tx[x].frac;
        double acc = 0.0;
        for (int dz = 0; dz < 2; ++dz) {
          const double wz = dz ? fz : 1.0 - fz;
          if (wz == 0.0) continue;
          const std::size_t iz = dz ? tz[z].i1 : tz[z].i0;
          for (int dy = 0; dy < 2; ++dy) {
            const double wy = dy ? fy : 1.0 - fy;
            if (wy == 0.0) continue;
            const std::size_t iy = dy ? ty[y].i1 : ty[y].i0;
            for (int dx = 0; dx < 2; ++dx) {
              const double wx = dx ? fx : 1.0 - fx;
              if (wx == 0.0) continue;
              const std::size_t ix = dx ? tx[x].i1 : tx[x].i0;
              acc += wz * wy * wx * static_cast<double>(g(iz, iy, ix));
            }
          }
        }
        out(z, y, x) = static_cast<T>(acc);
      }
    }
  }
  return out;
}

inline Volume resample(const Volume& vol, const Spacing& target, Interp mode = Interp::trilinear) {
  return Volume{resample_grid(vol.voxels, vol.spacing, target, mode), target, vol.domain};
}

/// Masks always resample with nearest-neighbour so they stay binary.
inline Mask resample(const Mask& mask, const Spacing& source, const Spacing& target) {
  return resample_grid(mask, source, target, Interp::nearest);
}

/// Dice similarity coefficient; two empty masks agree perfectly (1.0).
inline double dsc(const Mask& pred, const Mask& gt) {
  require_same_shape(pred, gt, "dsc");
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    a += p;
    b += g;
    both += p && g;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

/// Binarizes a probability grid at `threshold` (inclusive).
inline Mask binarize(const Grid3<float>& prob, float threshold = 0.5f) {
  Mask m(prob.shape());
  for (std::size_t i = 0; i < prob.size(); ++i) m[i] = prob[i] >= threshold ? 1 : 0;
  return m;
}

}  // namespace dualseg

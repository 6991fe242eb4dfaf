#pragma once

// Training-time augmentation: in-plane rotation, axis flips and additive noise.
// Draws are returned so the same geometry can be replayed on every channel
// and on the label.

#include <cmath>
#include <numbers>
#include <random>

#include "dualseg/config.hpp"
#include "dualseg/grid.hpp"
#include "dualseg/rng.hpp"
#include "dualseg/uncertainty.hpp"
#include "dualseg/volume.hpp"

namespace dualseg {

struct AugmentDraw {
  double angle_deg = 0.0;
  FlipCode flip{};
  double noise_sigma = 0.0;
};

inline AugmentDraw draw_augment(const AugmentConfig& cfg, Rng& rng) {
  AugmentDraw d;
  if (cfg.rotation_deg > 0.0) d.angle_deg = std::uniform_real_distribution<double>(-cfg.rotation_deg, cfg.rotation_deg)(rng);
  if (cfg.flip) {
    std::bernoulli_distribution coin(0.5);
    d.flip = FlipCode{coin(rng), coin(rng), coin(rng)};
  }
  if (cfg.noise_max > 0.0) d.noise_sigma = std::uniform_real_distribution<double>(0.0, cfg.noise_max)(rng);
  return d;
}

/// Rotates every axial slice by `angle_deg` about the slice centre. Output
/// voxel (y, x) samples the input at the inversely rotated position; samples
/// outside the slice take the nearest edge value.
template <typename T>
Grid3<T> rotate_hw(const Grid3<T>& g, double angle_deg, Interp mode) {
  if (angle_deg == 0.0) return g;
  const Shape3 s = g.shape();
  const double a = angle_deg * std::numbers::pi / 180.0;
  const double c = std::cos(a), sn = std::sin(a);
  const double cy = (static_cast<double>(s.h) - 1.0) / 2.0, cx = (static_cast<double>(s.w) - 1.0) / 2.0;
  const auto clamp_h = [&](long v) { return static_cast<std::size_t>(std::clamp<long>(v, 0, long(s.h) - 1)); };
  const auto clamp_w = [&](long v) { return static_cast<std::size_t>(std::clamp<long>(v, 0, long(s.w) - 1)); };
  Grid3<T> out(s);
  for (std::size_t y = 0; y < s.h; ++y) {
    for (std::size_t x = 0; x < s.w; ++x) {
      const double dy = double(y) - cy, dx = double(x) - cx;
      const double sy = c * dy + sn * dx + cy;
      const double sx = -sn * dy + c * dx + cx;
      if (mode == Interp::nearest) {
        const std::size_t ny = clamp_h(std::lround(sy)), nx = clamp_w(std::lround(sx));
        for (std::size_t z = 0; z < s.d; ++z) out(z, y, x) = g(z, ny, nx);
        continue;
      }
      const double fy = std::floor(sy), fx = std::floor(sx);
      const double wy = sy - fy, wx = sx - fx;
      const std::size_t y0 = clamp_h(long(fy)), y1 = clamp_h(long(fy) + 1);
      const std::size_t x0 = clamp_w(long(fx)), x1 = clamp_w(long(fx) + 1);
      for (std::size_t z = 0; z < s.d; ++z) {
        const double v = (1 - wy) * ((1 - wx) * g(z, y0, x0) + wx * g(z, y0, x1)) +
                         wy * ((1 - wx) * g(z, y1, x0) + wx * g(z, y1, x1));
        out(z, y, x) = static_cast<T>(v);
      }
    }
  }
  return out;
}

/// Rotation followed by the drawn flips.
template <typename T>
Grid3<T> apply_geometry(const Grid3<T>& g, const AugmentDraw& d, Interp mode) {
  return flip(rotate_hw(g, d.angle_deg, mode), d.flip);
}

/// Gaussian noise on normalized intensities, clamped back to [0, 1].
inline void add_noise(Grid3<float>& g, double sigma, Rng& rng) {
  if (sigma <= 0.0) return;
  std::normal_distribution<float> n(0.0f, static_cast<float>(sigma));
  for (float& v : g) v = std::clamp(v + n(rng), 0.0f, 1.0f);
}

struct AugmentedPair {
  Grid3<float> image;
  Mask label;
  AugmentDraw draw;
};

/// Draws one augmentation and applies it: the image gets geometry and noise,
/// the label only geometry.
inline AugmentedPair augment_pair(const Grid3<float>& image, const Mask& label, const AugmentConfig& cfg, Rng& rng) {
  require_same_shape(image, label, "augment");
  AugmentedPair out;
  out.draw = draw_augment(cfg, rng);
  out.image = apply_geometry(image, out.draw, Interp::trilinear);
  out.label = apply_geometry(label, out.draw, Interp::nearest);
  add_noise(out.image, out.draw.noise_sigma, rng);
  return out;
}

}  // namespace dualseg

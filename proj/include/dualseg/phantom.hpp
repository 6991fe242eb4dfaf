#pragma once

// Procedural abdominal-style phantoms: a curved tapering tube (the organ)
// embedded in textured soft tissue with nearby distractor blobs and a vessel of
// partially overlapping intensity. A SourceStyle then applies an acquisition
// look (contrast, calibration offset, blur, noise, lesions) that never touches
// the label.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "dualseg/error.hpp"
#include "dualseg/grid.hpp"
#include "dualseg/rng.hpp"
#include "dualseg/volume.hpp"

namespace dualseg {

struct SourceStyle {
  std::string name = "srcA";
  double noise_sigma = 8.0;     // HU
  double contrast_gain = 1.0;
  double contrast_bias = 0.0;   // HU
  double blur_sigma = 0.0;      // voxels
  std::array<double, 2> intensity_window_jitter{-5.0, 5.0};  // per-case HU offset range
  double tumor_rate = 0.0;
  double organ_hu = 100.0;  // parenchyma mean before the gain/bias transform

  void validate() const {
    if (noise_sigma < 0.0 || blur_sigma < 0.0) throw Error(Errc::invalid_spec, "style sigmas must be >= 0");
    if (!(tumor_rate >= 0.0 && tumor_rate <= 1.0)) throw Error(Errc::invalid_spec, "tumor_rate must be in [0,1]");
    if (intensity_window_jitter[0] > intensity_window_jitter[1]) {
      throw Error(Errc::invalid_spec, "jitter range is inverted");
    }
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SourceStyle, name, noise_sigma, contrast_gain, contrast_bias,
                                                blur_sigma, intensity_window_jitter, tumor_rate, organ_hu)

/// The three default sources: srcA is the clean reference, srcB a brighter,
/// noisier, blurrier scanner, srcC a darker protocol with frequent lesions.
inline SourceStyle default_style(const std::string& name) {
  if (name == "srcA") return {"srcA", 8.0, 1.0, 0.0, 0.0, {-5.0, 5.0}, 0.0};
  if (name == "srcB") return {"srcB", 14.0, 1.5, 40.0, 0.9, {-10.0, 10.0}, 0.2, 130.0};
  if (name == "srcC") return {"srcC", 11.0, 0.75, -30.0, 0.4, {-10.0, 10.0}, 0.7, 65.0};
  throw Error(Errc::invalid_spec, "unknown default style '" + name + "'");
}

struct Point3 {
  double z = 0.0, y = 0.0, x = 0.0;
};

inline void to_json(nlohmann::json& j, const Point3& p) { j = nlohmann::json::array({p.z, p.y, p.x}); }
inline void from_json(const nlohmann::json& j, Point3& p) {
  p = {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()};
}

struct PhantomSpec {
  Shape3 grid{64, 64, 64};
  Spacing spacing{1.5f, 0.8f, 0.8f};
  // Cubic Bezier control points, head first.
  std::array<Point3, 4> control{{{32, 34, 20}, {30, 27, 28}, {34, 31, 37}, {32, 26, 44}}};
  std::array<double, 3> radius_profile{6.0, 4.0, 2.0};  // head, body, tail
  double shape_jitter = 3.0;  // per-case control-point perturbation (voxels)
  int distractor_count = 4;
  std::uint64_t seed = 0;
};

struct PhantomCase {
  Volume raw;
  Volume normalized;
  Mask label;
  int lesions = 0;
};

namespace detail {

inline void gaussian_blur_axis(Grid3<float>& g, double sigma, int axis) {
  if (sigma <= 0.0) return;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) sum += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= sum;
  const auto s = g.shape();
  const std::size_t n = s[axis];
  std::vector<float> line(n);
  const std::size_t outer1 = axis == 0 ? s.h : s.d, outer2 = axis == 2 ? s.h : s.w;
  for (std::size_t a = 0; a < outer1; ++a) {
    for (std::size_t b = 0; b < outer2; ++b) {
      auto at = [&](std::size_t i) -> float& {
        if (axis == 0) return g(i, a, b);
        if (axis == 1) return g(a, i, b);
        return g(a, b, i);
      };
      for (std::size_t i = 0; i < n; ++i) line[i] = at(i);
      for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (int o = -radius; o <= radius; ++o) {
          const long j = std::clamp(static_cast<long>(i) + o, 0L, static_cast<long>(n) - 1);
          acc += k[o + radius] * line[j];
        }
        at(i) = static_cast<float>(acc);
      }
    }
  }
}

}  // namespace detail

inline void gaussian_blur(Grid3<float>& g, double sigma) {
  for (int axis = 0; axis < 3; ++axis) detail::gaussian_blur_axis(g, sigma, axis);
}

/// Zero-mean, unit-variance smooth random field with correlation length ~sigma.
inline Grid3<float> smooth_noise(const Shape3& s, double sigma, Rng& rng) {
  Grid3<float> g(s);
  std::normal_distribution<float> n(0.0f, 1.0f);
  for (auto& v : g) v = n(rng);
  gaussian_blur(g, sigma);
  double mean = 0.0, sq = 0.0;
  for (float v : g) mean += v;
  mean /= static_cast<double>(g.size());
  for (float v : g) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / static_cast<double>(g.size()));
  for (auto& v : g) v = static_cast<float>((v - mean) / (sd > 0.0 ? sd : 1.0));
  return g;
}

namespace detail {

inline Point3 bezier(const std::array<Point3, 4>& c, double t) {
  const double u = 1.0 - t;
  const double b0 = u * u * u, b1 = 3 * u * u * t, b2 = 3 * u * t * t, b3 = t * t * t;
  return {b0 * c[0].z + b1 * c[1].z + b2 * c[2].z + b3 * c[3].z,
          b0 * c[0].y + b1 * c[1].y + b2 * c[2].y + b3 * c[3].y,
          b0 * c[0].x + b1 * c[1].x + b2 * c[2].x + b3 * c[3].x};
}

inline double radius_at(const std::array<double, 3>& prof, double t) {
  return t < 0.5 ? prof[0] + (prof[1] - prof[0]) * (t / 0.5) : prof[1] + (prof[2] - prof[1]) * ((t - 0.5) / 0.5);
}

template <typename Fn>
void for_ball(const Shape3& s, const Point3& c, double r, Fn&& fn) {
  const long z0 = std::max(0L, static_cast<long>(std::floor(c.z - r))),
             z1 = std::min(static_cast<long>(s.d) - 1, static_cast<long>(std::ceil(c.z + r)));
  const long y0 = std::max(0L, static_cast<long>(std::floor(c.y - r))),
             y1 = std::min(static_cast<long>(s.h) - 1, static_cast<long>(std::ceil(c.y + r)));
  const long x0 = std::max(0L, static_cast<long>(std::floor(c.x - r))),
             x1 = std::min(static_cast<long>(s.w) - 1, static_cast<long>(std::ceil(c.x + r)));
  for (long z = z0; z <= z1; ++z)
    for (long y = y0; y <= y1; ++y)
      for (long x = x0; x <= x1; ++x) {
        const double dz = z - c.z, dy = y - c.y, dx = x - c.x;
        const double d2 = dz * dz + dy * dy + dx * dx;
        if (d2 <= r * r) fn(static_cast<std::size_t>(z), static_cast<std::size_t>(y), static_cast<std::size_t>(x), d2);
      }
}

inline std::uint64_t style_stream(const std::string& name) {
  std::uint64_t h = 1469598103934665603ULL;
  for (char c : name) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
  return h;
}

}  // namespace detail

/// Generates one phantom. Geometry and base texture depend only on
/// `spec.seed`; the style only changes appearance.
inline PhantomCase gen_phantom(const PhantomSpec& spec, const SourceStyle& style) {
  style.validate();
  const Shape3 s = spec.grid;
  if (s.d < 8 || s.h < 8 || s.w < 8) throw Error(Errc::invalid_spec, "phantom grid too small");
  for (double r : spec.radius_profile) {
    if (!(r > 0.0)) throw Error(Errc::invalid_spec, "radius profile must be positive");
  }

  Rng geo(derive_seed(spec.seed, 0, 1));
  Rng tex(derive_seed(spec.seed, 0, 2));
  Rng look(derive_seed(spec.seed, detail::style_stream(style.name), 3));
  Rng lesion_rng(derive_seed(spec.seed, detail::style_stream(style.name), 4));

  // Organ centreline with per-case jitter, scaled to the grid.
  const double scale_z = s.d / 64.0, scale_y = s.h / 64.0, scale_x = s.w / 64.0;
  std::uniform_real_distribution<double> jit(-spec.shape_jitter, spec.shape_jitter);
  std::uniform_real_distribution<double> shift(-spec.shape_jitter, spec.shape_jitter);
  const Point3 offset{shift(geo), shift(geo), shift(geo)};
  std::array<Point3, 4> ctrl;
  for (int i = 0; i < 4; ++i) {
    ctrl[i] = {spec.control[i].z * scale_z + offset.z + jit(geo), spec.control[i].y * scale_y + offset.y + jit(geo),
               spec.control[i].x * scale_x + offset.x + jit(geo)};
  }
  const int samples = 200;
  std::vector<Point3> centre(samples + 1);
  std::vector<double> radius(samples + 1);
  for (int i = 0; i <= samples; ++i) {
    const double t = static_cast<double>(i) / samples;
    centre[i] = detail::bezier(ctrl, t);
    radius[i] = detail::radius_at(spec.radius_profile, t);
    const auto& c = centre[i];
    const double r = radius[i];
    if (c.z - r < 1.0 || c.y - r < 1.0 || c.x - r < 1.0 || c.z + r > s.d - 2.0 || c.y + r > s.h - 2.0 ||
        c.x + r > s.w - 2.0) {
      throw Error(Errc::invalid_spec, "organ leaves the grid interior");
    }
  }

  PhantomCase out;
  out.label = Mask(s);
  for (int i = 0; i <= samples; ++i) {
    detail::for_ball(s, centre[i], radius[i], [&](auto z, auto y, auto x, double) { out.label(z, y, x) = 1; });
  }

  // Background: fat / soft-tissue mixture with smooth texture.
  Grid3<float> raw(s);
  const Grid3<float> tissue = smooth_noise(s, 4.0, tex);
  const Grid3<float> fine = smooth_noise(s, 1.0, tex);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    raw[i] = static_cast<float>(-20.0 + 60.0 * std::tanh(1.5 * tissue[i]) + 8.0 * fine[i]);
  }

  // Vessel running alongside the organ.
  std::uniform_real_distribution<double> side(0.0, 1.0);
  const double vessel_dy = (side(geo) < 0.5 ? -1.0 : 1.0) * 9.0, vessel_dz = jit(geo);
  for (int i = 0; i <= samples; i += 2) {
    const Point3 c{centre[i].z + vessel_dz, centre[i].y + vessel_dy, centre[i].x};
    detail::for_ball(s, c, 2.0, [&](auto z, auto y, auto x, double) { raw(z, y, x) = 165.0f; });
  }

  // Distractor blobs near the organ at partially overlapping intensities.
  std::uniform_int_distribution<int> pick(0, samples);
  std::uniform_real_distribution<double> dir(-1.0, 1.0), blob_r(2.0, 4.0), blob_hu(125.0, 160.0);
  for (int b = 0; b < spec.distractor_count; ++b) {
    const int at = pick(geo);
    double dz = dir(geo), dy = dir(geo), dx = dir(geo);
    const double norm = std::max(1e-6, std::sqrt(dz * dz + dy * dy + dx * dx));
    const double reach = radius[at] + 3.0 + 4.0 * side(geo);
    const Point3 c{centre[at].z + reach * dz / norm, centre[at].y + reach * dy / norm,
                   centre[at].x + reach * dx / norm};
    const double r = blob_r(geo), hu = blob_hu(geo);
    detail::for_ball(s, c, r, [&](auto z, auto y, auto x, double) { raw(z, y, x) = static_cast<float>(hu); });
  }

  // Organ parenchyma with its own texture; the label wins over distractors.
  const Grid3<float> organ_tex = smooth_noise(s, 1.5, tex);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (out.label[i]) raw[i] = static_cast<float>(style.organ_hu + 10.0 * organ_tex[i]);
  }

  // Acquisition look.
  std::bernoulli_distribution has_tumor(style.tumor_rate);
  if (has_tumor(lesion_rng)) {
    std::uniform_int_distribution<int> nles(1, 3);
    out.lesions = nles(lesion_rng);
    std::uniform_real_distribution<double> frac(0.05, 0.75), lr(1.5, 3.0);
    for (int l = 0; l < out.lesions; ++l) {
      const int at = static_cast<int>(frac(lesion_rng) * samples);
      const double r = std::min(lr(lesion_rng), radius[at] * 0.9);
      detail::for_ball(s, centre[at], r, [&](auto z, auto y, auto x, double) {
        if (out.label(z, y, x)) raw(z, y, x) += 70.0f;
      });
    }
  }
  std::uniform_real_distribution<double> jitter(style.intensity_window_jitter[0], style.intensity_window_jitter[1]);
  const double offset_hu = jitter(look);
  for (auto& v : raw) v = static_cast<float>(style.contrast_gain * v + style.contrast_bias + offset_hu);
  gaussian_blur(raw, style.blur_sigma);
  if (style.noise_sigma > 0.0) {
    std::normal_distribution<float> noise(0.0f, static_cast<float>(style.noise_sigma));
    for (auto& v : raw) v += noise(look);
  }

  out.raw = Volume{std::move(raw), spec.spacing, IntensityDomain::raw_hu};
  out.normalized = window_normalize(out.raw);
  return out;
}

}  // namespace dualseg

#pragma once

#include <array>
#include <atomic>
#include <cmath>
#include <span>
#include <vector>

#include "dualseg/error.hpp"
#include "dualseg/grid.hpp"
#include "dualseg/rng.hpp"
#include "dualseg/volume.hpp"

namespace dualseg {

/// One of the eight axis-flip combinations; every code is its own inverse.
struct FlipCode {
  bool z = false;
  bool y = false;
  bool x = false;

  bool identity() const noexcept { return !z && !y && !x; }
  friend constexpr bool operator==(const FlipCode&, const FlipCode&) = default;
};

inline constexpr std::size_t kMaxViews = 8;

/// All eight codes: identity, single-axis, double-axis, then the triple flip.
/// A K-view ensemble uses the first K entries.
inline constexpr std::array<FlipCode, kMaxViews> kFlipCodes{{
    {false, false, false},
    {true, false, false},
    {false, true, false},
    {false, false, true},
    {true, true, false},
    {true, false, true},
    {false, true, true},
    {true, true, true},
}};

inline std::span<const FlipCode> flip_codes(std::size_t k) {
  if (k < 1 || k > kMaxViews) throw Error(Errc::invalid_parameter, "ensemble size K must be in [1, 8]");
  return std::span<const FlipCode>(kFlipCodes).first(k);
}

template <typename T>
Grid3<T> flip(const Grid3<T>& g, FlipCode code) {
  if (code.identity()) return g;
  const auto s = g.shape();
  Grid3<T> out(s);
  for (std::size_t z = 0; z < s.d; ++z) {
    const std::size_t sz = code.z ? s.d - 1 - z : z;
    for (std::size_t y = 0; y < s.h; ++y) {
      const std::size_t sy = code.y ? s.h - 1 - y : y;
      for (std::size_t x = 0; x < s.w; ++x) out(z, y, x) = g(sz, sy, code.x ? s.w - 1 - x : x);
    }
  }
  return out;
}

struct FlipView {
  Volume volume;
  FlipCode code;
};

inline std::vector<FlipView> flip_views(const Volume& x) {
  std::vector<FlipView> views;
  views.reserve(kMaxViews);
  for (const auto& c : kFlipCodes) views.push_back({Volume{flip(x.voxels, c), x.spacing, x.domain}, c});
  return views;
}

/// Probability map, uncertainty map and perturbed image of one case.
struct UncertaintyTriple {
  Grid3<float> prob_map;
  Grid3<float> unc_map;
  Grid3<float> perturbed;
};

struct EnsembleMaps {
  Grid3<float> mean;
  Grid3<float> stddev;
};

/// Voxelwise mean and population standard deviation (divide by K) of
/// predictions that are already in canonical orientation.
inline EnsembleMaps ensemble_reduce(std::span<const Grid3<float>> preds) {
  if (preds.empty()) throw Error(Errc::invalid_parameter, "ensemble needs at least one prediction");
  const auto s = preds.front().shape();
  for (const auto& p : preds) {
    if (p.shape() != s) throw Error(Errc::shape_mismatch, "ensemble predictions differ in shape");
  }
  EnsembleMaps out{Grid3<float>(s), Grid3<float>(s)};
  const double k = static_cast<double>(preds.size());
  for (std::size_t i = 0; i < out.mean.size(); ++i) {
    double sum = 0.0;
    for (const auto& p : preds) sum += p[i];
    const double mean = sum / k;
    double var = 0.0;
    for (const auto& p : preds) {
      const double d = p[i] - mean;
      var += d * d;
    }
    out.mean[i] = static_cast<float>(mean);
    out.stddev[i] = static_cast<float>(std::sqrt(var / k));
  }
  return out;
}

/// Uncertainty mask: 1 where unc >= t, compared at the map's (f32) precision.
inline Mask threshold_mask(const Grid3<float>& unc, double t) {
  if (!(t > 0.0)) throw Error(Errc::invalid_parameter, "uncertainty threshold must be > 0");
  const float tf = static_cast<float>(t);
  Mask m(unc.shape());
  for (std::size_t i = 0; i < unc.size(); ++i) m[i] = unc[i] >= tf ? 1 : 0;
  return m;
}

/// Random truncation-window law used to corrupt appearance.
struct CorruptionLaw {
  double lo_min = -200.0;
  double lo_max = 40.0;
  double hi_min = 120.0;
  double hi_max = 400.0;
  double min_width = 80.0;
};

struct CorruptedImage {
  Volume image;
  double lo = 0.0;
  double hi = 0.0;
};

/// Process-wide count of corrupt_window calls, for instrumentation checks.
inline std::atomic<long>& corruption_calls() {
  static std::atomic<long> n{0};
  return n;
}

/// Re-windows the raw intensities with a random window (lo', hi').
inline CorruptedImage corrupt_window(const Volume& raw, Rng& rng, const CorruptionLaw& law = {}) {
  ++corruption_calls();
  if (raw.domain != IntensityDomain::raw_hu) {
    throw Error(Errc::precondition, "corrupt_window needs the raw (HU) intensity channel");
  }
  std::uniform_real_distribution<double> lo_dist(law.lo_min, law.lo_max), hi_dist(law.hi_min, law.hi_max);
  double lo = 0.0, hi = 0.0;
  do {
    lo = lo_dist(rng);
    hi = hi_dist(rng);
  } while (!(hi - lo >= law.min_width && lo < hi));
  return {window_normalize(raw, lo, hi), lo, hi};
}

/// I = (1 - M) * I_ori + M * I_cor.
inline Grid3<float> blend(const Grid3<float>& original, const Grid3<float>& corrupted, const Mask& m) {
  require_same_shape(original, corrupted, "blend images");
  require_same_shape(original, m, "blend mask");
  Grid3<float> out(original.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = m[i] ? corrupted[i] : original[i];
  return out;
}

/// Linearly decaying uncertainty threshold across restoration training.
inline double threshold_schedule(int epoch, int total_epochs, double start = 0.2, double end = 0.001) {
  if (total_epochs < 1 || epoch < 0 || epoch >= total_epochs) {
    throw Error(Errc::out_of_range, "epoch " + std::to_string(epoch) + " outside [0, " +
                                        std::to_string(total_epochs) + ")");
  }
  if (total_epochs == 1) return start;
  if (epoch == total_epochs - 1) return end;
  return start + (end - start) * static_cast<double>(epoch) / static_cast<double>(total_epochs - 1);
}

/// Voxel count and sum of uncertainties strictly above `threshold`.
struct UncertaintyTally {
  std::size_t count = 0;
  double sum = 0.0;
};

inline UncertaintyTally tally_uncertainty(const Grid3<float>& unc, double threshold = 0.01) {
  UncertaintyTally t;
  for (float u : unc) {
    if (u > threshold) {
      ++t.count;
      t.sum += u;
    }
  }
  return t;
}

}  // namespace dualseg

#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dualseg/error.hpp"

namespace dualseg {

/// Grid extent in (D, H, W) = (slice, row, column) order.
struct Shape3 {
  std::size_t d = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  constexpr std::size_t voxels() const noexcept { return d * h * w; }
  constexpr std::size_t operator[](std::size_t axis) const noexcept {
    return axis == 0 ? d : (axis == 1 ? h : w);
  }
  friend constexpr bool operator==(const Shape3&, const Shape3&) = default;
};

inline std::string to_string(const Shape3& s) {
  return std::to_string(s.d) + "x" + std::to_string(s.h) + "x" + std::to_string(s.w);
}

/// Dense row-major 3D array. Index (z, y, x) maps to (z * H + y) * W + x.
template <typename T>
class Grid3 {
 public:
  using value_type = T;

  Grid3() = default;
  explicit Grid3(Shape3 shape, T fill = T{}) : shape_(shape), data_(shape.voxels(), fill) {}
  Grid3(Shape3 shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.voxels()) {
      throw Error(Errc::shape_mismatch, "payload size does not match grid " + to_string(shape_));
    }
  }

  const Shape3& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t index(std::size_t z, std::size_t y, std::size_t x) const noexcept {
    return (z * shape_.h + y) * shape_.w + x;
  }
  bool contains(long z, long y, long x) const noexcept {
    return z >= 0 && y >= 0 && x >= 0 && static_cast<std::size_t>(z) < shape_.d &&
           static_cast<std::size_t>(y) < shape_.h && static_cast<std::size_t>(x) < shape_.w;
  }

  T& operator()(std::size_t z, std::size_t y, std::size_t x) noexcept { return data_[index(z, y, x)]; }
  const T& operator()(std::size_t z, std::size_t y, std::size_t x) const noexcept {
    return data_[index(z, y, x)];
  }
  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }

  auto begin() noexcept { return data_.begin(); }
  auto end() noexcept { return data_.end(); }
  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

  friend bool operator==(const Grid3&, const Grid3&) = default;

 private:
  Shape3 shape_{};
  std::vector<T> data_;
};

/// Binary grid; every voxel is exactly 0 or 1.
using Mask = Grid3<std::uint8_t>;

/// Physical voxel size in mm, (z, y, x) order.
struct Spacing {
  float z = 1.0f;
  float y = 1.0f;
  float x = 1.0f;

  constexpr float operator[](std::size_t axis) const noexcept { return axis == 0 ? z : (axis == 1 ? y : x); }
  constexpr bool positive() const noexcept { return z > 0.0f && y > 0.0f && x > 0.0f; }
  friend constexpr bool operator==(const Spacing&, const Spacing&) = default;
};

enum class IntensityDomain : std::uint8_t { raw_hu, normalized_unit };

struct Volume {
  Grid3<float> voxels;
  Spacing spacing{};
  IntensityDomain domain = IntensityDomain::raw_hu;

  const Shape3& shape() const noexcept { return voxels.shape(); }
  friend bool operator==(const Volume&, const Volume&) = default;
};

/// Throws unless the volume satisfies the data-model invariants.
inline void validate(const Volume& vol) {
  const auto& s = vol.shape();
  if (s.d == 0 || s.h == 0 || s.w == 0) {
    throw Error(Errc::shape_mismatch, "volume dims must all be >= 1, got " + to_string(s));
  }
  if (!vol.spacing.positive()) throw Error(Errc::invalid_spacing, "spacing components must be > 0");
  if (vol.domain == IntensityDomain::normalized_unit) {
    for (float v : vol.voxels) {
      if (!(v >= 0.0f && v <= 1.0f)) throw Error(Errc::precondition, "normalized volume has voxel outside [0,1]");
    }
  }
}

inline bool is_binary(const Mask& m) {
  return std::all_of(m.begin(), m.end(), [](std::uint8_t v) { return v <= 1; });
}

inline std::size_t count(const Mask& m) {
  std::size_t n = 0;
  for (auto v : m) n += v;
  return n;
}

template <typename A, typename B>
void require_same_shape(const Grid3<A>& a, const Grid3<B>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw Error(Errc::shape_mismatch,
                std::string(what) + ": " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

/// Half-open axis-aligned voxel box.
struct BBox {
  std::array<std::size_t, 3> lo{};
  std::array<std::size_t, 3> hi{};

  Shape3 extent() const noexcept { return {hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]}; }
  bool contains(std::size_t z, std::size_t y, std::size_t x) const noexcept {
    return z >= lo[0] && z < hi[0] && y >= lo[1] && y < hi[1] && x >= lo[2] && x < hi[2];
  }
  bool valid_in(const Shape3& s) const noexcept {
    for (std::size_t a = 0; a < 3; ++a) {
      if (!(lo[a] < hi[a]) || hi[a] > s[a]) return false;
    }
    return true;
  }
  static BBox full(const Shape3& s) noexcept { return {{0, 0, 0}, {s.d, s.h, s.w}}; }
  friend bool operator==(const BBox&, const BBox&) = default;
};

template <typename T>
Grid3<T> crop(const Grid3<T>& g, const BBox& box) {
  if (!box.valid_in(g.shape())) throw Error(Errc::out_of_range, "crop box outside grid " + to_string(g.shape()));
  Grid3<T> out(box.extent());
  const auto e = box.extent();
  for (std::size_t z = 0; z < e.d; ++z) {
    for (std::size_t y = 0; y < e.h; ++y) {
      const T* src = &g(box.lo[0] + z, box.lo[1] + y, box.lo[2]);
      std::copy(src, src + e.w, &out(z, y, 0));
    }
  }
  return out;
}

/// Places `g` at `box` inside a grid of shape `full`, filling the rest.
template <typename T>
Grid3<T> uncrop(const Grid3<T>& g, const BBox& box, const Shape3& full, T fill = T{}) {
  if (!box.valid_in(full) || box.extent() != g.shape()) {
    throw Error(Errc::shape_mismatch, "uncrop box does not match cropped grid");
  }
  Grid3<T> out(full, fill);
  const auto e = box.extent();
  for (std::size_t z = 0; z < e.d; ++z) {
    for (std::size_t y = 0; y < e.h; ++y) {
      const T* src = &g(z, y, 0);
      std::copy(src, src + e.w, &out(box.lo[0] + z, box.lo[1] + y, box.lo[2]));
    }
  }
  return out;
}

}  // namespace dualseg

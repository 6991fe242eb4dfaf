#pragma once

// DSV1 container: little-endian
//   "DSV1" | u8 dtype (0 = f32, 1 = u8 mask) | u32 D, H, W | f32 sz, sy, sx | payload
// The payload is row-major (x fastest). Free-form metadata lives in a JSON
// sidecar next to the file (same basename, ".json").

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dualseg/error.hpp"
#include "dualseg/fsutil.hpp"
#include "dualseg/grid.hpp"

namespace dualseg {

enum class DsvType : std::uint8_t { f32 = 0, u8 = 1 };

struct DsvHeader {
  DsvType dtype = DsvType::f32;
  Shape3 shape{};
  Spacing spacing{};
};

inline constexpr std::size_t kDsvHeaderBytes = 4 + 1 + 3 * 4 + 3 * 4;

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
void put_le(std::vector<std::byte>& buf, T value) {
  auto bytes = std::bit_cast<std::array<std::byte, sizeof(T)>>(value);
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  buf.insert(buf.end(), bytes.begin(), bytes.end());
}

template <typename T>
T get_le(std::span<const std::byte> buf, std::size_t offset) {
  std::array<std::byte, sizeof(T)> bytes;
  std::memcpy(bytes.data(), buf.data() + offset, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  return std::bit_cast<T>(bytes);
}

inline std::uint32_t checked_dim(std::size_t n) {
  if (n == 0 || n > std::numeric_limits<std::uint32_t>::max()) {
    throw Error(Errc::format, "dimension " + std::to_string(n) + " not representable in DSV1");
  }
  return static_cast<std::uint32_t>(n);
}

inline std::vector<std::byte> encode_header(const DsvHeader& h) {
  std::vector<std::byte> buf;
  buf.reserve(kDsvHeaderBytes);
  for (char c : {'D', 'S', 'V', '1'}) buf.push_back(static_cast<std::byte>(c));
  buf.push_back(static_cast<std::byte>(h.dtype));
  put_le(buf, checked_dim(h.shape.d));
  put_le(buf, checked_dim(h.shape.h));
  put_le(buf, checked_dim(h.shape.w));
  put_le(buf, h.spacing.z);
  put_le(buf, h.spacing.y);
  put_le(buf, h.spacing.x);
  return buf;
}

}  // namespace detail

inline DsvHeader decode_header(std::span<const std::byte> buf) {
  if (buf.size() < kDsvHeaderBytes) throw Error(Errc::format, "truncated DSV1 header");
  if (std::memcmp(buf.data(), "DSV1", 4) != 0) throw Error(Errc::format, "bad magic (expected DSV1)");
  DsvHeader h;
  const auto code = std::to_integer<std::uint8_t>(buf[4]);
  if (code > 1) throw Error(Errc::format, "unknown dtype code " + std::to_string(code));
  h.dtype = static_cast<DsvType>(code);
  const auto d = detail::get_le<std::uint32_t>(buf, 5);
  const auto hh = detail::get_le<std::uint32_t>(buf, 9);
  const auto w = detail::get_le<std::uint32_t>(buf, 13);
  if (d == 0 || hh == 0 || w == 0) throw Error(Errc::format, "zero-sized dimension");
  h.shape = {d, hh, w};
  h.spacing = {detail::get_le<float>(buf, 17), detail::get_le<float>(buf, 21), detail::get_le<float>(buf, 25)};
  if (!h.spacing.positive()) throw Error(Errc::format, "non-positive spacing");
  return h;
}

namespace detail {

inline std::size_t payload_bytes(const DsvHeader& h) {
  const std::size_t elem = h.dtype == DsvType::f32 ? 4 : 1;
  std::size_t n = 0;
  if (__builtin_mul_overflow(h.shape.d, h.shape.h, &n) || __builtin_mul_overflow(n, h.shape.w, &n) ||
      __builtin_mul_overflow(n, elem, &n)) {
    throw Error(Errc::format, "dimension product overflows");
  }
  return n;
}

inline std::span<const std::byte> payload(std::span<const std::byte> buf, const DsvHeader& h) {
  const std::size_t n = payload_bytes(h);
  if (buf.size() - kDsvHeaderBytes < n) throw Error(Errc::format, "truncated payload");
  if (buf.size() - kDsvHeaderBytes > n) throw Error(Errc::format, "trailing bytes after payload");
  return buf.subspan(kDsvHeaderBytes, n);
}

}  // namespace detail

inline std::vector<std::byte> encode(const Grid3<float>& g, const Spacing& spacing) {
  auto buf = detail::encode_header({DsvType::f32, g.shape(), spacing});
  buf.reserve(buf.size() + g.size() * 4);
  for (float v : g) detail::put_le(buf, v);
  return buf;
}

inline std::vector<std::byte> encode(const Mask& m, const Spacing& spacing) {
  auto buf = detail::encode_header({DsvType::u8, m.shape(), spacing});
  for (auto v : m) buf.push_back(static_cast<std::byte>(v));
  return buf;
}

inline Grid3<float> decode_f32(std::span<const std::byte> buf, Spacing* spacing = nullptr) {
  const DsvHeader h = decode_header(buf);
  if (h.dtype != DsvType::f32) throw Error(Errc::format, "expected f32 payload, found mask");
  const auto body = detail::payload(buf, h);
  Grid3<float> g(h.shape);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = detail::get_le<float>(body, 4 * i);
  if (spacing) *spacing = h.spacing;
  return g;
}

inline Mask decode_mask(std::span<const std::byte> buf, Spacing* spacing = nullptr) {
  const DsvHeader h = decode_header(buf);
  if (h.dtype != DsvType::u8) throw Error(Errc::format, "expected u8 mask payload, found f32");
  const auto body = detail::payload(buf, h);
  Mask m(h.shape);
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto v = std::to_integer<std::uint8_t>(body[i]);
    if (v > 1) throw Error(Errc::format, "mask voxel is neither 0 nor 1");
    m[i] = v;
  }
  if (spacing) *spacing = h.spacing;
  return m;
}

inline fs::path sidecar_path(const fs::path& path) {
  fs::path p = path;
  p.replace_extension(".json");
  return p;
}

inline nlohmann::json read_sidecar(const fs::path& path) {
  const auto side = sidecar_path(path);
  if (!fs::exists(side)) return nlohmann::json::object();
  try {
    return nlohmann::json::parse(read_file_text(side));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::format, "bad sidecar " + side.string() + ": " + e.what());
  }
}

inline void write_sidecar(const fs::path& path, const nlohmann::json& meta) {
  write_file_atomic(sidecar_path(path), meta.dump(2) + "\n");
}

/// Writes the volume and a sidecar recording its intensity domain plus `meta`.
inline void write_volume(const Volume& vol, const fs::path& path, nlohmann::json meta = nlohmann::json::object()) {
  validate(vol);
  const auto bytes = encode(vol.voxels, vol.spacing);
  write_file_atomic(path, bytes);
  meta["intensity_domain"] = vol.domain == IntensityDomain::raw_hu ? "raw_hu" : "normalized_unit";
  write_sidecar(path, meta);
}

inline Volume read_volume(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  Volume vol;
  vol.voxels = decode_f32(bytes, &vol.spacing);
  const auto meta = read_sidecar(path);
  vol.domain = meta.value("intensity_domain", std::string("raw_hu")) == "normalized_unit"
                   ? IntensityDomain::normalized_unit
                   : IntensityDomain::raw_hu;
  return vol;
}

inline void write_mask(const Mask& mask, const Spacing& spacing, const fs::path& path,
                       const nlohmann::json& meta = nlohmann::json::object()) {
  if (!is_binary(mask)) throw Error(Errc::format, "refusing to write non-binary mask");
  write_file_atomic(path, encode(mask, spacing));
  if (!meta.empty()) write_sidecar(path, meta);
}

inline Mask read_mask(const fs::path& path, Spacing* spacing = nullptr) {
  return decode_mask(read_file_bytes(path), spacing);
}

}  // namespace dualseg

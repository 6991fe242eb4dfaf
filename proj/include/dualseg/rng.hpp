#pragma once

#include <cstdint>
#include <random>

namespace dualseg {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer; decorrelates child streams derived from one master seed.
constexpr std::uint64_t mix_seed(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Independent stream seed for item `index` of purpose `stream` under `master`.
constexpr std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index, std::uint64_t stream = 0) noexcept {
  return mix_seed(mix_seed(mix_seed(master) ^ index) ^ (stream * 0x632be59bd9b4e019ULL));
}

}  // namespace dualseg

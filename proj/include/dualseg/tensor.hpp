#pragma once

// Bridges between Grid3 and libtorch tensors. Volumes enter networks as
// [1, C, D, H, W] float tensors on the CPU.

#include <cstring>
#include <vector>

#include <torch/torch.h>

#include "dualseg/error.hpp"
#include "dualseg/grid.hpp"
#include "dualseg/uncertainty.hpp"

namespace dualseg {

template <typename T>
torch::Tensor to_tensor(const Grid3<T>& g) {
  const auto s = g.shape();
  auto t = torch::empty({1, 1, static_cast<long>(s.d), static_cast<long>(s.h), static_cast<long>(s.w)},
                        torch::kFloat32);
  float* out = t.data_ptr<float>();
  for (std::size_t i = 0; i < g.size(); ++i) out[i] = static_cast<float>(g[i]);
  return t;
}

/// Concatenates single-channel grids into one [1, C, D, H, W] tensor.
inline torch::Tensor stack_channels(const std::vector<const Grid3<float>*>& channels) {
  if (channels.empty()) throw Error(Errc::empty_input, "stack_channels needs at least one grid");
  std::vector<torch::Tensor> ts;
  for (const auto* g : channels) {
    require_same_shape(*channels.front(), *g, "stack_channels");
    ts.push_back(to_tensor(*g));
  }
  return torch::cat(ts, 1);
}

/// Reads a tensor with exactly D*H*W elements (any leading singleton dims) into a grid.
inline Grid3<float> to_grid(const torch::Tensor& t, const Shape3& s) {
  auto c = t.detach().to(torch::kFloat32).contiguous();
  if (static_cast<std::size_t>(c.numel()) != s.voxels()) {
    throw Error(Errc::shape_mismatch, "tensor has " + std::to_string(c.numel()) + " elements, grid " + to_string(s));
  }
  Grid3<float> g(s);
  std::memcpy(g.data(), c.data_ptr<float>(), s.voxels() * sizeof(float));
  return g;
}

inline Shape3 spatial_shape(const torch::Tensor& t) {
  if (t.dim() < 3) throw Error(Errc::shape_mismatch, "tensor has fewer than 3 dims");
  const auto n = t.dim();
  return {static_cast<std::size_t>(t.size(n - 3)), static_cast<std::size_t>(t.size(n - 2)),
          static_cast<std::size_t>(t.size(n - 1))};
}

/// Flips the trailing three (spatial) dims of a tensor.
inline torch::Tensor flip_spatial(const torch::Tensor& t, FlipCode code) {
  std::vector<long> dims;
  const long n = t.dim();
  if (code.z) dims.push_back(n - 3);
  if (code.y) dims.push_back(n - 2);
  if (code.x) dims.push_back(n - 1);
  return dims.empty() ? t : torch::flip(t, dims);
}

/// Stable digest of every parameter value; used to prove a model was not updated.
inline std::uint64_t parameter_hash(const torch::nn::Module& m) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& p : m.named_parameters(true)) {
    for (char c : p.key()) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
    auto v = p.value().detach().to(torch::kFloat32).contiguous();
    const auto* bytes = reinterpret_cast<const unsigned char*>(v.data_ptr<float>());
    for (long i = 0; i < v.numel() * 4; ++i) h = (h ^ bytes[i]) * 1099511628211ULL;
  }
  return h;
}

}  // namespace dualseg

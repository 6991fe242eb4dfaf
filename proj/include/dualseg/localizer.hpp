#pragma once

// Coarse organ localization: a small segmentation net on a block-averaged
// volume, reduced to a bounding box at full resolution. An oracle mode uses
// the ground-truth label instead.

#include <numeric>
#include <optional>
#include <random>

#include <torch/torch.h>

#include "dualseg/config.hpp"
#include "dualseg/log.hpp"
#include "dualseg/losses.hpp"
#include "dualseg/morphology.hpp"
#include "dualseg/net.hpp"
#include "dualseg/tensor.hpp"
#include "dualseg/volume.hpp"

namespace dualseg {

/// Block average by `f` along every axis. Dims must be multiples of `f`.
inline Grid3<float> block_average(const Grid3<float>& g, int f) {
  const Shape3 s = g.shape();
  const auto uf = static_cast<std::size_t>(f);
  if (f < 1 || s.d % uf || s.h % uf || s.w % uf) {
    throw Error(Errc::shape_mismatch, "grid " + to_string(s) + " is not divisible by factor " + std::to_string(f));
  }
  Grid3<float> out(Shape3{s.d / uf, s.h / uf, s.w / uf});
  const float inv = 1.0f / float(uf * uf * uf);
  for (std::size_t z = 0; z < s.d; ++z)
    for (std::size_t y = 0; y < s.h; ++y)
      for (std::size_t x = 0; x < s.w; ++x) out(z / uf, y / uf, x / uf) += g(z, y, x) * inv;
  return out;
}

/// 1 where any voxel of the f^3 block is set.
inline Mask block_any(const Mask& m, int f) {
  const Shape3 s = m.shape();
  const auto uf = static_cast<std::size_t>(f);
  if (f < 1 || s.d % uf || s.h % uf || s.w % uf) {
    throw Error(Errc::shape_mismatch, "mask " + to_string(s) + " is not divisible by factor " + std::to_string(f));
  }
  Mask out(Shape3{s.d / uf, s.h / uf, s.w / uf});
  for (std::size_t z = 0; z < s.d; ++z)
    for (std::size_t y = 0; y < s.h; ++y)
      for (std::size_t x = 0; x < s.w; ++x)
        if (m(z, y, x)) out(z / uf, y / uf, x / uf) = 1;
  return out;
}

/// Grows each axis of `box` (centred, clamped to the grid) until its extent is
/// at least `min_extent` and a multiple of `multiple`.
inline BBox expand_box(BBox box, const Shape3& grid, const std::array<std::size_t, 3>& min_extent, std::size_t multiple) {
  for (int a = 0; a < 3; ++a) {
    std::size_t want = std::max(box.hi[a] - box.lo[a], min_extent[a]);
    want = (want + multiple - 1) / multiple * multiple;
    if (want > grid[a]) {
      throw Error(Errc::shape_mismatch, "grid axis " + std::to_string(grid[a]) + " cannot hold a crop of " +
                                            std::to_string(want));
    }
    const std::size_t grow = want - (box.hi[a] - box.lo[a]);
    std::size_t lo = box.lo[a] >= grow / 2 ? box.lo[a] - grow / 2 : 0;
    lo = std::min(lo, grid[a] - want);
    box.lo[a] = lo;
    box.hi[a] = lo + want;
  }
  return box;
}

inline BackboneSpec coarse_spec(const DataConfig& d) {
  return BackboneSpec{3, d.coarse_base, std::gcd(d.coarse_base, 4), 1};
}

/// Re-windows raw HU with a randomly shifted window so the localizer does not
/// key on one source's absolute intensities.
inline Grid3<float> jittered_normalize(const Volume& raw, Rng& rng) {
  std::uniform_real_distribution<double> lo(kDefaultWindowLo - 40.0, kDefaultWindowLo + 40.0);
  std::uniform_real_distribution<double> hi(kDefaultWindowHi - 80.0, kDefaultWindowHi + 100.0);
  const double l = lo(rng), h = hi(rng);
  return window_normalize(raw, l, h).voxels;
}

/// Trains the low-resolution localizer on (raw volume, label) pairs.
inline GfsNet train_coarse(const std::vector<const Volume*>& raws, const std::vector<const Mask*>& labels,
                           const DataConfig& cfg, std::uint64_t seed) {
  if (raws.empty() || raws.size() != labels.size()) throw Error(Errc::empty_input, "coarse training needs cases");
  torch::manual_seed(derive_seed(seed, 0, 11));
  Rng rng(derive_seed(seed, 0, 12));
  GfsNet net(coarse_spec(cfg));
  torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(cfg.coarse_lr));
  std::vector<Mask> low_labels;
  for (const auto* l : labels) low_labels.push_back(block_any(*l, cfg.coarse_factor));
  std::vector<std::size_t> order(raws.size());
  std::iota(order.begin(), order.end(), 0);
  std::bernoulli_distribution coin(0.5);
  net->train();
  for (int epoch = 0; epoch < cfg.coarse_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i : order) {
      const FlipCode fc{coin(rng), coin(rng), coin(rng)};
      const auto x = to_tensor(flip(block_average(jittered_normalize(*raws[i], rng), cfg.coarse_factor), fc));
      const auto y = to_tensor(flip(low_labels[i], fc));
      opt.zero_grad();
      auto loss = seg_loss(net->predict(x), y);
      loss.backward();
      opt.step();
    }
  }
  net->eval();
  return net;
}

/// Learned mode: threshold the low-res prediction, keep the largest component,
/// scale its box back up and pad by `margin`. An empty prediction yields the full grid.
inline BBox coarse_localize(GfsNet& net, const Volume& raw, const DataConfig& cfg) {
  const Grid3<float> norm = window_normalize(raw).voxels;
  const Grid3<float> low = block_average(norm, cfg.coarse_factor);
  Grid3<float> prob;
  {
    torch::NoGradGuard g;
    prob = to_grid(net->predict(to_tensor(low)), low.shape());
  }
  const Mask m = binarize(prob);
  Grid3<std::int32_t> labels;
  const std::size_t n = label_components(m, labels, Connectivity::vertex26);
  if (n == 0) {
    log::warn("coarse localizer found no organ; using the full grid");
    return BBox::full(raw.voxels.shape());
  }
  std::vector<std::size_t> sizes(n + 1, 0);
  for (auto v : labels) sizes[static_cast<std::size_t>(v)] += v > 0;
  const auto best = static_cast<std::int32_t>(std::max_element(sizes.begin() + 1, sizes.end()) - sizes.begin());
  Mask keep(m.shape());
  for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = labels[i] == best;
  const BBox lb = bbox_of(keep);
  const Shape3 s = raw.voxels.shape();
  const auto f = static_cast<std::size_t>(cfg.coarse_factor), mg = static_cast<std::size_t>(cfg.crop_margin);
  BBox box;
  for (int a = 0; a < 3; ++a) {
    const std::size_t lo = lb.lo[a] * f, hi = lb.hi[a] * f;
    box.lo[a] = lo > mg ? lo - mg : 0;
    box.hi[a] = std::min(s[a], hi + mg);
  }
  return box;
}

/// Oracle mode: ground-truth box with margin.
inline BBox oracle_localize(const Mask& label, const DataConfig& cfg) { return bbox_of(label, cfg.crop_margin); }

}  // namespace dualseg

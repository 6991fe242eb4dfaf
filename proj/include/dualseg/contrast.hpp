#pragma once

// Centerline-guided contrastive learning: positives are feature patches whose
// centre lies on the organ's dilated centerline, negatives come from a ring of
// background around the organ, one patch per slice along axis 0.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "dualseg/error.hpp"
#include "dualseg/fsutil.hpp"
#include "dualseg/grid.hpp"
#include "dualseg/rng.hpp"
#include "dualseg/tensor.hpp"

namespace dualseg {

inline constexpr int kProjectionChannels = 32;

/// 1x1x1 convolution mapping the contrast layer's channels to 32.
struct ProjectionHeadImpl : torch::nn::Module {
  ProjectionHeadImpl(int in_channels, int out_channels = kProjectionChannels) : in_channels(in_channels) {
    if (in_channels < 1 || out_channels < 1) throw Error(Errc::config, "projection channels must be >= 1");
    conv = register_module("conv", torch::nn::Conv3d(torch::nn::Conv3dOptions(in_channels, out_channels, 1).bias(false)));
  }

  torch::Tensor forward(const torch::Tensor& f) {
    if (f.dim() != 5 || f.size(1) != in_channels) {
      throw Error(Errc::shape_mismatch, "projection expects [B, " + std::to_string(in_channels) + ", D, H, W]");
    }
    return conv->forward(f);
  }

  int in_channels;
  torch::nn::Conv3d conv{nullptr};
};
TORCH_MODULE(ProjectionHead);

enum class SampleClass : std::uint8_t { positive = 0, negative = 1 };

struct PatchCenter {
  long z = 0, y = 0, x = 0;
  friend bool operator==(const PatchCenter&, const PatchCenter&) = default;
};

struct SampledPatches {
  torch::Tensor vectors;  // [n, c*h*w]
  std::vector<PatchCenter> centers;
};

namespace detail {

inline torch::Tensor as_chw(const torch::Tensor& f) {
  if (f.dim() == 5 && f.size(0) == 1) return f.squeeze(0);
  if (f.dim() == 4) return f;
  throw Error(Errc::shape_mismatch, "feature map must be [c, D, H, W] or [1, c, D, H, W]");
}

inline SampledPatches sample_region(const torch::Tensor& feature, const Mask& region, int h, int w, Rng& rng,
                                    Errc empty_code, const char* what) {
  const torch::Tensor f = as_chw(feature);
  const Shape3 fs{static_cast<std::size_t>(f.size(1)), static_cast<std::size_t>(f.size(2)),
                  static_cast<std::size_t>(f.size(3))};
  if (region.shape() != fs) {
    throw Error(Errc::shape_mismatch, std::string(what) + " region " + to_string(region.shape()) +
                                          " vs feature grid " + to_string(fs));
  }
  if (h < 1 || w < 1 || static_cast<std::size_t>(h) > fs.h || static_cast<std::size_t>(w) > fs.w) {
    throw Error(Errc::invalid_parameter, "patch size must satisfy 1 <= h <= H and 1 <= w <= W");
  }
  // Centres are restricted to positions where the whole patch fits.
  const long hy = h / 2, hx = w / 2;
  SampledPatches out;
  std::vector<torch::Tensor> rows;
  std::vector<std::pair<long, long>> admissible;
  for (std::size_t z = 0; z < fs.d; ++z) {
    admissible.clear();
    for (long y = hy; y - hy + h <= static_cast<long>(fs.h); ++y)
      for (long x = hx; x - hx + w <= static_cast<long>(fs.w); ++x)
        if (region(z, static_cast<std::size_t>(y), static_cast<std::size_t>(x))) admissible.emplace_back(y, x);
    if (admissible.empty()) continue;
    std::uniform_int_distribution<std::size_t> pick(0, admissible.size() - 1);
    const auto [y, x] = admissible[pick(rng)];
    out.centers.push_back({static_cast<long>(z), y, x});
    rows.push_back(f.select(1, static_cast<long>(z)).slice(1, y - hy, y - hy + h).slice(2, x - hx, x - hx + w).reshape({-1}));
  }
  if (rows.empty()) throw Error(empty_code, std::string("no admissible ") + what + " patch centre on any slice");
  out.vectors = torch::stack(rows);
  return out;
}

}  // namespace detail

/// One patch per slice centred inside the centerline mask.
inline SampledPatches sample_positive(const torch::Tensor& f_proj, const Mask& center_mask, int h, int w, Rng& rng) {
  return detail::sample_region(f_proj, center_mask, h, w, rng, Errc::no_positive_region, "positive");
}

/// One patch per slice centred inside the background ring.
inline SampledPatches sample_negative(const torch::Tensor& f_proj, const Mask& ring, int h, int w, Rng& rng) {
  return detail::sample_region(f_proj, ring, h, w, rng, Errc::no_negative_region, "negative");
}

inline double cosine_sim(const torch::Tensor& a, const torch::Tensor& b) {
  const auto x = a.to(torch::kFloat64).reshape({-1}), y = b.to(torch::kFloat64).reshape({-1});
  if (x.numel() != y.numel()) throw Error(Errc::shape_mismatch, "cosine_sim on vectors of different length");
  const double na = x.norm().item<double>(), nb = y.norm().item<double>();
  if (!(na > 0.0) || !(nb > 0.0)) throw Error(Errc::degenerate_sample, "cosine similarity of a zero vector");
  return x.dot(y).item<double>() / (na * nb);
}

struct ContrastiveBatch {
  torch::Tensor samples;  // [2N, L]
  std::vector<SampleClass> tags;

  std::size_t n() const { return static_cast<std::size_t>(std::count(tags.begin(), tags.end(), SampleClass::positive)); }

  void validate() const {
    if (!samples.defined() || samples.dim() != 2 || static_cast<std::size_t>(samples.size(0)) != tags.size()) {
      throw Error(Errc::shape_mismatch, "contrastive batch must be [2N, L] with one tag per row");
    }
    const std::size_t pos = n();
    if (pos < 1 || tags.size() != 2 * pos) throw Error(Errc::insufficient_samples, "batch needs N >= 1 per class");
    const auto norms = samples.detach().norm(2, 1);
    if (!torch::isfinite(samples.detach()).all().item<bool>()) {
      throw Error(Errc::degenerate_sample, "non-finite contrastive sample");
    }
    if (norms.min().item<double>() <= 0.0) throw Error(Errc::degenerate_sample, "zero contrastive sample");
  }
};

/// Process-wide count of contrastive batches built, for instrumentation checks.
inline std::atomic<long>& contrastive_batches_built() {
  static std::atomic<long> n{0};
  return n;
}

struct ContrastSampling {
  int h = 3;
  int w = 3;
  int n_cap = 32;
};

/// Samples positives and negatives and keeps N = min(#pos, #neg, cap) of each.
inline ContrastiveBatch build_contrastive_batch(const torch::Tensor& f_proj, const Mask& center_mask, const Mask& ring,
                                                const ContrastSampling& p, Rng& rng) {
  if (p.n_cap < 1) throw Error(Errc::config, "contrast n_cap must be >= 1");
  ++contrastive_batches_built();
  const SampledPatches pos = sample_positive(f_proj, center_mask, p.h, p.w, rng);
  const SampledPatches neg = sample_negative(f_proj, ring, p.h, p.w, rng);
  const long n = std::min<long>({pos.vectors.size(0), neg.vectors.size(0), p.n_cap});
  auto choose = [&](long total) {
    std::vector<long> idx(static_cast<std::size_t>(total));
    std::iota(idx.begin(), idx.end(), 0L);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(static_cast<std::size_t>(n));
    std::sort(idx.begin(), idx.end());
    return torch::tensor(idx, torch::kLong);
  };
  ContrastiveBatch b;
  b.samples = torch::cat({pos.vectors.index_select(0, choose(pos.vectors.size(0))),
                          neg.vectors.index_select(0, choose(neg.vectors.size(0)))});
  b.tags.assign(static_cast<std::size_t>(n), SampleClass::positive);
  b.tags.insert(b.tags.end(), static_cast<std::size_t>(n), SampleClass::negative);
  return b;
}

namespace detail {

inline torch::Tensor scaled_similarity(const ContrastiveBatch& b, double tau) {
  if (!(tau > 0.0)) throw Error(Errc::invalid_parameter, "temperature must be > 0");
  const auto norms = b.samples.norm(2, 1, true);
  if (norms.min().item<double>() <= 0.0) throw Error(Errc::degenerate_sample, "zero contrastive sample");
  const auto z = b.samples / norms;
  return z.matmul(z.t()) / tau;
}

inline torch::Tensor cross_class_mask(const ContrastiveBatch& b) {
  const long m = static_cast<long>(b.tags.size());
  auto tags = torch::empty({m}, torch::kLong);
  for (long i = 0; i < m; ++i) tags[i] = static_cast<long>(b.tags[static_cast<std::size_t>(i)]);
  return tags.unsqueeze(1) != tags.unsqueeze(0);
}

}  // namespace detail

/// -log( exp(s_ij/tau) / sum over k of the other class of exp(s_ik/tau) ).
inline torch::Tensor info_nce(long anchor, long partner, const ContrastiveBatch& b, double tau = 0.05) {
  const long m = static_cast<long>(b.tags.size());
  if (anchor < 0 || partner < 0 || anchor >= m || partner >= m || anchor == partner) {
    throw Error(Errc::invalid_parameter, "info_nce indices out of range");
  }
  if (b.tags[static_cast<std::size_t>(anchor)] != b.tags[static_cast<std::size_t>(partner)]) {
    throw Error(Errc::invalid_parameter, "info_nce pair must share a class");
  }
  const auto cross = detail::cross_class_mask(b)[anchor];
  if (!cross.any().item<bool>()) throw Error(Errc::empty_denominator, "no cross-class sample in batch");
  const auto s = detail::scaled_similarity(b, tau)[anchor];
  return torch::logsumexp(s.masked_select(cross), 0) - s[partner];
}

/// Mean of info_nce over all unordered same-class pairs (anchor = lower index).
inline torch::Tensor contrastive_loss(const ContrastiveBatch& b, double tau = 0.05) {
  b.validate();
  const long n = static_cast<long>(b.n());
  if (n < 2) throw Error(Errc::insufficient_samples, "contrastive loss needs N >= 2");
  const auto s = detail::scaled_similarity(b, tau);
  const auto cross = detail::cross_class_mask(b);
  const auto neg_inf = torch::full_like(s, -std::numeric_limits<double>::infinity());
  const auto denom = torch::logsumexp(torch::where(cross, s, neg_inf), 1, true);  // [2N, 1]
  const auto pairs = torch::logical_not(cross).triu(1);
  const auto terms = (denom - s).masked_select(pairs);
  return terms.sum() / static_cast<double>(n * (n - 1));
}

/// Writes (sample_id, class_tag, per-channel mean over the h*w patch).
inline void write_embeddings_csv(const fs::path& path, const ContrastiveBatch& b, int channels) {
  const auto v = b.samples.detach().to(torch::kFloat64).reshape({b.samples.size(0), channels, -1}).mean(2);
  std::string text = "sample_id,class_tag";
  for (int c = 0; c < channels; ++c) text += ",e" + std::to_string(c);
  text += "\n";
  char buf[32];
  for (long i = 0; i < v.size(0); ++i) {
    text += std::to_string(i) + (b.tags[static_cast<std::size_t>(i)] == SampleClass::positive ? ",positive" : ",negative");
    for (int c = 0; c < channels; ++c) {
      std::snprintf(buf, sizeof buf, ",%.9g", v[i][c].item<double>());
      text += buf;
    }
    text += "\n";
  }
  write_file_atomic(path, text);
}

}  // namespace dualseg

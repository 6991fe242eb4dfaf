#pragma once

// Test-time path: localize, crop, stage-one flip ensemble, optional stage-two
// refinement (segmentation decoder only), binarize and un-crop.

#include <optional>

#include "dualseg/train.hpp"

namespace dualseg {

struct Models {
  std::optional<GfsNet> coarse;  // empty in oracle mode
  GfsNet stage1{nullptr};
  std::optional<LisNet> lis;
  DataConfig data;
  std::string source;
};

/// Loads the localizer and stage-one net from a run directory, plus stage two
/// when `with_lis` is set.
inline Models load_models(const RunDir& run, bool with_lis) {
  Models m;
  const auto gfs_dir = run.checkpoint(kGfsCkpt);
  if (!checkpoint_exists(gfs_dir)) throw Error(Errc::dependency, "no stage-one checkpoint in " + run.root.string());
  const auto meta = read_checkpoint_meta(gfs_dir);
  m.data = meta.at("config").get<TrainConfig>().data;
  m.source = meta.value("source", std::string());
  m.stage1 = load_segmenter(gfs_dir);
  const auto coarse_dir = run.checkpoint(kCoarseCkpt);
  if (m.data.coarse_mode == "learned") {
    GfsNet c(read_checkpoint_meta(coarse_dir).at("spec").get<BackboneSpec>());
    load_checkpoint(*c, coarse_dir);
    c->eval();
    m.coarse = c;
  }
  if (with_lis) {
    const auto lis_dir = run.checkpoint(kLisCkpt);
    if (!checkpoint_exists(lis_dir)) throw Error(Errc::dependency, "no stage-two checkpoint in " + run.root.string());
    LisNet l(read_checkpoint_meta(lis_dir).at("spec").get<BackboneSpec>());
    load_checkpoint(*l, lis_dir);
    l->eval();
    m.lis = l;
  }
  return m;
}

struct InferOptions {
  int k = 8;
  double t = 0.01;
  bool gate_uncertainty = true;
  bool final_uncertainty = true;  // flip ensemble of the final model; off leaves `unc` as stage one's
};

/// Stage-one flip predictions over the crop, kept so sweeps can reduce
/// different view counts without rerunning the network.
struct Stage1Views {
  BBox box;
  Grid3<float> image;  // normalized crop
  std::vector<Grid3<float>> views;
};

inline BBox localize(Models& m, const Volume& raw, const Mask* label, long divisor) {
  BBox box;
  if (m.coarse) {
    box = coarse_localize(*m.coarse, raw, m.data);
  } else {
    if (!label) throw Error(Errc::precondition, "oracle localization needs the ground-truth label");
    box = oracle_localize(*label, m.data);
  }
  return expand_box(box, raw.voxels.shape(), {0, 0, 0}, static_cast<std::size_t>(divisor));
}

inline Stage1Views stage1_views(Models& m, const Volume& raw, const Mask* label, int k = 8) {
  if (raw.domain != IntensityDomain::raw_hu) throw Error(Errc::precondition, "inference expects raw HU volumes");
  Stage1Views s;
  s.box = localize(m, raw, label, m.stage1->spec.divisor());
  s.image = crop(window_normalize(raw).voxels, s.box);
  s.views = flip_predictions([&](const torch::Tensor& v) { return m.stage1->predict(v); }, to_tensor(s.image), k);
  return s;
}

struct InferResult {
  Mask mask;                 // full grid
  Grid3<float> prob;         // final probability, full grid
  Grid3<float> unc;          // uncertainty of the final model, full grid
  UncertaintyTriple stage1;  // stage-one mean, stage-one uncertainty, network input image (crop grid)
  BBox box;
};

inline Grid3<float> gated(const Grid3<float>& unc, double t, bool gate) {
  if (!gate) return unc;
  const Mask m = threshold_mask(unc, t);
  Grid3<float> out(unc.shape());
  for (std::size_t i = 0; i < unc.size(); ++i) out[i] = m[i] ? unc[i] : 0.0f;
  return out;
}

/// Finishes inference from cached stage-one views using the first `opt.k` views.
inline InferResult infer_from_views(Models& m, const Stage1Views& s, const Shape3& full, const InferOptions& opt) {
  if (opt.k < 1 || static_cast<std::size_t>(opt.k) > s.views.size()) {
    throw Error(Errc::invalid_parameter, "view count K exceeds the cached stage-one views");
  }
  const auto maps = ensemble_reduce(std::span<const Grid3<float>>(s.views).first(static_cast<std::size_t>(opt.k)));
  InferResult r;
  r.box = s.box;
  r.stage1 = {maps.mean, maps.stddev, s.image};
  Grid3<float> prob, unc;
  if (m.lis) {
    auto& lis = *m.lis;
    const Grid3<float> unc_in = gated(maps.stddev, opt.t, opt.gate_uncertainty);
    const auto x = stack_channels({&s.image, &maps.mean, &unc_in});
    const Predictor seg_only = [&](const torch::Tensor& v) { return lis->predict(v); };
    if (opt.final_uncertainty) {
      const auto e = ensemble_predict(seg_only, x, opt.k);
      prob = e.identity;
      unc = e.maps.stddev;
    } else {
      torch::NoGradGuard g;
      prob = to_grid(seg_only(x), s.image.shape());
      unc = maps.stddev;
    }
  } else {
    prob = s.views.front();
    unc = maps.stddev;
  }
  r.prob = uncrop(prob, s.box, full, 0.0f);
  r.unc = uncrop(unc, s.box, full, 0.0f);
  r.mask = binarize(r.prob);
  return r;
}

/// Full test-time path for one raw volume. `label` is only used in oracle mode.
inline InferResult infer(Models& m, const Volume& raw, const Mask* label = nullptr, const InferOptions& opt = {}) {
  const Stage1Views s = stage1_views(m, raw, label, opt.k);
  return infer_from_views(m, s, raw.voxels.shape(), opt);
}

}  // namespace dualseg

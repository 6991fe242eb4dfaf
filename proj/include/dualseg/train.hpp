#pragma once

// Training stages. Stage one trains the segmentation net (optionally with the
// centreline/ring contrastive term); stage two freezes it and trains the
// restoration-and-segmentation net on uncertainty-guided corrupted inputs.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>

#include <torch/torch.h>

#include "dualseg/augment.hpp"
#include "dualseg/checkpoint.hpp"
#include "dualseg/config.hpp"
#include "dualseg/contrast.hpp"
#include "dualseg/dataset.hpp"
#include "dualseg/ensemble.hpp"
#include "dualseg/localizer.hpp"
#include "dualseg/log.hpp"
#include "dualseg/losses.hpp"
#include "dualseg/skeleton.hpp"

namespace dualseg {

struct RunDir {
  fs::path root;

  fs::path config() const { return root / "config.json"; }
  fs::path checkpoints() const { return root / "checkpoints"; }
  fs::path checkpoint(const std::string& name) const { return checkpoints() / name; }
  fs::path losses() const { return root / "logs" / "losses.csv"; }
  fs::path reports() const { return root / "reports"; }
};

// Checkpoint names inside a run directory.
inline constexpr const char* kCoarseCkpt = "coarse";
inline constexpr const char* kGfsCkpt = "gfs";
inline constexpr const char* kLisCkpt = "lis";
inline constexpr const char* kDiscCkpt = "discriminator";

struct TrainingCase {
  std::string id;
  Volume raw;
  Grid3<float> norm;
  Mask label;
  Mask centerline;  // empty unless the contrastive term is on
  BBox region;      // label box plus margin, grown to hold a patch
};

/// Rejects training data that mixes sources: all manifests must share one
/// style and every case's sidecar must agree with it.
inline std::string check_single_source(const std::vector<Manifest>& manifests) {
  if (manifests.empty()) throw Error(Errc::empty_input, "no training manifest given");
  const std::string style = manifests.front().style;
  for (const auto& m : manifests) {
    if (m.style != style) {
      throw Error(Errc::config, "training data spans multiple sources ('" + style + "' and '" + m.style +
                                    "'); training is single-source only");
    }
    for (const auto& c : m.cases) {
      const auto meta = read_sidecar(m.root / c.volume);
      if (meta.contains("style") && meta.at("style") != style) {
        throw Error(Errc::config, "case " + c.id + " comes from source '" + meta.at("style").get<std::string>() +
                                      "' but the manifest is '" + style + "'; training is single-source only");
      }
    }
  }
  return style;
}

inline std::vector<TrainingCase> load_training_cases(const std::vector<Manifest>& manifests, const std::string& split,
                                                     const TrainConfig& cfg, bool with_centerline) {
  std::vector<TrainingCase> out;
  const std::array<std::size_t, 3> patch{std::size_t(cfg.data.patch[0]), std::size_t(cfg.data.patch[1]),
                                         std::size_t(cfg.data.patch[2])};
  for (const auto& m : manifests) {
    for (const auto& e : m.split(split)) {
      LoadedCase lc = load_case(m, e);
      TrainingCase c;
      c.id = lc.id;
      c.norm = window_normalize(lc.raw).voxels;
      c.label = std::move(lc.label);
      c.raw = std::move(lc.raw);
      c.region = expand_box(oracle_localize(c.label, cfg.data), c.label.shape(), patch,
                            static_cast<std::size_t>(cfg.backbone.divisor()));
      if (with_centerline) c.centerline = centerline_mask(c.label, cfg.contrast.centerline_radius);
      out.push_back(std::move(c));
    }
  }
  if (out.empty()) throw Error(Errc::empty_input, "no '" + split + "' cases in the training data");
  return out;
}

inline BBox random_patch(const BBox& region, const std::array<int, 3>& patch, Rng& rng) {
  BBox b;
  for (int a = 0; a < 3; ++a) {
    const std::size_t p = static_cast<std::size_t>(patch[a]);
    const std::size_t span = region.hi[a] - region.lo[a];
    if (span < p) throw Error(Errc::shape_mismatch, "training region smaller than the patch");
    b.lo[a] = region.lo[a] + std::uniform_int_distribution<std::size_t>(0, span - p)(rng);
    b.hi[a] = b.lo[a] + p;
  }
  return b;
}

struct LossRow {
  std::string stage;
  int epoch = 0;
  long step = 0;
  double lr = 0.0;
  double t = std::numeric_limits<double>::quiet_NaN();
  double total = 0.0, seg = 0.0;
  double con = std::numeric_limits<double>::quiet_NaN();
  double rec = std::numeric_limits<double>::quiet_NaN();
  double adv_g = std::numeric_limits<double>::quiet_NaN();
  double adv_d = std::numeric_limits<double>::quiet_NaN();
  double mask_frac = std::numeric_limits<double>::quiet_NaN();
};

inline constexpr const char* kLossHeader = "stage,epoch,step,lr,t,total,seg,con,rec,adv_g,adv_d,mask_frac";

inline std::string format_loss_row(const LossRow& r) {
  auto num = [](double v) {
    if (std::isnan(v)) return std::string();
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return std::string(buf);
  };
  std::ostringstream os;
  os << r.stage << ',' << r.epoch << ',' << r.step << ',' << num(r.lr) << ',' << num(r.t) << ',' << num(r.total) << ','
     << num(r.seg) << ',' << num(r.con) << ',' << num(r.rec) << ',' << num(r.adv_g) << ',' << num(r.adv_d) << ','
     << num(r.mask_frac);
  return os.str();
}

/// Replaces the rows of `stage` in the loss CSV, keeping other stages' rows.
inline void write_stage_losses(const fs::path& path, const std::string& stage, const std::vector<LossRow>& rows) {
  std::string out = std::string(kLossHeader) + "\n";
  if (fs::exists(path)) {
    std::istringstream in(read_file_text(path));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (!line.empty() && line.substr(0, line.find(',')) != stage) out += line + "\n";
    }
  }
  for (const auto& r : rows) out += format_loss_row(r) + "\n";
  write_file_atomic(path, out);
}

/// Polynomial learning-rate decay, either closed form or the step recursion.
class PolyLr {
 public:
  PolyLr(const OptimConfig& o, long max_iter) : o_(o), max_(max_iter), lr_(o.lr) {}

  double at(long iter) {
    const double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(max_);
    if (o_.literal_recursion) {
      if (iter > 0) lr_ *= std::pow(frac, o_.poly_power);
      return lr_;
    }
    return o_.lr * std::pow(frac, o_.poly_power);
  }

 private:
  OptimConfig o_;
  long max_;
  double lr_;
};

inline void set_lr(torch::optim::Optimizer& opt, double lr) {
  for (auto& g : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(g.options()).lr(lr);
}

inline torch::optim::AdamOptions adam_options(const OptimConfig& o) {
  return torch::optim::AdamOptions(o.lr).weight_decay(o.weight_decay);
}

struct StageStats {
  long steps = 0;
  long contrast_skipped = 0;
};

/// Stage one. Returns the trained net; appends one row per step to `rows`.
inline GfsNet train_segmenter(const std::vector<TrainingCase>& cases, const TrainConfig& cfg, bool use_contrast,
                              std::vector<LossRow>& rows, StageStats* stats = nullptr) {
  torch::manual_seed(derive_seed(cfg.seed, 1, 1));
  Rng rng(derive_seed(cfg.seed, 1, 2));
  GfsNet net(cfg.backbone);
  net->train();
  torch::optim::Adam opt(net->parameters(), adam_options(cfg.optim));
  const long max_iter = static_cast<long>(cfg.gfs.epochs) * static_cast<long>(cases.size());
  PolyLr sched(cfg.optim, max_iter);
  const auto radii = scaled_ring_radii(cfg.contrast);
  const ContrastSampling sampling{cfg.contrast.patch_h, cfg.contrast.patch_w, cfg.contrast.n_cap};
  std::vector<std::size_t> order(cases.size());
  std::iota(order.begin(), order.end(), 0);
  StageStats st;
  long step = 0;
  for (int epoch = 0; epoch < cfg.gfs.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t idx : order) {
      const auto& c = cases[idx];
      const double lr = sched.at(step);
      set_lr(opt, lr);
      const BBox pb = random_patch(c.region, cfg.data.patch, rng);
      const AugmentDraw d = draw_augment(cfg.augment, rng);
      Grid3<float> img = apply_geometry(crop(c.norm, pb), d, Interp::trilinear);
      const Mask lab = apply_geometry(crop(c.label, pb), d, Interp::nearest);
      add_noise(img, d.noise_sigma, rng);

      const auto out = net->forward(to_tensor(img));
      const auto seg = seg_loss(out.prob, to_tensor(lab));
      auto total = seg;
      LossRow row{use_contrast ? "gfs" : "bl", epoch, step, lr};
      if (use_contrast) {
        const Mask centre = apply_geometry(crop(c.centerline, pb), d, Interp::nearest);
        const int r = std::uniform_int_distribution<int>(radii[0], radii[1])(rng);
        try {
          const auto batch = build_contrastive_batch(net->projection->forward(out.features), centre,
                                                     ring_region(lab, r), sampling, rng);
          const auto con = contrastive_loss(batch, cfg.contrast.tau);
          total = total + cfg.gfs.w_con * con;
          row.con = con.item<double>();
        } catch (const Error& e) {
          const auto code = e.code();
          if (code != Errc::no_positive_region && code != Errc::no_negative_region &&
              code != Errc::insufficient_samples && code != Errc::degenerate_sample) {
            throw;
          }
          ++st.contrast_skipped;
        }
      }
      opt.zero_grad();
      total.backward();
      opt.step();
      row.seg = seg.item<double>();
      row.total = total.item<double>();
      rows.push_back(row);
      ++step;
    }
    if ((epoch + 1) % 10 == 0 || epoch + 1 == cfg.gfs.epochs) {
      log::info(rows.back().stage, " epoch ", epoch + 1, "/", cfg.gfs.epochs, " loss ", rows.back().total);
    }
  }
  if (st.contrast_skipped > 0) log::info("contrastive term skipped on ", st.contrast_skipped, " of ", step, " steps");
  st.steps = step;
  if (stats) *stats = st;
  net->eval();
  return net;
}

/// Frozen stage-one outputs over a case's training region.
struct Stage1Maps {
  Grid3<float> prob;
  Grid3<float> unc;
};

inline Stage1Maps stage1_maps(GfsNet& net, const Grid3<float>& image, int k) {
  const auto e = ensemble_predict([&](const torch::Tensor& v) { return net->predict(v); }, to_tensor(image), k);
  return {e.maps.mean, e.maps.stddev};
}

struct LisTrainResult {
  LisNet lis;
  Discriminator disc;
};

/// Stage two. `stage1` is only evaluated, never updated.
inline LisTrainResult train_restorer(const std::vector<TrainingCase>& cases, GfsNet& stage1, const TrainConfig& cfg,
                                     std::vector<LossRow>& rows) {
  stage1->eval();
  std::vector<Stage1Maps> cache;
  cache.reserve(cases.size());
  for (const auto& c : cases) cache.push_back(stage1_maps(stage1, crop(c.norm, c.region), cfg.uncertainty.k));

  torch::manual_seed(derive_seed(cfg.seed, 2, 1));
  Rng rng(derive_seed(cfg.seed, 2, 2));
  LisNet lis(cfg.backbone);
  Discriminator disc(cfg.lis.disc_base);
  lis->train();
  disc->train();
  torch::optim::Adam opt_g(lis->parameters(), adam_options(cfg.optim));
  torch::optim::Adam opt_d(disc->parameters(), adam_options(cfg.optim));
  const long max_iter = static_cast<long>(cfg.lis.epochs) * static_cast<long>(cases.size());
  PolyLr sched(cfg.optim, max_iter);
  std::vector<std::size_t> order(cases.size());
  std::iota(order.begin(), order.end(), 0);
  long step = 0;
  for (int epoch = 0; epoch < cfg.lis.epochs; ++epoch) {
    const double t = threshold_schedule(epoch, cfg.lis.epochs, cfg.uncertainty.schedule_start,
                                        cfg.uncertainty.schedule_end);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t idx : order) {
      const auto& c = cases[idx];
      const double lr = sched.at(step);
      set_lr(opt_g, lr);
      set_lr(opt_d, lr);
      // Patch box relative to the cached region.
      const BBox region_local = BBox::full(c.region.extent());
      const BBox pb = random_patch(region_local, cfg.data.patch, rng);
      const AugmentDraw d = draw_augment(cfg.augment, rng);
      const Grid3<float> raw_region = crop(c.raw.voxels, c.region);
      const Volume raw{apply_geometry(crop(raw_region, pb), d, Interp::trilinear), c.raw.spacing, IntensityDomain::raw_hu};
      const Grid3<float> prob = apply_geometry(crop(cache[idx].prob, pb), d, Interp::trilinear);
      Grid3<float> unc = apply_geometry(crop(cache[idx].unc, pb), d, Interp::trilinear);
      const Mask lab = apply_geometry(crop(crop(c.label, c.region), pb), d, Interp::nearest);

      const Grid3<float> original = window_normalize(raw).voxels;
      const Mask m = threshold_mask(unc, t);
      Grid3<float> input = blend(original, corrupt_window(raw, rng, cfg.uncertainty.corruption).image.voxels, m);
      add_noise(input, d.noise_sigma, rng);
      if (cfg.lis.gate_uncertainty) {
        for (std::size_t i = 0; i < unc.size(); ++i) unc[i] = m[i] ? unc[i] : 0.0f;
      }

      const auto out = lis->forward(to_tensor(input), to_tensor(prob), to_tensor(unc), true);
      const auto target = to_tensor(original);
      const auto mt = to_tensor(m);
      const auto seg = seg_loss(out.prob, to_tensor(lab));
      const auto rec = rec_loss(out.restored, target, mt, cfg.lis.lambda);
      const auto adv = adv_losses(disc, target, out.restored);
      const auto total = lis_total_loss(seg, rec, adv.g_loss, cfg.lis.w_adv);

      opt_g.zero_grad();
      total.backward();
      opt_g.step();
      opt_d.zero_grad();
      adv.d_loss.backward();
      opt_d.step();

      LossRow row{"lis", epoch, step, lr, t};
      row.total = total.item<double>();
      row.seg = seg.item<double>();
      row.rec = rec.item<double>();
      row.adv_g = adv.g_loss.item<double>();
      row.adv_d = adv.d_loss.item<double>();
      row.mask_frac = static_cast<double>(count(m)) / static_cast<double>(m.size());
      rows.push_back(row);
      ++step;
    }
    if ((epoch + 1) % 10 == 0 || epoch + 1 == cfg.lis.epochs) {
      log::info("lis epoch ", epoch + 1, "/", cfg.lis.epochs, " t ", t, " loss ", rows.back().total);
    }
  }
  lis->eval();
  return {lis, disc};
}

inline nlohmann::json checkpoint_meta(const std::string& kind, const BackboneSpec& spec, const std::string& source,
                                      const TrainConfig& cfg) {
  return {{"kind", kind}, {"spec", spec}, {"source", source}, {"config", cfg}};
}

/// Trains the localizer into the run directory unless oracle mode is chosen or
/// it already exists.
inline void ensure_coarse(const RunDir& run, const std::vector<TrainingCase>& cases, const TrainConfig& cfg,
                          const std::string& source, bool force) {
  if (cfg.data.coarse_mode != "learned") return;
  const auto dir = run.checkpoint(kCoarseCkpt);
  if (checkpoint_exists(dir) && !force) return;
  std::vector<const Volume*> raws;
  std::vector<const Mask*> labels;
  for (const auto& c : cases) {
    raws.push_back(&c.raw);
    labels.push_back(&c.label);
  }
  log::info("training coarse localizer on ", cases.size(), " cases");
  const auto start = std::chrono::steady_clock::now();
  GfsNet net = train_coarse(raws, labels, cfg.data, cfg.seed);
  auto meta = checkpoint_meta("coarse", net->spec, source, cfg);
  meta["factor"] = cfg.data.coarse_factor;
  meta["train_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  save_checkpoint(*net, dir, meta);
}

inline void refuse_overwrite(const fs::path& ckpt, bool force) {
  if (checkpoint_exists(ckpt) && !force) {
    throw Error(Errc::precondition, ckpt.string() + " already exists; pass --force to retrain");
  }
}

/// Stage one into a run directory: localizer (learned mode), then the
/// segmenter with or without the contrastive term per cfg.gfs.contrast.
inline void run_train_gfs(const RunDir& run, const std::vector<Manifest>& data, const TrainConfig& cfg, bool force,
                          bool retrain_coarse = false) {
  validate(cfg);
  refuse_overwrite(run.checkpoint(kGfsCkpt), force);
  const std::string source = check_single_source(data);
  const auto cases = load_training_cases(data, "train", cfg, cfg.gfs.contrast);
  fs::create_directories(run.checkpoints());
  write_config(cfg, run.config());
  ensure_coarse(run, cases, cfg, source, retrain_coarse);
  std::vector<LossRow> rows;
  const auto start = std::chrono::steady_clock::now();
  GfsNet net = train_segmenter(cases, cfg, cfg.gfs.contrast, rows);
  auto meta = checkpoint_meta(cfg.gfs.contrast ? "gfs" : "bl", net->spec, source, cfg);
  meta["train_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_stage_losses(run.losses(), rows.front().stage, rows);
  save_checkpoint(*net, run.checkpoint(kGfsCkpt), meta);
}

inline GfsNet load_segmenter(const fs::path& dir) {
  GfsNet net(read_checkpoint_meta(dir).at("spec").get<BackboneSpec>());
  load_checkpoint(*net, dir);
  net->eval();
  return net;
}

/// Stage two into a run directory; needs the stage-one checkpoint there.
inline void run_train_lis(const RunDir& run, const std::vector<Manifest>& data, const TrainConfig& cfg, bool force) {
  validate(cfg);
  const auto gfs_dir = run.checkpoint(kGfsCkpt);
  if (!checkpoint_exists(gfs_dir)) {
    throw Error(Errc::dependency, "stage two needs a trained stage-one checkpoint at " + gfs_dir.string() +
                                      "; run `train --stage gfs` first");
  }
  refuse_overwrite(run.checkpoint(kLisCkpt), force);
  const std::string source = check_single_source(data);
  const auto cases = load_training_cases(data, "train", cfg, false);
  write_config(cfg, run.config());
  GfsNet stage1 = load_segmenter(gfs_dir);
  std::vector<LossRow> rows;
  const auto start = std::chrono::steady_clock::now();
  auto res = train_restorer(cases, stage1, cfg, rows);
  auto meta = checkpoint_meta("lis", res.lis->spec, source, cfg);
  meta["train_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_stage_losses(run.losses(), "lis", rows);
  save_checkpoint(*res.lis, run.checkpoint(kLisCkpt), meta);
  save_checkpoint(*res.disc, run.checkpoint(kDiscCkpt), checkpoint_meta("discriminator", cfg.backbone, source, cfg));
}

}  // namespace dualseg

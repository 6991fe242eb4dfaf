#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "dualseg/report.hpp"

using namespace dualseg;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("dualseg_pipeline_" + name);
  fs::remove_all(p);
  return p;
}

// One cached dataset per style for the whole suite.
const Manifest& dataset(const std::string& style, int n = 4) {
  static std::map<std::string, Manifest> cache;
  const std::string key = style + std::to_string(n);
  if (!cache.contains(key)) cache[key] = gen_dataset(n, default_style(style), scratch("data_" + key), 41, {}, 0.25);
  return cache.at(key);
}

TrainConfig tiny() {
  TrainConfig c;
  c.backbone = BackboneSpec{2, 4, 2, 1};
  c.gfs.epochs = 1;
  c.lis.epochs = 2;
  c.data.patch = {16, 16, 16};
  c.data.coarse_epochs = 2;
  c.seed = 3;
  return c;
}

std::string slurp(const fs::path& p) { return read_file_text(p); }

std::size_t line_count(const fs::path& p) {
  const auto s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

}  // namespace

TEST(Config, DefaultsCarryTheTrainingRecipe) {
  const TrainConfig c;
  EXPECT_EQ(c.gfs.epochs, 500);
  EXPECT_EQ(c.lis.epochs, 200);
  EXPECT_EQ(c.optim.lr, 1e-4);
  EXPECT_EQ(c.optim.weight_decay, 5e-4);
  EXPECT_EQ(c.optim.poly_power, 0.9);
  EXPECT_EQ(c.contrast.tau, 0.05);
  EXPECT_EQ(c.contrast.patch_h, 3);
  EXPECT_EQ(c.contrast.patch_w, 3);
  EXPECT_EQ(c.uncertainty.schedule_start, 0.2);
  EXPECT_EQ(c.uncertainty.schedule_end, 0.001);
  EXPECT_EQ(c.uncertainty.test_threshold, 0.01);
  EXPECT_EQ(c.uncertainty.k, 8);
  EXPECT_EQ(c.lis.lambda, 0.9);
  EXPECT_NO_THROW(validate(c));
}

TEST(Config, PrecedenceIsDefaultsThenFileThenOverrides) {
  const auto dir = scratch("config");
  fs::create_directories(dir);
  write_file_atomic(dir / "c.json", std::string(R"({"gfs": {"epochs": 7, "w_con": 0.5}, "optim": {"lr": 0.002}})"));
  const auto c = resolve_config(dir / "c.json", {"gfs.epochs=9", "stage=lis", "data.patch=[8,8,8]"});
  EXPECT_EQ(c.gfs.epochs, 9);
  EXPECT_EQ(c.gfs.w_con, 0.5);
  EXPECT_EQ(c.optim.lr, 0.002);
  EXPECT_EQ(c.stage, "lis");
  EXPECT_EQ(c.data.patch, (std::array<int, 3>{8, 8, 8}));
  EXPECT_EQ(c.lis.epochs, 200);

  write_config(c, dir / "snap.json");
  EXPECT_EQ(nlohmann::json(read_config(dir / "snap.json")), nlohmann::json(c));
}

TEST(Config, UnknownKeysAndBadValuesAreRejected) {
  const auto dir = scratch("config_bad");
  fs::create_directories(dir);
  auto expect_config_error = [](auto&& f) {
    try {
      f();
      ADD_FAILURE() << "no error";
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), Errc::config) << e.what();
    }
  };
  write_file_atomic(dir / "typo.json", std::string(R"({"gfs": {"epoch": 3}})"));
  expect_config_error([&] { resolve_config(dir / "typo.json", {}); });
  write_file_atomic(dir / "top.json", std::string(R"({"learning_rate": 3})"));
  expect_config_error([&] { resolve_config(dir / "top.json", {}); });
  write_file_atomic(dir / "broken.json", std::string("{not json"));
  expect_config_error([&] { resolve_config(dir / "broken.json", {}); });
  expect_config_error([&] { resolve_config({}, {"gfs.nope=1"}); });
  expect_config_error([&] { resolve_config({}, {"gfs=1"}); });
  expect_config_error([&] { resolve_config({}, {"noequals"}); });
  expect_config_error([&] { resolve_config({}, {"gfs.epochs=abc"}); });
  expect_config_error([&] { resolve_config({}, {"gfs.epochs=0"}); });
  expect_config_error([&] { resolve_config({}, {"optim.lr=-1"}); });
  expect_config_error([&] { resolve_config({}, {"stage=\"other\""}); });
  expect_config_error([&] { resolve_config({}, {"data.patch=[30,32,32]"}); });
}

TEST(Config, ScaledRingRadii) {
  ContrastConfig c;
  EXPECT_EQ(scaled_ring_radii(c), (std::array<int, 2>{3, 5}));
  c.ring_scale = 1.0;
  EXPECT_EQ(scaled_ring_radii(c), (std::array<int, 2>{10, 20}));
  c.ring_scale = 0.01;
  EXPECT_EQ(scaled_ring_radii(c), (std::array<int, 2>{1, 1}));
}

TEST(PolyLr, ClosedFormAndRecursion) {
  OptimConfig o;
  PolyLr closed(o, 100);
  EXPECT_EQ(closed.at(0), 1e-4);
  EXPECT_NEAR(closed.at(50), 1e-4 * std::pow(0.5, 0.9), 1e-18);
  EXPECT_NEAR(closed.at(99), 1e-4 * std::pow(0.01, 0.9), 1e-18);
  o.literal_recursion = true;
  PolyLr rec(o, 100);
  double expect = 1e-4;
  for (long i = 0; i < 100; ++i) {
    if (i > 0) expect *= std::pow(1.0 - double(i) / 100.0, 0.9);
    ASSERT_NEAR(rec.at(i), expect, 1e-20);
  }
}

TEST(Augment, NullDrawIsIdentity) {
  const auto& m = dataset("srcA");
  const auto c = load_case(m, m.cases[0]);
  const Grid3<float> img = window_normalize(c.raw).voxels;
  const AugmentDraw none;
  EXPECT_EQ(apply_geometry(img, none, Interp::trilinear), img);
  EXPECT_EQ(apply_geometry(c.label, none, Interp::nearest), c.label);
  AugmentConfig off{0.0, false, 0.0};
  Rng rng(1);
  const auto a = augment_pair(img, c.label, off, rng);
  EXPECT_EQ(a.image, img);
  EXPECT_EQ(a.label, c.label);
}

TEST(Augment, QuarterTurnMatchesIndexPermutation) {
  Grid3<float> g(Shape3{3, 9, 9});
  Rng rng(2);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto& v : g) v = u(rng);
  Mask m(g.shape());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = g[i] > 0.5f;
  // out(y, x) = in(x, W - 1 - y) for a +90 degree turn on a square slice.
  const auto r = rotate_hw(m, 90.0, Interp::nearest);
  const auto rf = rotate_hw(g, 90.0, Interp::trilinear);
  for (std::size_t z = 0; z < 3; ++z)
    for (std::size_t y = 0; y < 9; ++y)
      for (std::size_t x = 0; x < 9; ++x) {
        ASSERT_EQ(r(z, y, x), m(z, x, 8 - y));
        ASSERT_NEAR(rf(z, y, x), g(z, x, 8 - y), 1e-5f);
      }
}

TEST(Augment, MaskTransformMatchesCoordinateOracle) {
  // Oracle: map every output voxel back through the flips, then through the
  // inverse rotation, and read the nearest source voxel.
  const auto& m = dataset("srcA");
  const auto c = load_case(m, m.cases[1]);
  AugmentConfig cfg;
  Rng rng(3);
  const auto s = c.label.shape();
  for (int trial = 0; trial < 10; ++trial) {
    const Grid3<float> img = window_normalize(c.raw).voxels;
    const auto a = augment_pair(img, c.label, cfg, rng);
    EXPECT_LE(std::abs(a.draw.angle_deg), 15.0);
    EXPECT_TRUE(is_binary(a.label));
    Mask oracle(s);
    const double th = a.draw.angle_deg * std::numbers::pi / 180.0;
    const double cy = (s.h - 1) / 2.0, cx = (s.w - 1) / 2.0;
    for (std::size_t z = 0; z < s.d; ++z)
      for (std::size_t y = 0; y < s.h; ++y)
        for (std::size_t x = 0; x < s.w; ++x) {
          const std::size_t rz = a.draw.flip.z ? s.d - 1 - z : z;
          const std::size_t ry = a.draw.flip.y ? s.h - 1 - y : y;
          const std::size_t rx = a.draw.flip.x ? s.w - 1 - x : x;
          const double vy = double(ry) - cy, vx = double(rx) - cx;
          const long sy = std::lround(std::cos(th) * vy + std::sin(th) * vx + cy);
          const long sx = std::lround(-std::sin(th) * vy + std::cos(th) * vx + cx);
          const auto cy_i = static_cast<std::size_t>(std::clamp<long>(sy, 0, long(s.h) - 1));
          const auto cx_i = static_cast<std::size_t>(std::clamp<long>(sx, 0, long(s.w) - 1));
          oracle(z, y, x) = c.label(rz, cy_i, cx_i);
        }
    ASSERT_EQ(dsc(a.label, oracle), 1.0);
  }
}

TEST(Augment, NoiseTouchesTheImageOnly) {
  const auto& m = dataset("srcA");
  const auto c = load_case(m, m.cases[0]);
  const Grid3<float> img = window_normalize(c.raw).voxels;
  AugmentConfig noise_only{0.0, false, 0.05};
  Rng rng(4);
  const auto a = augment_pair(img, c.label, noise_only, rng);
  EXPECT_EQ(a.label, c.label);
  EXPECT_GT(a.draw.noise_sigma, 0.0);
  EXPECT_NE(a.image, img);
  for (float v : a.image) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
}

TEST(Localizer, BlockReductions) {
  Grid3<float> g(Shape3{4, 4, 8});
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = float(i % 7);
  const auto a = block_average(g, 2);
  EXPECT_EQ(a.shape(), (Shape3{2, 2, 4}));
  for (std::size_t z = 0; z < 2; ++z)
    for (std::size_t y = 0; y < 2; ++y)
      for (std::size_t x = 0; x < 4; ++x) {
        double sum = 0;
        for (int dz = 0; dz < 2; ++dz)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) sum += g(2 * z + dz, 2 * y + dy, 2 * x + dx);
        ASSERT_NEAR(a(z, y, x), sum / 8.0, 1e-5);
      }
  Mask m(Shape3{4, 4, 4});
  m(3, 0, 1) = 1;
  const auto b = block_any(m, 2);
  EXPECT_EQ(count(b), 1u);
  EXPECT_EQ(b(1, 0, 0), 1);
  EXPECT_THROW(block_average(g, 3), Error);
}

TEST(Localizer, ExpandBoxProperties) {
  const Shape3 grid{64, 64, 64};
  Rng rng(5);
  std::uniform_int_distribution<std::size_t> u(0, 63);
  for (int trial = 0; trial < 200; ++trial) {
    BBox b;
    for (int a = 0; a < 3; ++a) {
      std::size_t p = u(rng), q = u(rng);
      if (p > q) std::swap(p, q);
      b.lo[a] = p;
      b.hi[a] = q + 1;
    }
    const auto e = expand_box(b, grid, {16, 16, 16}, 8);
    ASSERT_TRUE(e.valid_in(grid));
    for (int a = 0; a < 3; ++a) {
      const auto ext = e.hi[a] - e.lo[a];
      ASSERT_EQ(ext % 8, 0u);
      ASSERT_GE(ext, 16u);
      ASSERT_LE(e.lo[a], b.lo[a]);
      ASSERT_GE(e.hi[a], b.hi[a]);
    }
  }
  EXPECT_THROW(expand_box(BBox::full(Shape3{10, 10, 10}), Shape3{10, 10, 10}, {0, 0, 0}, 8), Error);
}

TEST(Localizer, LearnedBoxContainsTheOrganOnTrainingData) {
  const auto& m = dataset("srcA", 8);
  std::vector<LoadedCase> cases;
  for (const auto& e : m.cases) cases.push_back(load_case(m, e));
  std::vector<const Volume*> raws;
  std::vector<const Mask*> labels;
  for (const auto& c : cases) {
    raws.push_back(&c.raw);
    labels.push_back(&c.label);
  }
  DataConfig cfg;
  const GfsNet net = train_coarse(raws, labels, cfg, 7);
  std::size_t inside = 0, total = 0;
  for (const auto& c : cases) {
    GfsNet n = net;
    const BBox box = coarse_localize(n, c.raw, cfg);
    const auto s = c.label.shape();
    for (std::size_t z = 0; z < s.d; ++z)
      for (std::size_t y = 0; y < s.h; ++y)
        for (std::size_t x = 0; x < s.w; ++x) {
          if (!c.label(z, y, x)) continue;
          ++total;
          inside += box.contains(z, y, x);
        }
    EXPECT_LT(box.extent().voxels(), s.voxels());
  }
  EXPECT_GE(double(inside) / double(total), 0.99);
}

TEST(Localizer, EmptyPredictionFallsBackToFullGrid) {
  const auto& m = dataset("srcA");
  const auto c = load_case(m, m.cases[0]);
  DataConfig cfg;
  GfsNet net(coarse_spec(cfg));
  {
    torch::NoGradGuard g;
    net->seg_head->bias.fill_(-100.0);
  }
  EXPECT_EQ(coarse_localize(net, c.raw, cfg), BBox::full(c.raw.voxels.shape()));
  EXPECT_EQ(oracle_localize(c.label, cfg), bbox_of(c.label, 8));
}

TEST(SingleSource, MixedSourcesAreRejected) {
  const auto& a = dataset("srcA");
  const auto& b = dataset("srcB");
  EXPECT_EQ(check_single_source({a}), "srcA");
  try {
    check_single_source({a, b});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::config);
  }
  // A case whose sidecar names another source inside an srcA manifest.
  const auto dir = scratch("mixed");
  fs::copy(a.root, dir, fs::copy_options::recursive);
  auto tampered = read_manifest(dir);
  const auto side = sidecar_path(dir / tampered.cases[1].volume);
  auto meta = nlohmann::json::parse(read_file_text(side));
  meta["style"] = "srcC";
  write_file_atomic(side, meta.dump());
  EXPECT_THROW(check_single_source({tampered}), Error);
  EXPECT_THROW(run_train_gfs(RunDir{scratch("mixed_run")}, {tampered}, tiny(), false), Error);
}

TEST(LossLog, StageRowsAreReplacedNotDuplicated) {
  const auto p = scratch("losses") / "losses.csv";
  fs::create_directories(p.parent_path());
  write_stage_losses(p, "gfs", {LossRow{"gfs", 0, 0, 1e-4}, LossRow{"gfs", 0, 1, 1e-4}});
  write_stage_losses(p, "lis", {LossRow{"lis", 0, 0, 1e-4, 0.2}});
  write_stage_losses(p, "lis", {LossRow{"lis", 0, 0, 1e-4, 0.2}, LossRow{"lis", 1, 1, 1e-4, 0.001}});
  EXPECT_EQ(line_count(p), 5u);
  EXPECT_EQ(slurp(p).substr(0, slurp(p).find('\n')), kLossHeader);
  EXPECT_NE(slurp(p).find("lis,1,1,0.0001,0.001,"), std::string::npos);
}

TEST(TrainGfs, OneEpochBookkeeping) {
  const auto& m = dataset("srcA");
  const RunDir run{scratch("gfs_1ep")};
  auto cfg = tiny();
  run_train_gfs(run, {m}, cfg, false);
  EXPECT_TRUE(checkpoint_exists(run.checkpoint(kGfsCkpt)));
  EXPECT_TRUE(checkpoint_exists(run.checkpoint(kCoarseCkpt)));
  EXPECT_TRUE(fs::exists(run.config()));
  // header + epochs * training cases
  EXPECT_EQ(line_count(run.losses()), 1u + m.split("train").size());
  EXPECT_EQ(read_config(run.config()).gfs.epochs, 1);
  try {
    run_train_gfs(run, {m}, cfg, false);
    FAIL() << "completed stage was overwritten";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::precondition);
  }
  EXPECT_NO_THROW(run_train_gfs(run, {m}, cfg, true));
}

TEST(TrainGfs, FixedSeedReproducesLossCsv) {
  const auto& m = dataset("srcA");
  auto cfg = tiny();
  cfg.gfs.epochs = 2;
  cfg.data.coarse_mode = "oracle";
  const RunDir a{scratch("rep_a")}, b{scratch("rep_b")};
  run_train_gfs(a, {m}, cfg, false);
  run_train_gfs(b, {m}, cfg, false);
  EXPECT_EQ(slurp(a.losses()), slurp(b.losses()));
  EXPECT_FALSE(checkpoint_exists(a.checkpoint(kCoarseCkpt)));
  cfg.seed = 4;
  const RunDir c{scratch("rep_c")};
  run_train_gfs(c, {m}, cfg, false);
  EXPECT_NE(slurp(a.losses()), slurp(c.losses()));
}

TEST(TrainGfs, BaselineNeverBuildsContrastiveBatchesOrCorruptions) {
  const auto& m = dataset("srcA");
  auto cfg = tiny();
  cfg.gfs.contrast = false;
  const long batches = contrastive_batches_built(), corruptions = corruption_calls();
  const RunDir run{scratch("bl_instr")};
  run_train_gfs(run, {m}, cfg, false);
  Models models = load_models(run, false);
  const auto c = load_case(m, m.cases[0]);
  infer(models, c.raw);
  EXPECT_EQ(contrastive_batches_built(), batches);
  EXPECT_EQ(corruption_calls(), corruptions);
  const auto csv = slurp(run.losses());
  EXPECT_NE(csv.find("\nbl,"), std::string::npos);

  cfg.gfs.contrast = true;
  run_train_gfs(RunDir{scratch("gfs_instr")}, {m}, cfg, false);
  EXPECT_GT(contrastive_batches_built(), batches);
}

TEST(TrainGfs, SmokeTrainingFitsItsTrainingSet) {
  auto m = dataset("srcA", 8);
  for (auto& e : m.cases) e.split = "train";
  TrainConfig cfg;
  cfg.gfs.epochs = 50;
  cfg.gfs.contrast = false;
  cfg.optim.lr = 1e-3;
  cfg.data.coarse_mode = "oracle";
  const RunDir run{scratch("smoke")};
  run_train_gfs(run, {m}, cfg, false);
  Models models = load_models(run, false);
  InferOptions opt;
  opt.k = 1;
  const auto rows = evaluate_cases(models, m, "train", opt);
  double mean = 0.0;
  for (const auto& r : rows) mean += r.dsc / double(rows.size());
  EXPECT_GT(mean, 0.7);
}

TEST(TrainLis, MissingStageOneIsADependencyError) {
  const auto& m = dataset("srcA");
  try {
    run_train_lis(RunDir{scratch("lis_nodep")}, {m}, tiny(), false);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::dependency);
  }
}

TEST(TrainLis, ScheduleIsolationAndDeterminism) {
  const auto& m = dataset("srcA");
  auto cfg = tiny();
  cfg.lis.epochs = 3;
  const auto cases = load_training_cases({m}, "train", cfg, false);
  std::vector<LossRow> rows;
  GfsNet stage1 = train_segmenter(cases, cfg, false, rows);
  const auto before = parameter_hash(*stage1);
  std::vector<LossRow> lis_rows;
  const long corruptions = corruption_calls();
  train_restorer(cases, stage1, cfg, lis_rows);
  EXPECT_EQ(parameter_hash(*stage1), before);
  EXPECT_EQ(corruption_calls() - corruptions, long(3 * cases.size()));
  ASSERT_EQ(lis_rows.size(), 3 * cases.size());
  EXPECT_EQ(lis_rows.front().t, 0.2);
  EXPECT_EQ(lis_rows.back().t, 0.001);
  for (const auto& r : lis_rows) {
    ASSERT_TRUE(std::isfinite(r.total));
    ASSERT_GE(r.mask_frac, 0.0);
  }

  std::vector<LossRow> again;
  train_restorer(cases, stage1, cfg, again);
  ASSERT_EQ(again.size(), lis_rows.size());
  for (std::size_t i = 0; i < again.size(); ++i) ASSERT_EQ(format_loss_row(again[i]), format_loss_row(lis_rows[i]));
}

TEST(TrainLis, EmptyUncertaintyMaskLeavesInputUncorruptedAndRecTermZeroWeighted) {
  const auto& m = dataset("srcA");
  auto cfg = tiny();
  cfg.lis.epochs = 1;
  // A threshold above any possible std of probabilities keeps M empty.
  cfg.uncertainty.schedule_start = 10.0;
  cfg.uncertainty.schedule_end = 10.0;
  const auto cases = load_training_cases({m}, "train", cfg, false);
  std::vector<LossRow> rows;
  GfsNet stage1 = train_segmenter(cases, cfg, false, rows);
  std::vector<LossRow> lis_rows;
  train_restorer(cases, stage1, cfg, lis_rows);
  for (const auto& r : lis_rows) EXPECT_EQ(r.mask_frac, 0.0);
}

TEST(Infer, FullGridOutputDeterministicAndRestorationBranchUnused) {
  const auto& m = dataset("srcA");
  const RunDir run{scratch("infer_run")};
  auto cfg = tiny();
  run_train_gfs(run, {m}, cfg, false);
  cfg.stage = "lis";
  cfg.lis.epochs = 1;
  run_train_lis(run, {m}, cfg, false);
  EXPECT_TRUE(checkpoint_exists(run.checkpoint(kLisCkpt)));
  EXPECT_EQ(line_count(run.losses()), 1u + 2 * m.split("train").size());

  Models models = load_models(run, true);
  const auto c = load_case(dataset("srcB"), dataset("srcB").cases[0]);
  const auto a = infer(models, c.raw);
  const auto b = infer(models, c.raw);
  EXPECT_EQ(a.mask.shape(), c.raw.voxels.shape());
  EXPECT_EQ(a.unc.shape(), c.raw.voxels.shape());
  EXPECT_EQ(a.mask, b.mask);
  EXPECT_EQ(a.unc, b.unc);
  EXPECT_EQ((*models.lis)->restoration_calls, 0);
  // Outside the crop nothing is segmented and nothing is uncertain.
  for (std::size_t z = 0; z < a.mask.shape().d; ++z)
    for (std::size_t y = 0; y < a.mask.shape().h; ++y)
      for (std::size_t x = 0; x < a.mask.shape().w; ++x)
        if (!a.box.contains(z, y, x)) ASSERT_TRUE(a.mask(z, y, x) == 0 && a.unc(z, y, x) == 0.0f);

  // Oracle localization needs the label.
  Models oracle = load_models(run, false);
  oracle.coarse.reset();
  EXPECT_THROW(infer(oracle, c.raw), Error);
  EXPECT_EQ(infer(oracle, c.raw, &c.label).box,
            expand_box(bbox_of(c.label, 8), c.label.shape(), {0, 0, 0}, std::size_t(cfg.backbone.divisor())));

  // Cached views reproduce the direct path.
  const auto views = stage1_views(models, c.raw, nullptr);
  const auto via = infer_from_views(models, views, c.raw.voxels.shape(), {});
  EXPECT_EQ(via.mask, a.mask);
  EXPECT_EQ(via.unc, a.unc);
}

TEST(EvalMatrix, SelfOnlyGridAndRowMeans) {
  const auto& a = dataset("srcA");
  const RunDir run{scratch("matrix_run")};
  run_train_gfs(run, {a}, tiny(), false);
  std::vector<Models> models;
  models.push_back(load_models(run, false));
  const auto self = eval_matrix(models, {a});
  ASSERT_EQ(self.cells.size(), 1u);
  EXPECT_EQ(self.cells[0].train_source, "srcA");
  EXPECT_EQ(self.cells[0].test_source, "srcA");
  EXPECT_EQ(self.cells[0].n, a.split("val").size());

  const auto cross = eval_matrix(models, {a, dataset("srcB"), dataset("srcC")});
  ASSERT_EQ(cross.cells.size(), 2u);
  EXPECT_NEAR(cross.row_mean.at("srcA"), (cross.cells[0].dsc + cross.cells[1].dsc) / 2.0, 1e-12);
}

TEST(EvalMatrix, ThreeSourcesGiveSixCrossCells) {
  std::vector<std::pair<std::string, std::vector<CaseEval>>> per_model;
  Rng rng(9);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::vector<std::string> srcs{"srcA", "srcB", "srcC"};
  for (const auto& train : srcs) {
    std::vector<CaseEval> rows;
    for (const auto& test : srcs) {
      if (test == train) continue;
      for (int i = 0; i < 5; ++i) rows.push_back({test, test + std::to_string(i), u(rng), 0, 0.0});
    }
    per_model.emplace_back(train, rows);
  }
  const auto m = assemble_matrix(per_model);
  ASSERT_EQ(m.cells.size(), 6u);
  for (const auto& [train, rows] : per_model) {
    double sum = 0.0;
    int n = 0;
    for (const auto& c : m.cells)
      if (c.train_source == train) {
        double cell = 0.0;
        int k = 0;
        for (const auto& r : rows)
          if (r.source == c.test_source) cell += r.dsc, ++k;
        ASSERT_NEAR(c.dsc, cell / k, 1e-12);
        sum += c.dsc;
        ++n;
      }
    EXPECT_NEAR(m.row_mean.at(train), sum / n, 1e-9);
  }
  const auto csv = eval_matrix_csv(m);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 6 + 3);
}

TEST(Ablation, FourVariantFlagSets) {
  const auto& v = ablation_variants();
  ASSERT_EQ(v.size(), 4u);
  std::set<std::pair<bool, bool>> flags;
  for (const auto& x : v) flags.insert({x.contrast, x.lis});
  EXPECT_EQ(flags.size(), 4u);
  EXPECT_EQ(v[0].name, "BL");
  EXPECT_FALSE(v[0].contrast || v[0].lis);
  EXPECT_TRUE(v[3].contrast && v[3].lis);
}

TEST(Ablation, TinyEndToEndWritesReportsAndReusesRuns) {
  const auto out = scratch("ablate");
  auto cfg = tiny();
  cfg.lis.epochs = 1;
  AblationOptions opt;
  opt.seeds = {0};
  const auto recs = ablate(out, dataset("srcA"), {dataset("srcB")}, cfg, opt);
  // 4 variants x (1 val + 4 unseen) cases.
  EXPECT_EQ(recs.size(), 4u * (dataset("srcA").split("val").size() + dataset("srcB").cases.size()));
  write_ablation_reports(out, recs, "srcA");
  for (const char* f : {"ablation.csv", "uncertainty.csv", "eval_matrix.csv"}) EXPECT_TRUE(fs::exists(out / "reports" / f));
  const auto abl = slurp(out / "reports" / "ablation.csv");
  EXPECT_NE(abl.find("unc_count_mean"), std::string::npos);
  for (const auto& v : ablation_variants()) {
    const RunDir r{variant_dir(out, 0, v)};
    EXPECT_TRUE(fs::exists(r.config()));
    EXPECT_TRUE(fs::exists(r.losses()));
    EXPECT_EQ(checkpoint_exists(r.checkpoint(kLisCkpt)), v.lis);
    EXPECT_EQ(read_config(r.config()).gfs.contrast, v.contrast);
    for (const char* f : {"eval_matrix.csv", "uncertainty.csv"}) EXPECT_TRUE(fs::exists(r.reports() / f));
  }
  // Both stage-one variants share the localizer.
  EXPECT_EQ(slurp(RunDir{variant_dir(out, 0, ablation_variants()[0])}.checkpoint(kCoarseCkpt) / "encoder.level0.conv1.weight.f32").size() > 0, true);
  const auto stamp = fs::last_write_time(RunDir{variant_dir(out, 0, ablation_variants()[3])}.checkpoint(kLisCkpt) / "manifest.json");
  const auto again = ablate(out, dataset("srcA"), {dataset("srcB")}, cfg, opt);
  EXPECT_EQ(fs::last_write_time(RunDir{variant_dir(out, 0, ablation_variants()[3])}.checkpoint(kLisCkpt) / "manifest.json"), stamp);
  ASSERT_EQ(again.size(), recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) EXPECT_NEAR(again[i].eval.dsc, recs[i].eval.dsc, 1e-9);
  EXPECT_THROW(ablate(out, dataset("srcA"), {dataset("srcA")}, cfg, opt), Error);
}

TEST(Sweep, RowsPerValueAndValidation) {
  const auto& m = dataset("srcA");
  const RunDir run{scratch("sweep_run")};
  auto cfg = tiny();
  run_train_gfs(run, {m}, cfg, false);
  cfg.lis.epochs = 1;
  run_train_lis(run, {m}, cfg, false);
  Models models = load_models(run, true);
  const auto rows = sweep(models, {dataset("srcB")}, "t", {0.1, 0.01, 0.001, 0.0001});
  ASSERT_EQ(rows.size(), 4u);
  const auto csv = sweep_csv(rows);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "param,value,dsc_srcB,mean_dsc");
  for (const auto& r : rows) {
    EXPECT_GE(r.mean, 0.0);
    EXPECT_LE(r.mean, 1.0);
  }
  const auto ks = sweep(models, {dataset("srcB")}, "k", {3, 4, 5, 6, 7, 8});
  EXPECT_EQ(ks.size(), 6u);
  EXPECT_GE(sweep_spread(ks), 0.0);
  EXPECT_THROW(sweep(models, {dataset("srcB")}, "lambda", {1}), Error);
  EXPECT_THROW(sweep(models, {dataset("srcB")}, "k", {9}), Error);
  EXPECT_THROW(sweep(models, {dataset("srcB")}, "t", {0.0}), Error);
}

TEST(Report, PngPlotsAreWritten) {
  const auto dir = scratch("report");
  const RunDir run{dir};
  fs::create_directories(run.losses().parent_path());
  std::vector<LossRow> rows;
  for (int e = 0; e < 5; ++e) rows.push_back(LossRow{"gfs", e, e, 1e-4, std::nan(""), 1.0 / (e + 1), 0.5});
  write_stage_losses(run.losses(), "gfs", rows);
  const auto png = report_run(run);
  const auto bytes = read_file_bytes(png);
  ASSERT_GT(bytes.size(), 24u);
  EXPECT_EQ(std::to_integer<int>(bytes[1]), 'P');
  EXPECT_EQ(std::to_integer<int>(bytes[2]), 'N');
  // IHDR width, big-endian at offset 16.
  const int w = (std::to_integer<int>(bytes[18]) << 8) | std::to_integer<int>(bytes[19]);
  EXPECT_EQ(w, 640);
  const auto c = plot_bars({{0.5, 1.0}, {0.25}});
  EXPECT_NE(c.at(60, c.height() - 32), (Rgb{255, 255, 255}));
  EXPECT_THROW(report_run(RunDir{scratch("report_missing")}), Error);
}

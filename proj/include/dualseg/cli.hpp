#pragma once

// Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime error.

#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>
#include <torch/torch.h>

#include "dualseg/report.hpp"

namespace dualseg {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/// Caps intra-op parallelism from DUALSEG_THREADS when set.
inline void apply_thread_env() {
  if (const char* v = std::getenv("DUALSEG_THREADS")) {
    const int n = std::atoi(v);
    if (n >= 1) torch::set_num_threads(n);
  }
}

inline std::vector<Manifest> read_manifests(const std::vector<std::string>& dirs) {
  std::vector<Manifest> out;
  for (const auto& d : dirs) out.push_back(read_manifest(d));
  return out;
}

inline std::vector<double> parse_values(const std::string& text) {
  std::vector<double> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw CLI::ValidationError("--values", "'" + item + "' is not a number");
    }
  }
  if (out.empty()) throw CLI::ValidationError("--values", "empty list");
  return out;
}

inline void refuse_existing(const fs::path& p, bool force) {
  if (fs::exists(p) && !force) throw Error(Errc::precondition, p.string() + " already exists; pass --force to overwrite");
}

inline int run_cli(int argc, char** argv) {
  CLI::App app{"Two-stage single-source generalizable 3D organ segmentation"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");
  bool force = false;
  std::uint64_t seed = 0;
  bool seed_given = false;

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic single-source dataset");
  std::string style;
  int n_cases = 0;
  double val_fraction = 0.2;
  std::string gen_out;
  gen->add_option("--style", style, "Source style (srcA, srcB, srcC)")->required();
  gen->add_option("--n", n_cases, "Number of volumes")->required()->check(CLI::NonNegativeNumber);
  gen->add_option("--seed", seed, "Master seed");
  gen->add_option("--val-fraction", val_fraction, "Fraction held out as validation")->check(CLI::Range(0.0, 0.99));
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_flag("--force", force, "Overwrite an existing dataset");

  // skeletonize
  auto* skel = app.add_subcommand("skeletonize", "Thin a binary mask to its centreline");
  std::string skel_in, skel_out;
  int dilate_r = 0;
  skel->add_option("--in", skel_in, "Input mask (DSV)")->required()->check(CLI::ExistingFile);
  skel->add_option("--out", skel_out, "Output mask (DSV)")->required();
  skel->add_option("--dilate", dilate_r, "Dilate the skeleton by this radius inside the mask (0 = raw skeleton)")
      ->check(CLI::NonNegativeNumber);
  skel->add_flag("--force", force, "Overwrite the output");

  // train
  auto* train = app.add_subcommand("train", "Train one stage into a run directory");
  std::string stage, run_dir, config_path;
  std::vector<std::string> data_dirs, overrides;
  train->add_option("--stage", stage, "gfs or lis")->required()->check(CLI::IsMember({"gfs", "lis"}));
  train->add_option("--data", data_dirs, "Dataset directory (single source; repeatable)")->required();
  train->add_option("--out", run_dir, "Run directory")->required();
  train->add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
  train->add_option("--set", overrides, "Config override key.path=value (repeatable)");
  train->add_option("--seed", seed, "Seed for all randomness");
  train->add_flag("--force", force, "Retrain even if the stage's checkpoint exists");

  // infer
  auto* inf = app.add_subcommand("infer", "Segment one raw volume");
  std::string inf_in, inf_out, inf_unc, inf_label;
  bool stage1_only = false;
  InferOptions iopt;
  inf->add_option("--run", run_dir, "Trained run directory")->required()->check(CLI::ExistingDirectory);
  inf->add_option("--in", inf_in, "Raw volume (DSV)")->required()->check(CLI::ExistingFile);
  inf->add_option("--out", inf_out, "Output mask (DSV)")->required();
  inf->add_option("--unc-out", inf_unc, "Optional uncertainty map output (DSV)");
  inf->add_option("--label", inf_label, "Ground-truth mask, needed for oracle localization")->check(CLI::ExistingFile);
  inf->add_option("--t", iopt.t, "Test-time uncertainty threshold")->check(CLI::PositiveNumber);
  inf->add_option("--k", iopt.k, "Flip views in the ensemble")->check(CLI::Range(1, 8));
  inf->add_flag("--stage1-only", stage1_only, "Skip the restoration-stage network");
  inf->add_flag("--force", force, "Overwrite outputs");

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate runs across sources (train/test matrix)");
  std::vector<std::string> eval_runs;
  std::string eval_out;
  ev->add_option("--run", eval_runs, "Run directory (repeatable, one per training source)")->required();
  ev->add_option("--data", data_dirs, "Dataset directory (repeatable)")->required();
  ev->add_option("--out", eval_out, "Report directory (default: first run's reports/)");
  ev->add_option("--k", iopt.k, "Flip views in the ensemble")->check(CLI::Range(1, 8));
  ev->add_flag("--stage1-only", stage1_only, "Evaluate stage one only");
  ev->add_flag("--force", force, "Overwrite an existing report");

  // ablate
  auto* abl = app.add_subcommand("ablate", "Train and evaluate BL, BL+GFS, BL+LIS and the full model");
  std::string train_dir, abl_out, seeds_text = "0,1,2";
  std::vector<std::string> test_dirs;
  abl->add_option("--train", train_dir, "Training source dataset")->required()->check(CLI::ExistingDirectory);
  abl->add_option("--test", test_dirs, "Unseen-source dataset (repeatable)")->required();
  abl->add_option("--out", abl_out, "Ablation directory")->required();
  abl->add_option("--seeds", seeds_text, "Comma-separated seeds");
  abl->add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
  abl->add_option("--set", overrides, "Config override key.path=value (repeatable)");
  abl->add_flag("--force", force, "Retrain and re-evaluate every variant");

  // sweep
  auto* sw = app.add_subcommand("sweep", "Sweep the test threshold t or the view count K");
  std::string param, values_text, sweep_out;
  sw->add_option("--run", run_dir, "Run directory with both stages")->required()->check(CLI::ExistingDirectory);
  sw->add_option("--data", data_dirs, "Test dataset (repeatable)")->required();
  sw->add_option("--param", param, "t or k")->required()->check(CLI::IsMember({"t", "k", "K"}));
  sw->add_option("--values", values_text, "Comma-separated values")->required();
  sw->add_option("--out", sweep_out, "Output CSV (default: <run>/reports/sweep_<param>.csv)");
  sw->add_flag("--force", force, "Overwrite the output");

  // report
  auto* rep = app.add_subcommand("report", "Render PNG plots from a run or an ablation");
  std::string rep_run, rep_abl;
  rep->add_option("--run", rep_run, "Run directory (loss curves)");
  rep->add_option("--ablation", rep_abl, "Ablation directory (DSC bars)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }
  for (const auto* sc : {train, gen}) {
    if (sc->count("--seed")) seed_given = true;
  }

  apply_thread_env();
  try {
    if (*gen) {
      refuse_existing(fs::path(gen_out) / kManifestName, force);
      const auto m = gen_dataset(n_cases, default_style(style), gen_out, seed, {}, val_fraction);
      std::cout << "wrote " << m.cases.size() << " cases to " << gen_out << "\n";
    } else if (*skel) {
      refuse_existing(skel_out, force);
      Spacing sp;
      const Mask m = read_mask(skel_in, &sp);
      const Mask s = dilate_r > 0 ? centerline_mask(m, dilate_r) : skeletonize3d(m);
      write_mask(s, sp, skel_out);
      std::cout << count(s) << " voxels\n";
    } else if (*train) {
      auto ov = overrides;
      ov.push_back("stage=\"" + stage + "\"");
      if (seed_given) ov.push_back("seed=" + std::to_string(seed));
      const TrainConfig cfg = resolve_config(config_path, ov);
      const RunDir run{run_dir};
      const auto data = read_manifests(data_dirs);
      if (stage == "gfs") run_train_gfs(run, data, cfg, force, force);
      else run_train_lis(run, data, cfg, force);
      std::cout << "trained " << stage << " into " << run_dir << "\n";
    } else if (*inf) {
      refuse_existing(inf_out, force);
      if (!inf_unc.empty()) refuse_existing(inf_unc, force);
      Models m = load_models(RunDir{run_dir}, !stage1_only && checkpoint_exists(RunDir{run_dir}.checkpoint(kLisCkpt)));
      const Volume raw = read_volume(inf_in);
      Mask label;
      if (!inf_label.empty()) label = read_mask(inf_label);
      const auto r = infer(m, raw, inf_label.empty() ? nullptr : &label, iopt);
      write_mask(r.mask, raw.spacing, inf_out);
      if (!inf_unc.empty()) write_volume(Volume{r.unc, raw.spacing, IntensityDomain::normalized_unit}, inf_unc);
      std::cout << count(r.mask) << " voxels segmented\n";
    } else if (*ev) {
      const fs::path out = eval_out.empty() ? RunDir{eval_runs.front()}.reports() : fs::path(eval_out);
      refuse_existing(out / "eval_matrix.csv", force);
      std::vector<Models> models;
      for (const auto& r : eval_runs) {
        const RunDir rd{r};
        models.push_back(load_models(rd, !stage1_only && checkpoint_exists(rd.checkpoint(kLisCkpt))));
      }
      std::vector<std::pair<std::string, std::vector<CaseEval>>> per_case;
      const auto mat = eval_matrix(models, read_manifests(data_dirs), iopt, &per_case);
      fs::create_directories(out);
      write_file_atomic(out / "eval_matrix.csv", eval_matrix_csv(mat));
      std::string unc;
      for (const auto& [train_source, rows] : per_case) {
        const auto part = run_uncertainty_csv(train_source, rows);
        unc += unc.empty() ? part : part.substr(part.find('\n') + 1);
      }
      write_file_atomic(out / "uncertainty.csv", unc);
      std::cout << eval_matrix_csv(mat);
    } else if (*abl) {
      const TrainConfig cfg = resolve_config(config_path, overrides);
      AblationOptions opt;
      opt.force = force;
      opt.seeds.clear();
      for (double s : parse_values(seeds_text)) opt.seeds.push_back(static_cast<std::uint64_t>(s));
      const Manifest tr = read_manifest(train_dir);
      const auto recs = ablate(abl_out, tr, read_manifests(test_dirs), cfg, opt);
      write_ablation_reports(abl_out, recs, tr.style);
      report_ablation(fs::path(abl_out) / "reports" / "ablation.csv");
      std::cout << ablation_csv(recs);
    } else if (*sw) {
      const std::string p = param == "K" ? "k" : param;
      const RunDir run{run_dir};
      const fs::path out = sweep_out.empty() ? run.reports() / ("sweep_" + p + ".csv") : fs::path(sweep_out);
      refuse_existing(out, force);
      Models m = load_models(run, checkpoint_exists(run.checkpoint(kLisCkpt)));
      const auto rows = sweep(m, read_manifests(data_dirs), p, parse_values(values_text));
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      write_file_atomic(out, sweep_csv(rows));
      std::cout << sweep_csv(rows);
    } else if (*rep) {
      if (rep_run.empty() && rep_abl.empty()) throw CLI::RequiredError("--run or --ablation");
      if (!rep_run.empty()) std::cout << report_run(RunDir{rep_run}).string() << "\n";
      if (!rep_abl.empty()) std::cout << report_ablation(fs::path(rep_abl) / "reports" / "ablation.csv").string() << "\n";
    }
  } catch (const CLI::Error& e) {
    std::cerr << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace dualseg

#pragma once

// Evaluation and experiment drivers: per-case evaluation, the train/test
// source matrix, the four-variant ablation and the t / K sweeps.

#include <algorithm>
#include <cstdio>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <tuple>

#include "dualseg/infer.hpp"

namespace dualseg {

struct CaseEval {
  std::string source;
  std::string id;
  double dsc = 0.0;
  std::size_t unc_count = 0;
  double unc_sum = 0.0;
};

inline std::string fmt_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

/// Runs inference over `split` of a manifest ("" for every case).
inline std::vector<CaseEval> evaluate_cases(Models& m, const Manifest& data, const std::string& split,
                                            const InferOptions& opt = {}) {
  std::vector<CaseEval> out;
  for (const auto& e : data.cases) {
    if (!split.empty() && e.split != split) continue;
    const LoadedCase lc = load_case(data, e);
    const InferResult r = infer(m, lc.raw, &lc.label, opt);
    const auto tally = tally_uncertainty(r.unc, opt.t);
    out.push_back({data.style, e.id, dsc(r.mask, lc.label), tally.count, tally.sum});
  }
  return out;
}

inline constexpr const char* kCaseEvalHeader = "source,case_id,dsc,unc_count,unc_sum";

inline std::string case_evals_csv(const std::vector<CaseEval>& rows) {
  std::string s = std::string(kCaseEvalHeader) + "\n";
  for (const auto& r : rows) {
    s += r.source + "," + r.id + "," + fmt_num(r.dsc) + "," + std::to_string(r.unc_count) + "," + fmt_num(r.unc_sum) + "\n";
  }
  return s;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> f;
  std::string cur;
  std::istringstream in(line);
  while (std::getline(in, cur, ',')) f.push_back(cur);
  if (!line.empty() && line.back() == ',') f.emplace_back();
  return f;
}

inline std::vector<CaseEval> read_case_evals(const fs::path& path) {
  std::istringstream in(read_file_text(path));
  std::string line;
  std::getline(in, line);
  if (line != kCaseEvalHeader) throw Error(Errc::format, path.string() + ": unexpected header");
  std::vector<CaseEval> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 5) throw Error(Errc::format, path.string() + ": bad row '" + line + "'");
    out.push_back({f[0], f[1], std::stod(f[2]), static_cast<std::size_t>(std::stoull(f[3])), std::stod(f[4])});
  }
  return out;
}

struct SourceSummary {
  std::size_t n = 0;
  double dsc = 0.0;
  double unc_count = 0.0;
  double unc_sum = 0.0;
};

/// Per-source means, ordered by source name.
inline std::map<std::string, SourceSummary> summarize(const std::vector<CaseEval>& rows) {
  std::map<std::string, SourceSummary> out;
  for (const auto& r : rows) {
    auto& s = out[r.source];
    ++s.n;
    s.dsc += r.dsc;
    s.unc_count += static_cast<double>(r.unc_count);
    s.unc_sum += r.unc_sum;
  }
  for (auto& [k, s] : out) {
    s.dsc /= double(s.n);
    s.unc_count /= double(s.n);
    s.unc_sum /= double(s.n);
  }
  return out;
}

struct MatrixCell {
  std::string train_source;
  std::string test_source;
  double dsc = 0.0;
  std::size_t n = 0;
};

struct EvalMatrix {
  std::vector<MatrixCell> cells;
  std::map<std::string, double> row_mean;  // per train source
};

/// Groups per-case results into (train source, test source) cells with
/// per-row means over the cells.
inline EvalMatrix assemble_matrix(const std::vector<std::pair<std::string, std::vector<CaseEval>>>& per_model) {
  EvalMatrix m;
  for (const auto& [train, rows] : per_model) {
    double sum = 0.0;
    std::size_t cells = 0;
    for (const auto& [test, s] : summarize(rows)) {
      m.cells.push_back({train, test, s.dsc, s.n});
      sum += s.dsc;
      ++cells;
    }
    if (cells) m.row_mean[train] = sum / double(cells);
  }
  return m;
}

inline std::string eval_matrix_csv(const EvalMatrix& m) {
  std::string s = "train_source,test_source,dsc,n_cases\n";
  for (const auto& c : m.cells) s += c.train_source + "," + c.test_source + "," + fmt_num(c.dsc) + "," + std::to_string(c.n) + "\n";
  for (const auto& [train, mean] : m.row_mean) s += train + ",mean," + fmt_num(mean) + ",\n";
  return s;
}

/// Evaluates each trained model on every other source; a model whose source
/// is the only one given is evaluated on that source's validation split.
inline EvalMatrix eval_matrix(std::vector<Models>& models, const std::vector<Manifest>& sources,
                              const InferOptions& opt = {},
                              std::vector<std::pair<std::string, std::vector<CaseEval>>>* per_case = nullptr) {
  std::vector<std::pair<std::string, std::vector<CaseEval>>> per_model;
  for (auto& m : models) {
    std::vector<CaseEval> rows;
    bool any_other = false;
    for (const auto& src : sources) {
      if (src.style == m.source) continue;
      any_other = true;
      auto r = evaluate_cases(m, src, "", opt);
      rows.insert(rows.end(), r.begin(), r.end());
    }
    if (!any_other) {
      for (const auto& src : sources) {
        auto r = evaluate_cases(m, src, "val", opt);
        rows.insert(rows.end(), r.begin(), r.end());
      }
    }
    per_model.emplace_back(m.source, std::move(rows));
  }
  if (per_case) *per_case = per_model;
  return assemble_matrix(per_model);
}

struct Variant {
  std::string name;  // report label
  std::string dir;   // run directory name
  bool contrast;
  bool lis;
};

inline const std::array<Variant, 4>& ablation_variants() {
  static const std::array<Variant, 4> v{{
      {"BL", "bl", false, false},
      {"BL+GFS", "bl_gfs", true, false},
      {"BL+LIS", "bl_lis", false, true},
      {"Ours", "ours", true, true},
  }};
  return v;
}

struct AblationRecord {
  std::string variant;
  std::uint64_t seed = 0;
  CaseEval eval;
};

inline void copy_checkpoint(const RunDir& from, const RunDir& to, const std::string& name) {
  const auto src = from.checkpoint(name);
  if (!checkpoint_exists(src)) return;
  const auto dst = to.checkpoint(name);
  fs::create_directories(to.checkpoints());
  fs::remove_all(dst);
  fs::copy(src, dst, fs::copy_options::recursive);
}

/// Trains one variant into `run` unless its final checkpoint already exists.
/// Stage-two variants start from a copy of the matching stage-one run.
inline void train_variant(const Variant& v, const RunDir& run, const RunDir& stage1_run, const Manifest& train,
                          TrainConfig cfg, bool force, bool retrain_coarse) {
  cfg.gfs.contrast = v.contrast;
  if (!v.lis) {
    cfg.stage = "gfs";
    if (!force && checkpoint_exists(run.checkpoint(kGfsCkpt))) return;
    run_train_gfs(run, {train}, cfg, true, retrain_coarse);
    return;
  }
  cfg.stage = "lis";
  if (!force && checkpoint_exists(run.checkpoint(kLisCkpt))) return;
  copy_checkpoint(stage1_run, run, kCoarseCkpt);
  copy_checkpoint(stage1_run, run, kGfsCkpt);
  fs::create_directories(run.losses().parent_path());
  if (fs::exists(stage1_run.losses())) fs::copy_file(stage1_run.losses(), run.losses(), fs::copy_options::overwrite_existing);
  run_train_lis(run, {train}, cfg, true);
}

inline std::string run_uncertainty_csv(const std::string& train_source, const std::vector<CaseEval>& rows) {
  std::string s = "train_source,test_source,case_id,unc_count,unc_sum,dsc\n";
  for (const auto& r : rows) {
    s += train_source + "," + r.source + "," + r.id + "," + std::to_string(r.unc_count) + "," + fmt_num(r.unc_sum) +
         "," + fmt_num(r.dsc) + "\n";
  }
  return s;
}

/// Writes a run's evaluation reports: per-case cache, source matrix and
/// per-volume uncertainty counts.
inline void write_run_reports(const RunDir& run, const std::string& train_source, const std::vector<CaseEval>& rows) {
  fs::create_directories(run.reports());
  write_file_atomic(run.reports() / "eval_cases.csv", case_evals_csv(rows));
  write_file_atomic(run.reports() / "eval_matrix.csv", eval_matrix_csv(assemble_matrix({{train_source, rows}})));
  write_file_atomic(run.reports() / "uncertainty.csv", run_uncertainty_csv(train_source, rows));
}

/// Per-case evaluation of a run on the unseen sources plus the training
/// source's validation split, cached in the run's reports directory.
inline std::vector<CaseEval> evaluate_run(const RunDir& run, bool with_lis, const Manifest& train,
                                          const std::vector<Manifest>& tests, const InferOptions& opt, bool force) {
  const auto cache = run.reports() / "eval_cases.csv";
  if (!force && fs::exists(cache)) return read_case_evals(cache);
  Models m = load_models(run, with_lis);
  std::vector<CaseEval> rows = evaluate_cases(m, train, "val", opt);
  for (const auto& t : tests) {
    auto r = evaluate_cases(m, t, "", opt);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  write_run_reports(run, train.style, rows);
  return rows;
}

struct AblationOptions {
  std::vector<std::uint64_t> seeds{0, 1, 2};
  bool force = false;
  InferOptions infer;
};

inline fs::path variant_dir(const fs::path& out, std::uint64_t seed, const Variant& v) {
  return out / ("seed_" + std::to_string(seed)) / v.dir;
}

/// Trains and evaluates all four variants per seed. Returns per-case records.
inline std::vector<AblationRecord> ablate(const fs::path& out, const Manifest& train, const std::vector<Manifest>& tests,
                                          const TrainConfig& cfg, const AblationOptions& opt) {
  for (const auto& t : tests) {
    if (t.style == train.style) throw Error(Errc::config, "test source '" + t.style + "' equals the training source");
  }
  fs::create_directories(out);
  write_config(cfg, out / "config.json");
  std::vector<AblationRecord> records;
  for (std::uint64_t seed : opt.seeds) {
    TrainConfig c = cfg;
    c.seed = seed;
    const auto& vs = ablation_variants();
    // Stage-one variants share one localizer so every variant sees the same crops.
    const RunDir bl{variant_dir(out, seed, vs[0])}, gfs{variant_dir(out, seed, vs[1])};
    for (const auto& v : vs) {
      const RunDir run{variant_dir(out, seed, v)};
      log::info("seed ", seed, " variant ", v.name);
      if (&v == &vs[1]) copy_checkpoint(bl, run, kCoarseCkpt);
      train_variant(v, run, v.contrast ? gfs : bl, train, c, opt.force, opt.force && &v == &vs[0]);
      for (auto& e : evaluate_run(run, v.lis, train, tests, opt.infer, opt.force)) records.push_back({v.name, seed, e});
    }
  }
  return records;
}

struct VariantSourceMean {
  std::string variant;
  std::string source;
  double dsc = 0.0;
  double unc_count = 0.0;
  double unc_sum = 0.0;
  std::size_t n_seeds = 0;
};

/// Seed-averaged per-source means (each seed's per-source mean weighted equally).
inline std::vector<VariantSourceMean> seed_means(const std::vector<AblationRecord>& recs) {
  std::map<std::pair<std::string, std::string>, std::map<std::uint64_t, std::vector<CaseEval>>> groups;
  for (const auto& r : recs) groups[{r.variant, r.eval.source}][r.seed].push_back(r.eval);
  std::vector<VariantSourceMean> out;
  for (const auto& [key, by_seed] : groups) {
    VariantSourceMean m{key.first, key.second};
    for (const auto& [seed, rows] : by_seed) {
      const auto s = summarize(rows).at(key.second);
      m.dsc += s.dsc;
      m.unc_count += s.unc_count;
      m.unc_sum += s.unc_sum;
    }
    m.n_seeds = by_seed.size();
    m.dsc /= double(m.n_seeds);
    m.unc_count /= double(m.n_seeds);
    m.unc_sum /= double(m.n_seeds);
    out.push_back(m);
  }
  return out;
}

/// Mean over the given sources of the seed-averaged means of one variant.
inline VariantSourceMean pooled_mean(const std::vector<VariantSourceMean>& means, const std::string& variant,
                                     const std::set<std::string>& sources) {
  VariantSourceMean p{variant, "pooled"};
  std::size_t n = 0;
  for (const auto& m : means) {
    if (m.variant != variant || !sources.contains(m.source)) continue;
    p.dsc += m.dsc;
    p.unc_count += m.unc_count;
    p.unc_sum += m.unc_sum;
    ++n;
  }
  if (n == 0) throw Error(Errc::empty_input, "no results for variant " + variant);
  p.dsc /= double(n);
  p.unc_count /= double(n);
  p.unc_sum /= double(n);
  p.n_seeds = n;
  return p;
}

inline std::string ablation_csv(const std::vector<AblationRecord>& recs) {
  std::map<std::tuple<std::string, std::uint64_t, std::string>, std::vector<CaseEval>> groups;
  for (const auto& r : recs) groups[{r.variant, r.seed, r.eval.source}].push_back(r.eval);
  std::string s = "variant,seed,test_source,n_cases,dsc_mean,unc_count_mean,unc_sum_mean\n";
  for (const auto& [k, rows] : groups) {
    const auto sm = summarize(rows).at(std::get<2>(k));
    s += std::get<0>(k) + "," + std::to_string(std::get<1>(k)) + "," + std::get<2>(k) + "," + std::to_string(sm.n) +
         "," + fmt_num(sm.dsc) + "," + fmt_num(sm.unc_count) + "," + fmt_num(sm.unc_sum) + "\n";
  }
  for (const auto& m : seed_means(recs)) {
    s += m.variant + ",mean," + m.source + ",," + fmt_num(m.dsc) + "," + fmt_num(m.unc_count) + "," + fmt_num(m.unc_sum) + "\n";
  }
  return s;
}

/// Voxels above the test threshold, per volume (the uncertainty-pixel table).
inline std::string uncertainty_csv(const std::vector<AblationRecord>& recs) {
  std::string s = "variant,seed,test_source,case_id,unc_count,unc_sum,dsc\n";
  for (const auto& r : recs) {
    s += r.variant + "," + std::to_string(r.seed) + "," + r.eval.source + "," + r.eval.id + "," +
         std::to_string(r.eval.unc_count) + "," + fmt_num(r.eval.unc_sum) + "," + fmt_num(r.eval.dsc) + "\n";
  }
  return s;
}

/// Train-source by test-source grid per variant, seed-averaged.
inline std::string ablation_matrix_csv(const std::vector<AblationRecord>& recs, const std::string& train_source) {
  std::string s = "variant,train_source,test_source,dsc\n";
  std::map<std::string, std::pair<double, int>> row;
  for (const auto& m : seed_means(recs)) {
    if (m.source == train_source) continue;
    s += m.variant + "," + train_source + "," + m.source + "," + fmt_num(m.dsc) + "\n";
    row[m.variant].first += m.dsc;
    row[m.variant].second += 1;
  }
  for (const auto& [v, acc] : row) s += v + "," + train_source + ",mean," + fmt_num(acc.first / acc.second) + "\n";
  return s;
}

inline void write_ablation_reports(const fs::path& out, const std::vector<AblationRecord>& recs,
                                   const std::string& train_source) {
  const fs::path reports = out / "reports";
  fs::create_directories(reports);
  write_file_atomic(reports / "ablation.csv", ablation_csv(recs));
  write_file_atomic(reports / "uncertainty.csv", uncertainty_csv(recs));
  write_file_atomic(reports / "eval_matrix.csv", ablation_matrix_csv(recs, train_source));
}

struct SweepRow {
  std::string param;
  double value = 0.0;
  std::map<std::string, double> dsc;  // per test source
  double mean = 0.0;
};

/// Re-evaluates one model while varying the test threshold t or the view
/// count K. Stage-one views are computed once per case.
inline std::vector<SweepRow> sweep(Models& m, const std::vector<Manifest>& tests, const std::string& param,
                                   const std::vector<double>& values, const InferOptions& base = {}) {
  if (param != "t" && param != "k") throw Error(Errc::config, "sweep parameter must be 't' or 'k'");
  if (values.empty()) throw Error(Errc::empty_input, "sweep needs at least one value");
  for (double v : values) {
    if (param == "t" && !(v > 0.0)) throw Error(Errc::invalid_parameter, "sweep t values must be > 0");
    if (param == "k" && (v < 1 || v > 8 || v != std::floor(v))) {
      throw Error(Errc::invalid_parameter, "sweep k values must be integers in [1, 8]");
    }
  }
  std::vector<SweepRow> rows;
  for (double v : values) rows.push_back({param, v});
  std::map<std::string, std::vector<std::vector<double>>> scores;  // source -> value index -> per-case dsc
  for (const auto& src : tests) {
    auto& per_value = scores[src.style];
    per_value.resize(values.size());
    for (const auto& e : src.cases) {
      const LoadedCase lc = load_case(src, e);
      const Stage1Views views = stage1_views(m, lc.raw, &lc.label, 8);
      for (std::size_t i = 0; i < values.size(); ++i) {
        InferOptions o = base;
        o.final_uncertainty = false;
        if (param == "t") o.t = values[i];
        else o.k = static_cast<int>(values[i]);
        const auto r = infer_from_views(m, views, lc.raw.voxels.shape(), o);
        per_value[i].push_back(dsc(r.mask, lc.label));
      }
    }
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    double total = 0.0;
    for (const auto& [src, per_value] : scores) {
      const auto& v = per_value[i];
      const double mean = v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
      rows[i].dsc[src] = mean;
      total += mean;
    }
    rows[i].mean = scores.empty() ? 0.0 : total / double(scores.size());
  }
  return rows;
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  if (rows.empty()) return "param,value,mean_dsc\n";
  std::string s = "param,value";
  for (const auto& [src, v] : rows.front().dsc) s += ",dsc_" + src;
  s += ",mean_dsc\n";
  for (const auto& r : rows) {
    s += r.param + "," + fmt_num(r.value);
    for (const auto& [src, v] : r.dsc) s += "," + fmt_num(v);
    s += "," + fmt_num(r.mean) + "\n";
  }
  return s;
}

inline double sweep_spread(const std::vector<SweepRow>& rows) {
  if (rows.empty()) return 0.0;
  const auto [lo, hi] = std::minmax_element(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) {
    return a.mean < b.mean;
  });
  return hi->mean - lo->mean;
}

}  // namespace dualseg

#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include <json.hpp>

#include "dualseg/dsv.hpp"
#include "dualseg/fsutil.hpp"
#include "dualseg/phantom.hpp"

namespace dualseg {

struct CaseEntry {
  std::string id;
  std::string volume;  // relative to the manifest directory
  std::string label;
  std::string split;   // "train" or "val"
  std::uint64_t seed = 0;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CaseEntry, id, volume, label, split, seed)

struct Manifest {
  std::string style;
  std::uint64_t master_seed = 0;
  SourceStyle style_params;
  std::vector<CaseEntry> cases;
  fs::path root;  // directory holding the manifest; not serialized

  std::vector<CaseEntry> split(const std::string& name) const {
    std::vector<CaseEntry> out;
    for (const auto& c : cases)
      if (c.split == name) out.push_back(c);
    return out;
  }
};

inline nlohmann::json manifest_json(const Manifest& m) {
  return {{"style", m.style}, {"master_seed", m.master_seed}, {"style_params", m.style_params}, {"cases", m.cases}};
}

inline constexpr const char* kManifestName = "manifest.json";

inline Manifest read_manifest(const fs::path& path_or_dir) {
  const fs::path path = fs::is_directory(path_or_dir) ? path_or_dir / kManifestName : path_or_dir;
  Manifest m;
  try {
    const auto j = nlohmann::json::parse(read_file_text(path));
    m.style = j.at("style").get<std::string>();
    m.master_seed = j.at("master_seed").get<std::uint64_t>();
    m.style_params = j.contains("style_params") ? j.at("style_params").get<SourceStyle>() : default_style(m.style);
    m.cases = j.at("cases").get<std::vector<CaseEntry>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::format, path.string() + ": " + e.what());
  }
  m.root = path.parent_path();
  return m;
}

struct LoadedCase {
  std::string id;
  Volume raw;
  Mask label;
};

inline LoadedCase load_case(const Manifest& m, const CaseEntry& c) {
  LoadedCase out{c.id, read_volume(m.root / c.volume), read_mask(m.root / c.label)};
  if (out.raw.domain != IntensityDomain::raw_hu) throw Error(Errc::format, c.id + ": volume is not raw HU");
  require_same_shape(out.raw.voxels, out.label, ("case " + c.id).c_str());
  return out;
}

/// Writes `n` phantoms of one style plus a manifest. The last
/// round(n * val_fraction) cases are held out for validation.
inline Manifest gen_dataset(int n, const SourceStyle& style, const fs::path& out_dir, std::uint64_t master_seed,
                            const PhantomSpec& base = {}, double val_fraction = 0.2) {
  if (n < 0) throw Error(Errc::invalid_parameter, "dataset size must be >= 0");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw Error(Errc::invalid_parameter, "val_fraction in [0,1)");
  style.validate();
  Manifest m{style.name, master_seed, style, {}, out_dir};
  const int n_val = static_cast<int>(std::lround(n * val_fraction));
  if (n > 0) fs::create_directories(out_dir);
  for (int i = 0; i < n; ++i) {
    char id[64];
    std::snprintf(id, sizeof id, "%s_%03d", style.name.c_str(), i);
    PhantomSpec spec = base;
    spec.seed = derive_seed(master_seed, static_cast<std::uint64_t>(i));
    const PhantomCase pc = gen_phantom(spec, style);
    CaseEntry e{id, std::string(id) + ".dsv", std::string(id) + "_label.dsv", i >= n - n_val ? "val" : "train",
                spec.seed};
    const nlohmann::json meta{{"id", e.id}, {"style", style.name}, {"seed", spec.seed}, {"lesions", pc.lesions}};
    write_volume(pc.raw, out_dir / e.volume, meta);
    write_mask(pc.label, pc.raw.spacing, out_dir / e.label, meta);
    m.cases.push_back(std::move(e));
  }
  if (n > 0) write_file_atomic(out_dir / kManifestName, manifest_json(m).dump(2));
  return m;
}

}  // namespace dualseg

#pragma once

// Training configuration. Resolution order: built-in defaults, then a JSON
// config file, then dotted key=value overrides. Unknown keys are rejected at
// every layer and the resolved snapshot is what a run persists.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "dualseg/error.hpp"
#include "dualseg/fsutil.hpp"
#include "dualseg/net.hpp"
#include "dualseg/uncertainty.hpp"

namespace dualseg {

struct OptimConfig {
  double lr = 1e-4;
  double weight_decay = 5e-4;
  double poly_power = 0.9;
  bool literal_recursion = false;  // lr_{i+1} = lr_i * (1 - i/max)^p instead of lr_0 * (1 - i/max)^p
};

struct GfsConfig {
  int epochs = 500;
  bool contrast = true;
  double w_con = 1.0;
};

struct LisConfig {
  int epochs = 200;
  double lambda = 0.9;
  double w_adv = 0.01;
  int disc_base = 8;
  bool gate_uncertainty = true;  // feed unc * M(t) instead of the raw uncertainty map
};

struct ContrastConfig {
  double tau = 0.05;
  int patch_h = 3;
  int patch_w = 3;
  int n_cap = 32;
  int ring_radius_min = 10;
  int ring_radius_max = 20;
  double ring_scale = 0.25;  // maps the full-scale radius interval onto the desk grid
  int centerline_radius = 2;
};

struct UncertaintyConfig {
  int k = 8;
  double test_threshold = 0.01;
  double schedule_start = 0.2;
  double schedule_end = 0.001;
  CorruptionLaw corruption;
};

struct AugmentConfig {
  double rotation_deg = 15.0;
  bool flip = true;
  double noise_max = 0.03;  // noise sigma ~ U(0, noise_max) on normalized intensities
};

struct DataConfig {
  int crop_margin = 8;
  std::array<int, 3> patch{32, 32, 32};
  std::string coarse_mode = "learned";  // or "oracle"
  int coarse_factor = 4;
  int coarse_epochs = 30;
  int coarse_base = 4;
  double coarse_lr = 1e-3;
};

struct TrainConfig {
  std::string stage = "gfs";
  std::uint64_t seed = 0;
  BackboneSpec backbone;
  OptimConfig optim;
  GfsConfig gfs;
  LisConfig lis;
  ContrastConfig contrast;
  UncertaintyConfig uncertainty;
  AugmentConfig augment;
  DataConfig data;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CorruptionLaw, lo_min, lo_max, hi_min, hi_max, min_width)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(OptimConfig, lr, weight_decay, poly_power, literal_recursion)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(GfsConfig, epochs, contrast, w_con)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(LisConfig, epochs, lambda, w_adv, disc_base, gate_uncertainty)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ContrastConfig, tau, patch_h, patch_w, n_cap, ring_radius_min,
                                                ring_radius_max, ring_scale, centerline_radius)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(UncertaintyConfig, k, test_threshold, schedule_start, schedule_end,
                                                corruption)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AugmentConfig, rotation_deg, flip, noise_max)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DataConfig, crop_margin, patch, coarse_mode, coarse_factor,
                                                coarse_epochs, coarse_base, coarse_lr)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, stage, seed, backbone, optim, gfs, lis, contrast,
                                                uncertainty, augment, data)

inline void validate(const TrainConfig& c) {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw Error(Errc::config, what);
  };
  require(c.stage == "gfs" || c.stage == "lis", "stage must be 'gfs' or 'lis'");
  c.backbone.validate();
  require(c.gfs.epochs > 0 && c.lis.epochs > 0, "epochs must be > 0");
  require(c.optim.lr > 0.0, "optim.lr must be > 0");
  require(c.optim.weight_decay >= 0.0 && c.optim.poly_power >= 0.0, "optim decay terms must be >= 0");
  require(c.lis.lambda >= 0.0 && c.lis.lambda <= 1.0, "lis.lambda must be in [0, 1]");
  require(c.lis.w_adv >= 0.0 && c.gfs.w_con >= 0.0, "loss weights must be >= 0");
  require(c.contrast.tau > 0.0, "contrast.tau must be > 0");
  require(c.contrast.patch_h >= 1 && c.contrast.patch_w >= 1 && c.contrast.n_cap >= 1, "contrast sizes must be >= 1");
  require(c.contrast.ring_radius_min >= 1 && c.contrast.ring_radius_min <= c.contrast.ring_radius_max,
          "ring radius range must satisfy 1 <= min <= max");
  require(c.contrast.ring_scale > 0.0 && c.contrast.centerline_radius >= 1, "ring_scale > 0 and centerline_radius >= 1");
  require(c.uncertainty.k >= 1 && c.uncertainty.k <= 8, "uncertainty.k must be in [1, 8]");
  require(c.uncertainty.test_threshold > 0.0, "uncertainty.test_threshold must be > 0");
  require(c.uncertainty.schedule_start > 0.0 && c.uncertainty.schedule_end > 0.0, "schedule endpoints must be > 0");
  require(c.augment.rotation_deg >= 0.0 && c.augment.noise_max >= 0.0, "augmentation magnitudes must be >= 0");
  require(c.data.coarse_mode == "learned" || c.data.coarse_mode == "oracle", "data.coarse_mode must be learned|oracle");
  require(c.data.crop_margin >= 0 && c.data.coarse_factor >= 1 && c.data.coarse_epochs >= 1 && c.data.coarse_base >= 1 &&
              c.data.coarse_lr > 0.0,
          "data sizes out of range");
  for (int p : c.data.patch) {
    require(p >= 1 && p % c.backbone.divisor() == 0, "data.patch dims must be positive multiples of 2^(levels-1)");
  }
}

namespace detail {

inline void merge_known(nlohmann::json& base, const nlohmann::json& patch, const std::string& prefix) {
  if (!patch.is_object()) throw Error(Errc::config, "config layer at '" + prefix + "' must be an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key)) throw Error(Errc::config, "unknown config key '" + path + "'");
    if (base[key].is_object()) merge_known(base[key], value, path);
    else base[key] = value;
  }
}

inline nlohmann::json parse_override_value(const std::string& text) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    return text;  // bare strings such as stage=lis
  }
}

}  // namespace detail

/// Applies `key.path=value` overrides to a JSON config.
inline void apply_overrides(nlohmann::json& j, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw Error(Errc::config, "override '" + o + "' is not key=value");
    const std::string key = o.substr(0, eq);
    nlohmann::json* node = &j;
    std::size_t start = 0;
    while (true) {
      const auto dot = key.find('.', start);
      const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (!node->is_object() || !node->contains(part)) throw Error(Errc::config, "unknown config key '" + key + "'");
      node = &(*node)[part];
      if (dot == std::string::npos) break;
      start = dot + 1;
    }
    if (node->is_object()) throw Error(Errc::config, "override '" + key + "' names a section, not a value");
    *node = detail::parse_override_value(o.substr(eq + 1));
  }
}

inline TrainConfig config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c = j.get<TrainConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::config, std::string("config type error: ") + e.what());
  }
  validate(c);
  return c;
}

/// defaults < config file (optional) < overrides.
inline TrainConfig resolve_config(const fs::path& config_file, const std::vector<std::string>& overrides) {
  nlohmann::json j = TrainConfig{};
  if (!config_file.empty()) {
    nlohmann::json file;
    try {
      file = nlohmann::json::parse(read_file_text(config_file));
    } catch (const nlohmann::json::exception& e) {
      throw Error(Errc::config, config_file.string() + ": " + e.what());
    }
    detail::merge_known(j, file, "");
  }
  apply_overrides(j, overrides);
  return config_from_json(j);
}

inline void write_config(const TrainConfig& c, const fs::path& path) {
  write_file_atomic(path, nlohmann::json(c).dump(2) + "\n");
}

inline TrainConfig read_config(const fs::path& path) {
  try {
    return config_from_json(nlohmann::json::parse(read_file_text(path)));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::config, path.string() + ": " + e.what());
  }
}

/// Ring radius bounds after scaling to the desk grid, at least 1.
inline std::array<int, 2> scaled_ring_radii(const ContrastConfig& c) {
  const int lo = std::max(1, static_cast<int>(std::lround(c.ring_radius_min * c.ring_scale)));
  const int hi = std::max(lo, static_cast<int>(std::lround(c.ring_radius_max * c.ring_scale)));
  return {lo, hi};
}

}  // namespace dualseg

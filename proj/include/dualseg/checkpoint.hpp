#pragma once

// Checkpoint directory: manifest.json plus one raw little-endian f32 blob per
// parameter or buffer, named by the module's dotted path.

#include <bit>
#include <cstring>
#include <map>
#include <sstream>
#include <string>

#include <json.hpp>
#include <torch/torch.h>

#include "dualseg/error.hpp"
#include "dualseg/fsutil.hpp"
#include "dualseg/rng.hpp"

namespace dualseg {

inline constexpr const char* kCheckpointFormat = "dualseg-checkpoint-1";

inline std::string rng_state(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline void restore_rng(Rng& rng, const std::string& state) {
  std::istringstream is(state);
  is >> rng;
  if (!is) throw Error(Errc::format, "malformed rng state");
}

namespace detail {

inline std::map<std::string, torch::Tensor> named_state(torch::nn::Module& m) {
  std::map<std::string, torch::Tensor> out;
  for (const auto& p : m.named_parameters(true)) out.emplace(p.key(), p.value());
  for (const auto& b : m.named_buffers(true)) out.emplace(b.key(), b.value());
  return out;
}

inline std::vector<std::byte> tensor_bytes(const torch::Tensor& t) {
  const auto c = t.detach().to(torch::kFloat32).contiguous();
  std::vector<std::byte> out(static_cast<std::size_t>(c.numel()) * 4);
  std::memcpy(out.data(), c.data_ptr<float>(), out.size());
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < out.size(); i += 4) std::reverse(out.begin() + i, out.begin() + i + 4);
  }
  return out;
}

}  // namespace detail

/// Writes the checkpoint into `<dir>.tmp` and renames it over `dir`.
inline void save_checkpoint(torch::nn::Module& m, const fs::path& dir, const nlohmann::json& meta) {
  fs::path tmp = dir;
  tmp += ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, t] : detail::named_state(m)) {
    const std::string file = name + ".f32";
    write_file_atomic(tmp / file, detail::tensor_bytes(t));
    tensors.push_back({{"name", name}, {"file", file}, {"shape", t.sizes().vec()}});
  }
  const nlohmann::json manifest{{"format", kCheckpointFormat}, {"meta", meta}, {"tensors", tensors}};
  write_file_atomic(tmp / "manifest.json", manifest.dump(2));
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

inline bool checkpoint_exists(const fs::path& dir) { return fs::is_regular_file(dir / "manifest.json"); }

/// Stored metadata without loading any tensors.
inline nlohmann::json read_checkpoint_meta(const fs::path& dir) {
  if (!checkpoint_exists(dir)) throw Error(Errc::dependency, "missing checkpoint " + dir.string());
  try {
    return nlohmann::json::parse(read_file_text(dir / "manifest.json")).at("meta");
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::format, dir.string() + ": " + e.what());
  }
}

/// Loads values into an identically structured module; returns the stored metadata.
inline nlohmann::json load_checkpoint(torch::nn::Module& m, const fs::path& dir) {
  if (!checkpoint_exists(dir)) throw Error(Errc::dependency, "missing checkpoint " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file_text(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::format, dir.string() + ": " + e.what());
  }
  if (manifest.value("format", "") != kCheckpointFormat) throw Error(Errc::format, dir.string() + ": unknown format");
  auto state = detail::named_state(m);
  if (manifest.at("tensors").size() != state.size()) {
    throw Error(Errc::format, dir.string() + ": tensor count does not match the model");
  }
  torch::NoGradGuard no_grad;
  for (const auto& entry : manifest.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    auto it = state.find(name);
    if (it == state.end()) throw Error(Errc::format, dir.string() + ": unexpected tensor " + name);
    auto& target = it->second;
    if (entry.at("shape").get<std::vector<long>>() != target.sizes().vec()) {
      throw Error(Errc::format, dir.string() + ": shape mismatch for " + name);
    }
    auto bytes = read_file_bytes(dir / entry.at("file").get<std::string>());
    if (bytes.size() != static_cast<std::size_t>(target.numel()) * 4) {
      throw Error(Errc::format, dir.string() + ": truncated blob for " + name);
    }
    if constexpr (std::endian::native == std::endian::big) {
      for (std::size_t i = 0; i < bytes.size(); i += 4) std::reverse(bytes.begin() + i, bytes.begin() + i + 4);
    }
    auto values = torch::empty(target.sizes(), torch::kFloat32);
    std::memcpy(values.data_ptr<float>(), bytes.data(), bytes.size());
    target.copy_(values);
  }
  return manifest.at("meta");
}

}  // namespace dualseg

#pragma once

#include <functional>
#include <vector>

#include <torch/torch.h>

#include "dualseg/tensor.hpp"
#include "dualseg/uncertainty.hpp"

namespace dualseg {

using Predictor = std::function<torch::Tensor(const torch::Tensor&)>;

struct EnsemblePrediction {
  EnsembleMaps maps;       // mean (y-hat) and population std (uncertainty)
  Grid3<float> identity;   // the un-flipped view's prediction
};

/// Runs the model on the first k flip views of `x` ([1, C, D, H, W]) and maps
/// each prediction back to canonical orientation.
inline std::vector<Grid3<float>> flip_predictions(const Predictor& model, const torch::Tensor& x, int k = 8) {
  const auto codes = flip_codes(k);
  const Shape3 s = spatial_shape(x);
  torch::NoGradGuard no_grad;
  std::vector<Grid3<float>> preds;
  preds.reserve(codes.size());
  for (const auto& code : codes) {
    const auto y = model(flip_spatial(x, code));
    if (spatial_shape(y) != s || y.numel() != static_cast<long>(s.voxels())) {
      throw Error(Errc::shape_mismatch, "model output does not match the input grid");
    }
    preds.push_back(to_grid(flip_spatial(y, code), s));
  }
  return preds;
}

inline EnsemblePrediction ensemble_predict(const Predictor& model, const torch::Tensor& x, int k = 8) {
  auto preds = flip_predictions(model, x, k);
  EnsemblePrediction out{ensemble_reduce(preds), std::move(preds.front())};
  return out;
}

}  // namespace dualseg

#pragma once

#include <vector>

#include <torch/torch.h>

#include "dualseg/error.hpp"
#include "dualseg/net.hpp"

namespace dualseg {

namespace detail {

inline void require_same_sizes(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) throw Error(Errc::shape_mismatch, std::string(what) + ": tensor shapes differ");
}

}  // namespace detail

/// Mean BCE on eps-clamped probabilities plus the Dice loss
/// 1 - 2*sum(Y*P) / (sum(Y) + sum(P)) on the unclamped ones.
inline torch::Tensor bce_loss(const torch::Tensor& prob, const torch::Tensor& target) {
  detail::require_same_sizes(prob, target, "bce_loss");
  const auto p = prob.clamp(kProbEps, 1.0 - kProbEps);
  return -(target * torch::log(p) + (1 - target) * torch::log(1 - p)).mean();
}

inline torch::Tensor dice_loss(const torch::Tensor& prob, const torch::Tensor& target) {
  detail::require_same_sizes(prob, target, "dice_loss");
  const auto denom = target.sum() + prob.sum();
  if (denom.item<double>() == 0.0) return torch::zeros({}, prob.options());
  return 1 - 2 * (target * prob).sum() / denom;
}

inline torch::Tensor seg_loss(const torch::Tensor& prob, const torch::Tensor& target) {
  return bce_loss(prob, target) + dice_loss(prob, target);
}

/// (1 - lambda) * mean squared error outside M + lambda * mean inside M; a
/// region with no voxels contributes 0.
inline torch::Tensor rec_loss(const torch::Tensor& restored, const torch::Tensor& original, const torch::Tensor& mask,
                              double lambda = 0.9) {
  detail::require_same_sizes(restored, original, "rec_loss images");
  detail::require_same_sizes(restored, mask, "rec_loss mask");
  const auto sq = (original - restored).pow(2);
  const auto m = mask.to(restored.dtype());
  const double inside = m.sum().item<double>();
  const double outside = static_cast<double>(m.numel()) - inside;
  auto loss = torch::zeros({}, restored.options());
  if (outside > 0.0) loss = loss + (1.0 - lambda) * ((1 - m) * sq).sum() / outside;
  if (inside > 0.0) loss = loss + lambda * (m * sq).sum() / inside;
  return loss;
}

/// Temporarily disables gradients for a parameter set.
class FreezeGuard {
 public:
  explicit FreezeGuard(std::vector<torch::Tensor> params) : params_(std::move(params)) {
    for (auto& p : params_) {
      saved_.push_back(p.requires_grad());
      p.set_requires_grad(false);
    }
  }
  ~FreezeGuard() {
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i].set_requires_grad(saved_[i]);
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  std::vector<torch::Tensor> params_;
  std::vector<bool> saved_;
};

/// E[log D(real)] + E[log(1 - D(fake))] for discriminator outputs in (0, 1).
inline torch::Tensor adversarial_value(const torch::Tensor& d_real, const torch::Tensor& d_fake) {
  return torch::log(d_real).mean() + torch::log(1 - d_fake).mean();
}

struct AdvLosses {
  torch::Tensor d_loss;  // minimized by the discriminator; the fake image is detached
  torch::Tensor g_loss;  // non-saturating generator loss; discriminator parameters frozen
};

inline AdvLosses adv_losses(Discriminator& d, const torch::Tensor& real, const torch::Tensor& fake) {
  detail::require_same_sizes(real, fake, "adv_losses");
  AdvLosses out;
  out.d_loss = -adversarial_value(d->forward(real.detach()), d->forward(fake.detach()));
  FreezeGuard frozen(d->parameters());
  out.g_loss = -torch::log(d->forward(fake)).mean();
  return out;
}

inline torch::Tensor lis_total_loss(const torch::Tensor& seg, const torch::Tensor& rec, const torch::Tensor& g_loss,
                                    double w_adv = 0.01) {
  return seg + rec + w_adv * g_loss;
}

}  // namespace dualseg

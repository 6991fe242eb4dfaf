#pragma once

// 3D U-Net backbone with group normalization, the two segmentation networks
// built on it, and a small volumetric discriminator.

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "dualseg/contrast.hpp"
#include "dualseg/error.hpp"

namespace dualseg {

struct BackboneSpec {
  int levels = 4;
  int base_channels = 8;
  int groups = 8;
  int in_channels = 1;

  int channels_at(int level) const { return base_channels << level; }

  void validate() const {
    if (levels < 1 || levels > 6) throw Error(Errc::config, "backbone levels must be in [1, 6]");
    if (base_channels < 1 || in_channels < 1 || groups < 1) throw Error(Errc::config, "backbone sizes must be >= 1");
    if (base_channels % groups != 0) {
      throw Error(Errc::config, "group count " + std::to_string(groups) + " must divide base channels " +
                                    std::to_string(base_channels));
    }
  }

  /// Spatial dims of an input must be multiples of this.
  long divisor() const { return 1L << (levels - 1); }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(BackboneSpec, levels, base_channels, groups, in_channels)

/// (conv3 -> GroupNorm -> ReLU) x 2.
struct ConvBlockImpl : torch::nn::Module {
  ConvBlockImpl(int in, int out, int groups) {
    conv1 = register_module("conv1", torch::nn::Conv3d(torch::nn::Conv3dOptions(in, out, 3).padding(1)));
    norm1 = register_module("norm1", torch::nn::GroupNorm(torch::nn::GroupNormOptions(groups, out)));
    conv2 = register_module("conv2", torch::nn::Conv3d(torch::nn::Conv3dOptions(out, out, 3).padding(1)));
    norm2 = register_module("norm2", torch::nn::GroupNorm(torch::nn::GroupNormOptions(groups, out)));
  }
  torch::Tensor forward(torch::Tensor x) {
    x = torch::relu(norm1->forward(conv1->forward(x)));
    return torch::relu(norm2->forward(conv2->forward(x)));
  }
  torch::nn::Conv3d conv1{nullptr}, conv2{nullptr};
  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
};
TORCH_MODULE(ConvBlock);

struct EncoderImpl : torch::nn::Module {
  explicit EncoderImpl(const BackboneSpec& spec) : spec(spec) {
    spec.validate();
    for (int l = 0; l < spec.levels; ++l) {
      const int in = l == 0 ? spec.in_channels : spec.channels_at(l - 1);
      blocks.push_back(register_module("level" + std::to_string(l), ConvBlock(in, spec.channels_at(l), spec.groups)));
    }
  }

  /// Features at every level, finest first.
  std::vector<torch::Tensor> forward(torch::Tensor x) {
    if (x.dim() != 5 || x.size(1) != spec.in_channels) {
      throw Error(Errc::shape_mismatch, "encoder expects [B, " + std::to_string(spec.in_channels) + ", D, H, W]");
    }
    const long d = spec.divisor();
    for (int a = 2; a < 5; ++a) {
      if (x.size(a) % d != 0) {
        throw Error(Errc::shape_mismatch, "spatial dims must be multiples of " + std::to_string(d));
      }
    }
    std::vector<torch::Tensor> skips;
    for (int l = 0; l < spec.levels; ++l) {
      if (l > 0) x = torch::max_pool3d(x, 2);
      x = blocks[static_cast<std::size_t>(l)]->forward(x);
      skips.push_back(x);
    }
    return skips;
  }

  BackboneSpec spec;
  std::vector<ConvBlock> blocks;
};
TORCH_MODULE(Encoder);

struct DecoderImpl : torch::nn::Module {
  explicit DecoderImpl(const BackboneSpec& spec) : spec(spec) {
    for (int l = spec.levels - 1; l >= 1; --l) {
      const int c = spec.channels_at(l), half = spec.channels_at(l - 1);
      ups.push_back(register_module("up" + std::to_string(l),
                                    torch::nn::ConvTranspose3d(torch::nn::ConvTranspose3dOptions(c, half, 2).stride(2))));
      blocks.push_back(register_module("level" + std::to_string(l - 1), ConvBlock(2 * half, half, spec.groups)));
    }
  }

  /// Full-resolution decoder features with base_channels channels.
  torch::Tensor forward(const std::vector<torch::Tensor>& skips) {
    torch::Tensor x = skips.back();
    for (std::size_t i = 0; i < ups.size(); ++i) {
      const auto& skip = skips[skips.size() - 2 - i];
      x = blocks[i]->forward(torch::cat({ups[i]->forward(x), skip}, 1));
    }
    return x;
  }

  BackboneSpec spec;
  std::vector<torch::nn::ConvTranspose3d> ups;
  std::vector<ConvBlock> blocks;
};
TORCH_MODULE(Decoder);

inline torch::nn::Conv3d head_conv(int in, int out) {
  return torch::nn::Conv3d(torch::nn::Conv3dOptions(in, out, 1));
}

struct GfsOutput {
  torch::Tensor prob;      // [B, 1, D, H, W] in (0, 1)
  torch::Tensor features;  // decoder features before projection
};

/// Segmentation network of the first stage, with a projection head for the
/// contrastive loss. Also used, without the contrastive term, as the baseline
/// and as the low-resolution localizer.
struct GfsNetImpl : torch::nn::Module {
  explicit GfsNetImpl(BackboneSpec s) : spec(s) {
    spec.validate();
    encoder = register_module("encoder", Encoder(spec));
    decoder = register_module("decoder", Decoder(spec));
    seg_head = register_module("seg_head", head_conv(spec.base_channels, 1));
    projection = register_module("projection", ProjectionHead(spec.base_channels));
  }

  GfsOutput forward(const torch::Tensor& x) {
    auto f = decoder->forward(encoder->forward(x));
    return {torch::sigmoid(seg_head->forward(f)), f};
  }

  torch::Tensor predict(const torch::Tensor& x) { return forward(x).prob; }

  BackboneSpec spec;
  Encoder encoder{nullptr};
  Decoder decoder{nullptr};
  torch::nn::Conv3d seg_head{nullptr};
  ProjectionHead projection{nullptr};
};
TORCH_MODULE(GfsNet);

struct LisOutput {
  torch::Tensor prob;      // segmentation probabilities
  torch::Tensor restored;  // undefined when the restoration branch is skipped
};

/// Restoration-and-segmentation network: one encoder over (image, prob map,
/// uncertainty map) and two decoders.
struct LisNetImpl : torch::nn::Module {
  explicit LisNetImpl(BackboneSpec s) : spec(s) {
    spec.in_channels = 3;
    spec.validate();
    encoder = register_module("encoder", Encoder(spec));
    seg_decoder = register_module("seg_decoder", Decoder(spec));
    lis_decoder = register_module("lis_decoder", Decoder(spec));
    seg_head = register_module("seg_head", head_conv(spec.base_channels, 1));
    lis_head = register_module("lis_head", head_conv(spec.base_channels, 1));
  }

  LisOutput forward(const torch::Tensor& x, bool with_restoration = true) {
    const auto skips = encoder->forward(x);
    LisOutput out{torch::sigmoid(seg_head->forward(seg_decoder->forward(skips))), {}};
    if (with_restoration) {
      ++restoration_calls;
      out.restored = torch::sigmoid(lis_head->forward(lis_decoder->forward(skips)));
    }
    return out;
  }

  LisOutput forward(const torch::Tensor& image, const torch::Tensor& prob, const torch::Tensor& unc,
                    bool with_restoration = true) {
    return forward(torch::cat({image, prob, unc}, 1), with_restoration);
  }

  torch::Tensor predict(const torch::Tensor& x) { return forward(x, false).prob; }

  /// Parameters of the restoration branch only.
  std::vector<torch::Tensor> restoration_parameters() const {
    auto p = lis_decoder->parameters();
    for (const auto& q : lis_head->parameters()) p.push_back(q);
    return p;
  }

  BackboneSpec spec;
  Encoder encoder{nullptr};
  Decoder seg_decoder{nullptr}, lis_decoder{nullptr};
  torch::nn::Conv3d seg_head{nullptr}, lis_head{nullptr};
  long restoration_calls = 0;
};
TORCH_MODULE(LisNet);

inline constexpr double kProbEps = 1e-7;

/// Strided conv classifier producing one probability per volume.
struct DiscriminatorImpl : torch::nn::Module {
  explicit DiscriminatorImpl(int base = 8, int depth = 3) {
    if (base < 1 || depth < 1) throw Error(Errc::config, "discriminator sizes must be >= 1");
    int in = 1;
    for (int i = 0; i < depth; ++i) {
      const int out = base << i;
      convs.push_back(register_module("conv" + std::to_string(i),
                                      torch::nn::Conv3d(torch::nn::Conv3dOptions(in, out, 3).stride(2).padding(1))));
      in = out;
    }
    fc = register_module("fc", torch::nn::Linear(in, 1));
  }

  torch::Tensor forward(torch::Tensor x) {
    for (auto& c : convs) x = torch::leaky_relu(c->forward(x), 0.2);
    x = x.mean({2, 3, 4});
    return torch::sigmoid(fc->forward(x)).clamp(kProbEps, 1.0 - kProbEps).reshape({-1});
  }

  std::vector<torch::nn::Conv3d> convs;
  torch::nn::Linear fc{nullptr};
};
TORCH_MODULE(Discriminator);

inline long parameter_count(const torch::nn::Module& m) {
  long n = 0;
  for (const auto& p : m.parameters()) n += p.numel();
  return n;
}

}  // namespace dualseg

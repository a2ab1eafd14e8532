#include "blindpaint/generator.hpp"

#include <string>

#include "blindpaint/error.hpp"

namespace blindpaint {

namespace nn = torch::nn;

GatedConv2dImpl::GatedConv2dImpl(const GatedConvOptions& options) : options_(options) {
  auto conv = [&] {
    const int pad = options.dilation * (options.kernel - 1) / 2;
    return nn::Conv2d(nn::Conv2dOptions(options.in_channels, options.out_channels, options.kernel)
                          .stride(options.stride)
                          .padding(pad)
                          .dilation(options.dilation));
  };
  feature = register_module("feature", conv());
  gate = register_module("gate", conv());
}

torch::Tensor GatedConv2dImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != options_.in_channels) {
    throw Error("gated conv expects [B, " + std::to_string(options_.in_channels) +
                ", H, W] input, got " + std::to_string(x.dim()) + "-d tensor with " +
                (x.dim() >= 2 ? std::to_string(x.size(1)) : std::string("?")) + " channels");
  }
  auto f = feature->forward(x);
  if (options_.activate) f = torch::elu(f);
  return f * torch::sigmoid(gate->forward(x));
}

BranchImpl::BranchImpl(const GeneratorConfig& config, int out_channels, bool normalize_head_input)
    : normalize_head_input_(normalize_head_input) {
  const int w1 = config.encoder_width;
  const int w2 = config.bottleneck_width;
  const int k = config.kernel;
  enc1_ = register_module("enc1", GatedConv2d(GatedConvOptions{config.in_channels, w1, k, 2}));
  enc2_ = register_module("enc2", GatedConv2d(GatedConvOptions{w1, w2, k, 2}));
  for (int d : config.dilations) bottleneck_->push_back(GatedConv2d(GatedConvOptions{w2, w2, k, 1, d}));
  bottleneck_ = register_module("bottleneck", bottleneck_);
  dec1_ = register_module("dec1", GatedConv2d(GatedConvOptions{w2, w1, k}));
  dec2_ = register_module("dec2", GatedConv2d(GatedConvOptions{w1 + config.in_channels, w1 / 2, k}));
  head = register_module(
      "head", nn::Conv2d(nn::Conv2dOptions(w1 / 2, out_channels, k).padding((k - 1) / 2)));
}

torch::Tensor BranchImpl::forward(const torch::Tensor& x) {
  auto upsample = [](const torch::Tensor& t) {
    return torch::upsample_nearest2d(t, std::vector<int64_t>{t.size(2) * 2, t.size(3) * 2});
  };
  auto h = enc2_->forward(enc1_->forward(x));
  for (auto& block : *bottleneck_) h = block->as<GatedConv2d>()->forward(h);
  h = dec1_->forward(upsample(h));
  // The full-resolution input rejoins the last stage so thin strokes can be resolved per pixel.
  h = dec2_->forward(torch::cat({upsample(h), x}, 1));
  if (normalize_head_input_) {
    h = torch::instance_norm(h, {}, {}, {}, {}, /*use_input_stats=*/true, 0.0, 1e-5, false);
  }
  return head->forward(h);
}

torch::Tensor compose(const torch::Tensor& input, const torch::Tensor& inpainted,
                      const torch::Tensor& mask) {
  if (!input.sizes().equals(inpainted.sizes())) {
    throw Error("compose: input and inpainted shapes differ");
  }
  const auto m = mask.dim() == input.dim() ? mask : mask.unsqueeze(-3);
  if (m.size(-1) != input.size(-1) || m.size(-2) != input.size(-2) || m.size(-3) != 1) {
    throw Error("compose: mask must be [.., 1, H, W] matching the image");
  }
  return m * inpainted + (1 - m) * input;
}

GeneratorImpl::GeneratorImpl(const GeneratorConfig& config) : config_(config) {
  inpaint_branch = register_module("inpaint", Branch(config, config.in_channels));
  if (config.branches == BranchMode::two_branch) {
    mask_branch = register_module("mask", Branch(config, 1, /*normalize_head_input=*/true));
  }
}

GeneratorOutput GeneratorImpl::forward(const torch::Tensor& input) {
  const bool batched = input.dim() == 4;
  const auto x = batched ? input : input.unsqueeze(0);
  if (x.dim() != 4) throw Error("generator expects [B, C, H, W] or [C, H, W] input");
  constexpr int f = GeneratorConfig::kDownsampleFactor;
  if (x.size(2) % f != 0 || x.size(3) % f != 0) {
    throw Error("generator input " + std::to_string(x.size(2)) + "x" + std::to_string(x.size(3)) +
                " is not divisible by the downsampling factor " + std::to_string(f));
  }
  GeneratorOutput out;
  out.inpainted = torch::sigmoid(inpaint_branch->forward(x));
  if (mask_branch) {
    out.mask = torch::sigmoid(mask_branch->forward(x));
    out.composed = compose(x, out.inpainted, out.mask);
  } else {
    out.mask = torch::ones({x.size(0), 1, x.size(2), x.size(3)}, x.options());
    out.composed = out.inpainted;
  }
  if (!batched) {
    out.inpainted = out.inpainted.squeeze(0);
    out.mask = out.mask.squeeze(0);
    out.composed = out.composed.squeeze(0);
  }
  return out;
}

}  // namespace blindpaint

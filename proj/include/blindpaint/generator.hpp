#pragma once

#include <vector>

#include <torch/torch.h>

namespace blindpaint {

// out = ELU(conv_feature(x)) * sigmoid(conv_gate(x)); both convolutions share geometry.
// With `activate` false the feature path is left linear.
struct GatedConvOptions {
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;
  int dilation = 1;
  bool activate = true;
};

class GatedConv2dImpl : public torch::nn::Module {
 public:
  explicit GatedConv2dImpl(const GatedConvOptions& options);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d feature{nullptr};
  torch::nn::Conv2d gate{nullptr};

 private:
  GatedConvOptions options_;
};
TORCH_MODULE(GatedConv2d);

enum class BranchMode { two_branch, single_branch };

struct GeneratorConfig {
  int in_channels = 3;
  int encoder_width = 32;
  int bottleneck_width = 64;
  std::vector<int> dilations{1, 2, 4, 2};
  int kernel = 3;
  BranchMode branches = BranchMode::two_branch;

  static constexpr int kDownsampleFactor = 4;
};

// Gated encoder-decoder: two stride-2 gated convs, dilated gated bottleneck, two
// nearest-upsample + gated conv stages (the last also fed the input), and a linear head.
class BranchImpl : public torch::nn::Module {
 public:
  // With normalize_head_input the head sees instance-normalized features, so its output can only
  // shift uniformly through the bias. The mask branch needs this: otherwise early training, when
  // Ig is still worse than I everywhere, drives every mask logit deep into saturation.
  BranchImpl(const GeneratorConfig& config, int out_channels, bool normalize_head_input = false);
  // Raw head output, before any squashing.
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d head{nullptr};

 private:
  GatedConv2d enc1_{nullptr}, enc2_{nullptr}, dec1_{nullptr}, dec2_{nullptr};
  torch::nn::ModuleList bottleneck_;
  bool normalize_head_input_ = false;
};
TORCH_MODULE(Branch);

struct GeneratorOutput {
  torch::Tensor inpainted;  // Ig, [B, C, H, W]
  torch::Tensor mask;       // M,  [B, 1, H, W]
  torch::Tensor composed;   // I^, [B, C, H, W]
};

// M * Ig + (1 - M) * I with the mask broadcast over channels.
torch::Tensor compose(const torch::Tensor& input, const torch::Tensor& inpainted,
                      const torch::Tensor& mask);

class GeneratorImpl : public torch::nn::Module {
 public:
  explicit GeneratorImpl(const GeneratorConfig& config);

  // Accepts [B, C, H, W] or [C, H, W]; H and W must be multiples of kDownsampleFactor. In
  // single-branch mode the mask is all ones, so composed == inpainted.
  GeneratorOutput forward(const torch::Tensor& input);

  const GeneratorConfig& config() const { return config_; }

  Branch inpaint_branch{nullptr};
  Branch mask_branch{nullptr};  // null in single-branch mode

 private:
  GeneratorConfig config_;
};
TORCH_MODULE(Generator);

}  // namespace blindpaint

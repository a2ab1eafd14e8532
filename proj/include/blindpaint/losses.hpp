#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "blindpaint/discriminator.hpp"

namespace blindpaint {

struct LossWeights {
  double rec = 10.0;
  double per = 1.0;
  double adv = 0.1;
};

struct LossReport {
  double rec = 0;
  double per = 0;
  double adv = 0;
  double det_cls = 0;
  double det_loc = 0;
  double total_gen = 0;
  double total_disc = 0;
};

// Fixed feature extractor for the perceptual term. Parameters never receive gradients.
//
//   vgg16    - VGG-16 conv1_1..conv3_3; taps after pool1, pool2, pool3. Loads pretrained weights
//              from a tensor archive when `weights` is set (inputs then get ImageNet
//              normalization); otherwise seeded random weights.
//   compact  - one 3x3 conv + ReLU + 2x2 max-pool per stage, widths 16/32/64, seeded random.
//   identity - a single tap returning the input unchanged.
enum class PerceptualLayout { vgg16, compact, identity };

struct PerceptualConfig {
  PerceptualLayout layout = PerceptualLayout::compact;
  std::uint64_t seed = 1234;
  std::filesystem::path weights;
};

std::string to_string(PerceptualLayout layout);
PerceptualLayout perceptual_layout_from_string(const std::string& name);

class PerceptualExtractorImpl : public torch::nn::Module {
 public:
  explicit PerceptualExtractorImpl(const PerceptualConfig& config = {});

  std::vector<torch::Tensor> forward(const torch::Tensor& image);

  const std::vector<double>& layer_weights() const { return layer_weights_; }
  const PerceptualConfig& config() const { return config_; }

 private:
  PerceptualConfig config_;
  bool normalize_input_ = false;
  // Each stage is a run of convs followed by a 2x2 max-pool; a tap is taken after the pool.
  std::vector<std::vector<torch::nn::Conv2d>> stages_;
  std::vector<double> layer_weights_;
};
TORCH_MODULE(PerceptualExtractor);

// mean|I* - Ig| + mean|I* - I^|
torch::Tensor rec_loss(const torch::Tensor& clean, const torch::Tensor& inpainted,
                       const torch::Tensor& composed);

// sum_l w_l * (rms(phi_l(I*) - phi_l(Ig)) + rms(phi_l(I*) - phi_l(I^)))
torch::Tensor perceptual_loss(PerceptualExtractor& phi, const torch::Tensor& clean,
                              const torch::Tensor& inpainted, const torch::Tensor& composed);

// Square root of the mean square; zero (with zero gradient) for an all-zero difference.
torch::Tensor rms(const torch::Tensor& diff);

// -mean log(1 - p) over both images and every scale, cell and anchor, p clamped to 1 - 1e-6.
torch::Tensor adv_loss(const DetectorOutput& on_inpainted, const DetectorOutput& on_composed);

enum class ImageRole { corrupted, clean, inpainted, composed };
std::string to_string(ImageRole role);

struct DetectionLoss {
  torch::Tensor cls;
  torch::Tensor loc;
};

// Per role: cls = mean objectness BCE over non-ignored anchors + mean class cross-entropy over
// positives; loc = mean smooth-L1 over positive box encodings. Both summed over roles.
DetectionLoss det_loss(const std::map<ImageRole, DetectorOutput>& outputs,
                       const std::map<ImageRole, TargetMap>& targets);

struct LossTotals {
  double total_gen = 0;
  double total_disc = 0;
};

// total_gen = w.rec * rec + w.per * per + w.adv * adv; total_disc = det_cls + det_loc.
// Throws Error when any part is not finite.
LossTotals total_losses(const LossReport& parts, const LossWeights& weights);

}  // namespace blindpaint

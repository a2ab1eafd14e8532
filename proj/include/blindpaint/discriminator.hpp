#pragma once

#include <optional>
#include <span>
#include <vector>

#include <torch/torch.h>

#include "blindpaint/image_io.hpp"
#include "blindpaint/marker_synth.hpp"

namespace blindpaint {

struct AnchorSize {
  double width = 0;
  double height = 0;
};

struct AnchorConfig {
  std::vector<int> strides{8, 16};
  std::vector<std::vector<AnchorSize>> anchors;  // one list per stride

  // Two scales (strides 8 and 16), three square-ish anchors each, sized for markers on a
  // `side`-pixel image.
  static AnchorConfig defaults(int side = 64);

  std::size_t num_scales() const { return strides.size(); }
  // Throws ConfigError when a stride does not divide the image or an anchor is non-positive.
  void validate(CanvasSize image) const;
};

// Continuous box, (x, y) is the top-left corner.
struct BoxF {
  double x = 0;
  double y = 0;
  double width = 0;
  double height = 0;
};

double iou(const BoxF& a, const BoxF& b);
BoxF to_boxf(const MarkerAnnotation& box);

// Layout of the last axis of `raw`: [dx, dy, log_w, log_h, objectness logit, class logits...].
inline constexpr int kLocChannels = 4;
inline constexpr int kObjChannel = 4;
inline constexpr int kNumClasses = 2;

struct DetectorScale {
  int stride = 0;
  torch::Tensor raw;  // [B, Hs, Ws, A, 5 + K]
  torch::Tensor cls;  // [B, Hs, Ws, A, 1 + K]: sigmoid objectness, softmax class probabilities
  torch::Tensor loc;  // [B, Hs, Ws, A, 4]: dx, dy (cells from cell center), log w/h ratio vs anchor
};

struct DetectorOutput {
  std::vector<DetectorScale> scales;

  static DetectorOutput from_raw(std::vector<torch::Tensor> raw, const std::vector<int>& strides);

  // Per-anchor marker confidence objectness * max class probability, flattened to [B, N].
  torch::Tensor marker_confidence() const;
};

struct DetectorConfig {
  AnchorConfig anchors = AnchorConfig::defaults();
  // One stride-2 3x3 conv per entry; a head is attached wherever the cumulative stride equals
  // one of anchors.strides.
  std::vector<int> widths{16, 32, 64, 64};
  int in_channels = 3;
};

class DetectorImpl : public torch::nn::Module {
 public:
  explicit DetectorImpl(const DetectorConfig& config);

  // Accepts [B, C, H, W] or [C, H, W] with H, W divisible by the largest stride.
  DetectorOutput forward(const torch::Tensor& image);

  const DetectorConfig& config() const { return config_; }

 private:
  DetectorConfig config_;
  torch::nn::ModuleList backbone_;
  torch::nn::ModuleList heads_;
  std::vector<int> head_layer_;  // backbone layer index feeding each head
};
TORCH_MODULE(Detector);

struct ScaleTargets {
  torch::Tensor objectness;  // [B, Hs, Ws, A] float {0, 1}
  torch::Tensor ignore;      // [B, Hs, Ws, A] bool
  torch::Tensor label;       // [B, Hs, Ws, A] int64, valid where objectness == 1
  torch::Tensor box;         // [B, Hs, Ws, A, 4] float, valid where objectness == 1
};

struct TargetMap {
  std::vector<ScaleTargets> scales;
};

// For each box and scale, the cell holding the box center gets one positive: the anchor (placed
// at that cell's center) with the highest IoU to the box, lowest index on ties. When two boxes
// claim the same (cell, anchor), the higher IoU wins and the earlier box on ties. Every other
// (cell, anchor) whose anchored box has IoU > 0.5 with any ground-truth box is ignored; the rest
// are negative. Box targets: (cx / stride - (col + 0.5), cy / stride - (row + 0.5),
// log(w / anchor_w), log(h / anchor_h)).
TargetMap assign_targets(std::span<const MarkerAnnotation> boxes, const AnchorConfig& config,
                         CanvasSize image);

// Batched form; each item's boxes are relabeled when `relabel` is set.
TargetMap assign_targets(const std::vector<std::vector<MarkerAnnotation>>& boxes,
                         const AnchorConfig& config, CanvasSize image,
                         std::optional<MarkerClass> relabel = std::nullopt);

struct Detection {
  BoxF box;
  MarkerClass label = MarkerClass::marker;
  double confidence = 0;
};

// Decodes batch item `batch_index`: keeps anchors with objectness * max class probability >=
// conf_threshold, inverts the box encoding, clips to the image and runs greedy per-class NMS.
std::vector<Detection> decode_detections(const DetectorOutput& out, const AnchorConfig& config,
                                         double conf_threshold, double nms_iou,
                                         std::int64_t batch_index = 0);

// Conv2d whose weight is divided by its spectral norm, estimated with one power iteration per
// training-mode forward; the iteration vector is a module buffer.
class SpectralConv2dImpl : public torch::nn::Module {
 public:
  SpectralConv2dImpl(int in_channels, int out_channels, int kernel, int stride, int padding);
  torch::Tensor forward(const torch::Tensor& x);

  torch::Tensor weight;
  torch::Tensor bias;
  torch::Tensor u;

 private:
  int stride_;
  int padding_;
};
TORCH_MODULE(SpectralConv2d);

struct PatchDiscriminatorConfig {
  std::vector<int> widths{32, 64, 64, 1};  // 5x5 stride-2 layers; last produces the score
  int in_channels = 3;
};

// Patch-level real/fake critic for the non-detector ablation: [B, C, H, W] -> [B, H/16, W/16]
// with the default four layers.
class PatchDiscriminatorImpl : public torch::nn::Module {
 public:
  explicit PatchDiscriminatorImpl(const PatchDiscriminatorConfig& config = {});
  torch::Tensor forward(const torch::Tensor& image);

 private:
  torch::nn::ModuleList layers_;
};
TORCH_MODULE(PatchDiscriminator);

// mean(relu(1 - real)) + mean(relu(1 + fake))
torch::Tensor hinge_discriminator_loss(const torch::Tensor& real_scores,
                                       const torch::Tensor& fake_scores);
// -mean(fake)
torch::Tensor hinge_generator_loss(const torch::Tensor& fake_scores);

}  // namespace blindpaint

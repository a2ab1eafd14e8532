#include "blindpaint/losses.hpp"

#include <cmath>

#include <ATen/CPUGeneratorImpl.h>

#include "blindpaint/error.hpp"
#include "blindpaint/tensor_archive.hpp"

namespace blindpaint {

namespace nn = torch::nn;

std::string to_string(PerceptualLayout layout) {
  switch (layout) {
    case PerceptualLayout::vgg16: return "vgg16";
    case PerceptualLayout::compact: return "compact";
    case PerceptualLayout::identity: return "identity";
  }
  return "?";
}

PerceptualLayout perceptual_layout_from_string(const std::string& name) {
  if (name == "vgg16") return PerceptualLayout::vgg16;
  if (name == "compact") return PerceptualLayout::compact;
  if (name == "identity") return PerceptualLayout::identity;
  throw ConfigError("unknown perceptual layout '" + name + "' (expected vgg16, compact or identity)");
}

std::string to_string(ImageRole role) {
  switch (role) {
    case ImageRole::corrupted: return "corrupted";
    case ImageRole::clean: return "clean";
    case ImageRole::inpainted: return "inpainted";
    case ImageRole::composed: return "composed";
  }
  return "?";
}

PerceptualExtractorImpl::PerceptualExtractorImpl(const PerceptualConfig& config) : config_(config) {
  if (config.layout == PerceptualLayout::identity) {
    layer_weights_ = {1.0};
    return;
  }
  std::vector<std::vector<int>> plan;
  if (config.layout == PerceptualLayout::vgg16) {
    plan = {{64, 64}, {128, 128}, {256, 256, 256}};
  } else {
    plan = {{16}, {32}, {64}};
  }
  // Weights come from a dedicated seed so the extractor is identical regardless of what was
  // initialized before it.
  auto generator = at::detail::getDefaultCPUGenerator();
  const auto saved = generator.get_state();
  torch::manual_seed(config.seed);
  int in = 3;
  int index = 0;
  for (const auto& widths : plan) {
    std::vector<nn::Conv2d> stage;
    for (int w : widths) {
      auto conv = nn::Conv2d(nn::Conv2dOptions(in, w, 3).padding(1));
      stage.push_back(register_module("conv" + std::to_string(index++), conv));
      in = w;
    }
    stages_.push_back(std::move(stage));
  }
  generator.set_state(saved);
  layer_weights_.assign(stages_.size(), 1.0);

  if (!config.weights.empty()) {
    if (config.layout != PerceptualLayout::vgg16) {
      throw ConfigError("pretrained perceptual weights require the vgg16 layout");
    }
    const auto archive = read_archive(config.weights);
    torch::NoGradGuard guard;
    for (auto& p : named_parameters()) {
      const auto& src = archive.at(p.key());
      if (!src.sizes().equals(p.value().sizes())) {
        throw Error("perceptual weights: shape mismatch for '" + p.key() + "'");
      }
      p.value().copy_(src);
    }
    normalize_input_ = true;
  }
  for (auto& p : parameters()) p.set_requires_grad(false);
}

std::vector<torch::Tensor> PerceptualExtractorImpl::forward(const torch::Tensor& image) {
  auto x = image.dim() == 3 ? image.unsqueeze(0) : image;
  if (config_.layout == PerceptualLayout::identity) return {x};
  if (normalize_input_) {
    const auto mean = torch::tensor({0.485, 0.456, 0.406}, x.options()).view({1, 3, 1, 1});
    const auto stdev = torch::tensor({0.229, 0.224, 0.225}, x.options()).view({1, 3, 1, 1});
    x = (x - mean) / stdev;
  }
  std::vector<torch::Tensor> taps;
  for (auto& stage : stages_) {
    for (auto& conv : stage) x = torch::relu(conv->forward(x));
    x = torch::max_pool2d(x, 2, 2);
    taps.push_back(x);
  }
  return taps;
}

torch::Tensor rec_loss(const torch::Tensor& clean, const torch::Tensor& inpainted,
                       const torch::Tensor& composed) {
  if (!clean.sizes().equals(inpainted.sizes()) || !clean.sizes().equals(composed.sizes())) {
    throw Error("rec_loss: shape mismatch");
  }
  return (clean - inpainted).abs().mean() + (clean - composed).abs().mean();
}

torch::Tensor rms(const torch::Tensor& diff) {
  const auto ms = diff.square().mean();
  return ms.clamp_min(1e-30).sqrt() * (ms > 0).to(ms.scalar_type());
}

torch::Tensor perceptual_loss(PerceptualExtractor& phi, const torch::Tensor& clean,
                              const torch::Tensor& inpainted, const torch::Tensor& composed) {
  if (!clean.sizes().equals(inpainted.sizes()) || !clean.sizes().equals(composed.sizes())) {
    throw Error("perceptual_loss: shape mismatch");
  }
  const auto f_clean = phi->forward(clean);
  const auto f_inpainted = phi->forward(inpainted);
  const auto f_composed = phi->forward(composed);
  const auto& w = phi->layer_weights();
  auto total = torch::zeros({}, clean.options());
  for (std::size_t l = 0; l < f_clean.size(); ++l) {
    total = total + w[l] * (rms(f_clean[l] - f_inpainted[l]) + rms(f_clean[l] - f_composed[l]));
  }
  return total;
}

torch::Tensor adv_loss(const DetectorOutput& on_inpainted, const DetectorOutput& on_composed) {
  const auto p = torch::cat({on_inpainted.marker_confidence().reshape({-1}),
                             on_composed.marker_confidence().reshape({-1})});
  return -torch::log1p(-p.clamp_max(1.0 - 1e-6)).mean();
}

namespace {

void role_loss(const DetectorOutput& out, const TargetMap& target, torch::Tensor& cls,
               torch::Tensor& loc) {
  if (out.scales.size() != target.scales.size()) {
    throw Error("det_loss: output and target scale counts differ");
  }
  std::vector<torch::Tensor> obj_logits, obj_targets, cls_logits, cls_targets, loc_pred, loc_target;
  for (std::size_t s = 0; s < out.scales.size(); ++s) {
    const auto& o = out.scales[s];
    const auto& t = target.scales[s];
    if (!o.raw.sizes().slice(0, 4).equals(t.objectness.sizes())) {
      throw Error("det_loss: target grid does not match detector output at scale " + std::to_string(s));
    }
    const auto keep = t.ignore.logical_not();
    const auto pos = t.objectness > 0.5;
    obj_logits.push_back(o.raw.select(4, kObjChannel).masked_select(keep));
    obj_targets.push_back(t.objectness.masked_select(keep).to(o.raw.scalar_type()));
    const auto raw_pos = o.raw.index({pos});  // [P, 5 + K]
    cls_logits.push_back(raw_pos.narrow(1, kObjChannel + 1, kNumClasses));
    cls_targets.push_back(t.label.index({pos}));
    loc_pred.push_back(raw_pos.narrow(1, 0, kLocChannels));
    loc_target.push_back(t.box.index({pos}).to(o.raw.scalar_type()));
  }
  const auto ol = torch::cat(obj_logits);
  const auto ot = torch::cat(obj_targets);
  auto role_cls = ol.numel() > 0 ? torch::binary_cross_entropy_with_logits(ol, ot)
                                 : torch::zeros({}, ol.options());
  const auto cl = torch::cat(cls_logits);
  if (cl.size(0) > 0) {
    role_cls = role_cls + torch::cross_entropy_loss(cl, torch::cat(cls_targets));
    loc = loc + torch::smooth_l1_loss(torch::cat(loc_pred), torch::cat(loc_target));
  }
  cls = cls + role_cls;
}

}  // namespace

DetectionLoss det_loss(const std::map<ImageRole, DetectorOutput>& outputs,
                       const std::map<ImageRole, TargetMap>& targets) {
  if (outputs.empty()) throw Error("det_loss: no detector outputs");
  const auto options = outputs.begin()->second.scales.at(0).raw.options();
  DetectionLoss loss{torch::zeros({}, options), torch::zeros({}, options)};
  for (const auto& [role, out] : outputs) {
    const auto it = targets.find(role);
    if (it == targets.end()) throw Error("det_loss: no target map for role '" + to_string(role) + "'");
    role_loss(out, it->second, loss.cls, loss.loc);
  }
  if (targets.size() != outputs.size()) throw Error("det_loss: target map for a role without output");
  return loss;
}

LossTotals total_losses(const LossReport& parts, const LossWeights& weights) {
  const std::pair<const char*, double> named[] = {{"rec", parts.rec},         {"per", parts.per},
                                                  {"adv", parts.adv},         {"det_cls", parts.det_cls},
                                                  {"det_loc", parts.det_loc}};
  for (const auto& [name, value] : named) {
    if (!std::isfinite(value)) {
      throw Error(std::string("non-finite loss term '") + name + "' (training diverged)");
    }
  }
  return {weights.rec * parts.rec + weights.per * parts.per + weights.adv * parts.adv,
          parts.det_cls + parts.det_loc};
}

}  // namespace blindpaint

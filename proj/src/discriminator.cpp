#include "blindpaint/discriminator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "blindpaint/error.hpp"

namespace blindpaint {

namespace nn = torch::nn;

AnchorConfig AnchorConfig::defaults(int side) {
  const double f = side / 64.0;
  AnchorConfig config;
  config.strides = {8, 16};
  config.anchors = {{{6 * f, 6 * f}, {10 * f, 10 * f}, {14 * f, 14 * f}},
                    {{16 * f, 16 * f}, {22 * f, 22 * f}, {30 * f, 30 * f}}};
  return config;
}

void AnchorConfig::validate(CanvasSize image) const {
  if (strides.empty() || strides.size() != anchors.size()) {
    throw ConfigError("anchor config needs one anchor list per stride");
  }
  for (std::size_t s = 0; s < strides.size(); ++s) {
    if (strides[s] <= 0 || image.height % strides[s] != 0 || image.width % strides[s] != 0) {
      throw ConfigError("image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                        " is not divisible by detector stride " + std::to_string(strides[s]));
    }
    if (anchors[s].empty()) throw ConfigError("anchor list for a stride is empty");
    for (const auto& a : anchors[s]) {
      if (!(a.width > 0) || !(a.height > 0)) throw ConfigError("anchor sizes must be positive");
    }
  }
}

double iou(const BoxF& a, const BoxF& b) {
  const double ix = std::max(0.0, std::min(a.x + a.width, b.x + b.width) - std::max(a.x, b.x));
  const double iy = std::max(0.0, std::min(a.y + a.height, b.y + b.height) - std::max(a.y, b.y));
  const double inter = ix * iy;
  const double uni = a.width * a.height + b.width * b.height - inter;
  return uni > 0 ? inter / uni : 0.0;
}

BoxF to_boxf(const MarkerAnnotation& box) {
  return {static_cast<double>(box.x_min), static_cast<double>(box.y_min),
          static_cast<double>(box.width), static_cast<double>(box.height)};
}

DetectorOutput DetectorOutput::from_raw(std::vector<torch::Tensor> raw,
                                        const std::vector<int>& strides) {
  if (raw.size() != strides.size()) throw Error("detector output: one raw tensor per stride required");
  DetectorOutput out;
  for (std::size_t s = 0; s < raw.size(); ++s) {
    auto& r = raw[s];
    if (r.dim() != 5 || r.size(4) != kObjChannel + 1 + kNumClasses) {
      throw Error("detector raw output must be [B, Hs, Ws, A, " +
                  std::to_string(kObjChannel + 1 + kNumClasses) + "]");
    }
    DetectorScale scale;
    scale.stride = strides[s];
    scale.loc = r.narrow(4, 0, kLocChannels);
    scale.cls = torch::cat({torch::sigmoid(r.narrow(4, kObjChannel, 1)),
                            torch::softmax(r.narrow(4, kObjChannel + 1, kNumClasses), 4)},
                           4);
    scale.raw = std::move(r);
    out.scales.push_back(std::move(scale));
  }
  return out;
}

torch::Tensor DetectorOutput::marker_confidence() const {
  std::vector<torch::Tensor> parts;
  for (const auto& s : scales) {
    auto obj = s.cls.select(4, 0);
    auto cls = std::get<0>(s.cls.narrow(4, 1, kNumClasses).max(4));
    parts.push_back((obj * cls).reshape({s.cls.size(0), -1}));
  }
  return torch::cat(parts, 1);
}

DetectorImpl::DetectorImpl(const DetectorConfig& config) : config_(config) {
  int in = config.in_channels;
  int stride = 1;
  for (std::size_t layer = 0; layer < config.widths.size(); ++layer) {
    const int w = config.widths[layer];
    backbone_->push_back(nn::Conv2d(nn::Conv2dOptions(in, w, 3).stride(2).padding(1)));
    stride *= 2;
    for (std::size_t s = 0; s < config.anchors.strides.size(); ++s) {
      if (config.anchors.strides[s] == stride) {
        const auto a = static_cast<int>(config.anchors.anchors[s].size());
        auto head = nn::Conv2d(nn::Conv2dOptions(w, a * (kObjChannel + 1 + kNumClasses), 1));
        // Low objectness prior so an untrained detector reports few markers.
        torch::NoGradGuard guard;
        auto b = head->bias.view({a, kObjChannel + 1 + kNumClasses});
        b.select(1, kObjChannel).fill_(-4.6);
        heads_->push_back(head);
        head_layer_.push_back(static_cast<int>(layer));
      }
    }
    in = w;
  }
  if (heads_->size() != config.anchors.strides.size()) {
    throw ConfigError("detector backbone does not reach every anchor stride");
  }
  backbone_ = register_module("backbone", backbone_);
  heads_ = register_module("heads", heads_);
}

DetectorOutput DetectorImpl::forward(const torch::Tensor& image) {
  const auto x0 = image.dim() == 3 ? image.unsqueeze(0) : image;
  if (x0.dim() != 4) throw Error("detector expects [B, C, H, W] or [C, H, W] input");
  config_.anchors.validate({static_cast<int>(x0.size(2)), static_cast<int>(x0.size(3))});
  std::vector<torch::Tensor> raw(heads_->size());
  auto x = x0;
  for (std::size_t layer = 0; layer < backbone_->size(); ++layer) {
    x = torch::silu(backbone_[layer]->as<nn::Conv2d>()->forward(x));
    for (std::size_t h = 0; h < heads_->size(); ++h) {
      if (head_layer_[h] != static_cast<int>(layer)) continue;
      auto y = heads_[h]->as<nn::Conv2d>()->forward(x);
      const auto a = static_cast<int64_t>(config_.anchors.anchors[h].size());
      raw[h] = y.view({y.size(0), a, kObjChannel + 1 + kNumClasses, y.size(2), y.size(3)})
                   .permute({0, 3, 4, 1, 2})
                   .contiguous();
    }
  }
  return DetectorOutput::from_raw(std::move(raw), config_.anchors.strides);
}

namespace {

BoxF anchored_box(int row, int col, int stride, const AnchorSize& a) {
  const double cx = (col + 0.5) * stride;
  const double cy = (row + 0.5) * stride;
  return {cx - a.width / 2, cy - a.height / 2, a.width, a.height};
}

}  // namespace

TargetMap assign_targets(std::span<const MarkerAnnotation> boxes, const AnchorConfig& config,
                         CanvasSize image) {
  config.validate(image);
  TargetMap map;
  for (std::size_t s = 0; s < config.num_scales(); ++s) {
    const int stride = config.strides[s];
    const int gh = image.height / stride;
    const int gw = image.width / stride;
    const auto& anchors = config.anchors[s];
    const int na = static_cast<int>(anchors.size());
    const std::size_t cells = static_cast<std::size_t>(gh) * gw * na;
    std::vector<float> obj(cells, 0.0F);
    std::vector<std::uint8_t> ignore(cells, 0);
    std::vector<std::int64_t> label(cells, 0);
    std::vector<float> target(cells * 4, 0.0F);
    std::vector<double> best_iou(cells, -1.0);
    auto slot = [&](int r, int c, int a) { return (static_cast<std::size_t>(r) * gw + c) * na + a; };

    for (const auto& gt : boxes) {
      const BoxF g = to_boxf(gt);
      const double cx = g.x + g.width / 2;
      const double cy = g.y + g.height / 2;
      const int col = std::clamp(static_cast<int>(std::floor(cx / stride)), 0, gw - 1);
      const int row = std::clamp(static_cast<int>(std::floor(cy / stride)), 0, gh - 1);
      int best = 0;
      double best_value = -1.0;
      for (int a = 0; a < na; ++a) {
        const double v = iou(g, anchored_box(row, col, stride, anchors[a]));
        if (v > best_value) {
          best_value = v;
          best = a;
        }
      }
      const auto k = slot(row, col, best);
      if (best_value > best_iou[k]) {
        best_iou[k] = best_value;
        obj[k] = 1.0F;
        label[k] = static_cast<std::int64_t>(gt.label);
        target[k * 4 + 0] = static_cast<float>(cx / stride - (col + 0.5));
        target[k * 4 + 1] = static_cast<float>(cy / stride - (row + 0.5));
        target[k * 4 + 2] = static_cast<float>(std::log(g.width / anchors[best].width));
        target[k * 4 + 3] = static_cast<float>(std::log(g.height / anchors[best].height));
      }
    }
    for (int r = 0; r < gh; ++r) {
      for (int c = 0; c < gw; ++c) {
        for (int a = 0; a < na; ++a) {
          const auto k = slot(r, c, a);
          if (obj[k] > 0) continue;
          const BoxF ab = anchored_box(r, c, stride, anchors[a]);
          for (const auto& gt : boxes) {
            if (iou(ab, to_boxf(gt)) > 0.5) {
              ignore[k] = 1;
              break;
            }
          }
        }
      }
    }
    ScaleTargets t;
    t.objectness = torch::from_blob(obj.data(), {1, gh, gw, na}, torch::kFloat32).clone();
    t.ignore = torch::from_blob(ignore.data(), {1, gh, gw, na}, torch::kUInt8).clone().to(torch::kBool);
    t.label = torch::from_blob(label.data(), {1, gh, gw, na}, torch::kInt64).clone();
    t.box = torch::from_blob(target.data(), {1, gh, gw, na, 4}, torch::kFloat32).clone();
    map.scales.push_back(std::move(t));
  }
  return map;
}

TargetMap assign_targets(const std::vector<std::vector<MarkerAnnotation>>& boxes,
                         const AnchorConfig& config, CanvasSize image,
                         std::optional<MarkerClass> relabel) {
  if (boxes.empty()) throw Error("assign_targets: empty batch");
  std::vector<TargetMap> items;
  for (auto item : boxes) {
    if (relabel) {
      for (auto& b : item) b.label = *relabel;
    }
    items.push_back(assign_targets(std::span<const MarkerAnnotation>(item), config, image));
  }
  TargetMap map;
  for (std::size_t s = 0; s < config.num_scales(); ++s) {
    std::vector<torch::Tensor> obj, ign, lab, box;
    for (const auto& it : items) {
      obj.push_back(it.scales[s].objectness);
      ign.push_back(it.scales[s].ignore);
      lab.push_back(it.scales[s].label);
      box.push_back(it.scales[s].box);
    }
    map.scales.push_back({torch::cat(obj), torch::cat(ign), torch::cat(lab), torch::cat(box)});
  }
  return map;
}

std::vector<Detection> decode_detections(const DetectorOutput& out, const AnchorConfig& config,
                                         double conf_threshold, double nms_iou,
                                         std::int64_t batch_index) {
  if (!(conf_threshold > 0 && conf_threshold < 1) || !(nms_iou > 0 && nms_iou < 1)) {
    throw ConfigError("decode thresholds must lie in (0, 1)");
  }
  if (out.scales.size() != config.num_scales()) throw Error("decode: scale count mismatch");
  std::vector<Detection> candidates;
  for (std::size_t s = 0; s < out.scales.size(); ++s) {
    const auto& scale = out.scales[s];
    const int stride = config.strides[s];
    auto cls = scale.cls.select(0, batch_index).detach().to(torch::kFloat64).contiguous();
    auto loc = scale.loc.select(0, batch_index).detach().to(torch::kFloat64).contiguous();
    auto ca = cls.accessor<double, 4>();
    auto la = loc.accessor<double, 4>();
    const double img_h = static_cast<double>(cls.size(0)) * stride;
    const double img_w = static_cast<double>(cls.size(1)) * stride;
    for (int r = 0; r < cls.size(0); ++r) {
      for (int c = 0; c < cls.size(1); ++c) {
        for (int a = 0; a < cls.size(2); ++a) {
          int best_class = 0;
          for (int k = 1; k < kNumClasses; ++k) {
            if (ca[r][c][a][1 + k] > ca[r][c][a][1 + best_class]) best_class = k;
          }
          const double conf = ca[r][c][a][0] * ca[r][c][a][1 + best_class];
          if (conf < conf_threshold) continue;
          const auto& anchor = config.anchors[s][a];
          const double cx = (c + 0.5 + la[r][c][a][0]) * stride;
          const double cy = (r + 0.5 + la[r][c][a][1]) * stride;
          const double w = anchor.width * std::exp(la[r][c][a][2]);
          const double h = anchor.height * std::exp(la[r][c][a][3]);
          const double x0 = std::clamp(cx - w / 2, 0.0, img_w);
          const double y0 = std::clamp(cy - h / 2, 0.0, img_h);
          const double x1 = std::clamp(cx + w / 2, 0.0, img_w);
          const double y1 = std::clamp(cy + h / 2, 0.0, img_h);
          if (x1 <= x0 || y1 <= y0) continue;
          candidates.push_back({{x0, y0, x1 - x0, y1 - y0}, static_cast<MarkerClass>(best_class), conf});
        }
      }
    }
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const Detection& a, const Detection& b) { return a.confidence > b.confidence; });
  std::vector<Detection> kept;
  for (const auto& d : candidates) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return k.label == d.label && iou(k.box, d.box) > nms_iou;
    });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

SpectralConv2dImpl::SpectralConv2dImpl(int in_channels, int out_channels, int kernel, int stride,
                                       int padding)
    : stride_(stride), padding_(padding) {
  weight = register_parameter("weight", torch::empty({out_channels, in_channels, kernel, kernel}));
  bias = register_parameter("bias", torch::empty({out_channels}));
  nn::init::kaiming_uniform_(weight, std::sqrt(5.0));
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_channels * kernel * kernel));
  nn::init::uniform_(bias, -bound, bound);
  u = register_buffer("u", torch::nn::functional::normalize(
                               torch::randn({out_channels}),
                               torch::nn::functional::NormalizeFuncOptions().dim(0).eps(1e-12)));
}

torch::Tensor SpectralConv2dImpl::forward(const torch::Tensor& x) {
  namespace F = torch::nn::functional;
  const auto norm = F::NormalizeFuncOptions().dim(0).eps(1e-12);
  auto w_mat = weight.reshape({weight.size(0), -1});
  torch::Tensor v;
  {
    torch::NoGradGuard guard;
    v = F::normalize(torch::mv(w_mat.t(), u), norm);
    if (is_training()) {
      u.copy_(F::normalize(torch::mv(w_mat, v), norm));
    }
  }
  // A copy, so later in-place power iterations do not invalidate this graph.
  const auto sigma = torch::dot(u.clone(), torch::mv(w_mat, v));
  return torch::conv2d(x, weight / sigma, bias, stride_, padding_);
}

PatchDiscriminatorImpl::PatchDiscriminatorImpl(const PatchDiscriminatorConfig& config) {
  int in = config.in_channels;
  for (int w : config.widths) {
    layers_->push_back(SpectralConv2d(in, w, 5, 2, 2));
    in = w;
  }
  layers_ = register_module("layers", layers_);
}

torch::Tensor PatchDiscriminatorImpl::forward(const torch::Tensor& image) {
  auto x = image.dim() == 3 ? image.unsqueeze(0) : image;
  const auto n = layers_->size();
  for (std::size_t i = 0; i < n; ++i) {
    x = layers_[i]->as<SpectralConv2d>()->forward(x);
    if (i + 1 < n) x = torch::leaky_relu(x, 0.2);
  }
  return x.mean(1);
}

torch::Tensor hinge_discriminator_loss(const torch::Tensor& real_scores,
                                       const torch::Tensor& fake_scores) {
  return torch::relu(1 - real_scores).mean() + torch::relu(1 + fake_scores).mean();
}

torch::Tensor hinge_generator_loss(const torch::Tensor& fake_scores) { return -fake_scores.mean(); }

}  // namespace blindpaint

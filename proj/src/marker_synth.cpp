#include "blindpaint/marker_synth.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "blindpaint/error.hpp"

namespace blindpaint {

namespace {

// Calls visit(row, col) for every in-canvas pixel of the dilated marker skeleton. Pixels may be
// visited more than once.
template <typename Visit>
void for_each_raster_pixel(const MarkerSpec& spec, CanvasSize canvas, Visit&& visit) {
  const int lo = -(spec.thickness - 1) / 2;
  const int hi = lo + spec.thickness - 1;
  auto dilate = [&](int r, int c) {
    for (int dr = lo; dr <= hi; ++dr) {
      for (int dc = lo; dc <= hi; ++dc) {
        const int rr = r + dr;
        const int cc = c + dc;
        if (rr >= 0 && rr < canvas.height && cc >= 0 && cc < canvas.width) visit(rr, cc);
      }
    }
  };
  const auto [r0, c0] = spec.center;
  for (int t = -spec.arm_length; t <= spec.arm_length; ++t) {
    if (spec.kind == MarkerKind::crosshair) {
      dilate(r0, c0 + t);
      dilate(r0 + t, c0);
    } else {
      dilate(r0 + t, c0 + t);
      dilate(r0 + t, c0 - t);
    }
  }
}

void check_spec(const MarkerSpec& spec, CanvasSize canvas) {
  if (canvas.height <= 0 || canvas.width <= 0) throw ConfigError("canvas size must be positive");
  if (spec.arm_length < 1) throw ConfigError("marker arm_length must be >= 1");
  if (spec.thickness < 1) throw ConfigError("marker thickness must be >= 1");
  if (spec.center.row < 0 || spec.center.row >= canvas.height || spec.center.col < 0 ||
      spec.center.col >= canvas.width) {
    throw ConfigError("marker center (" + std::to_string(spec.center.row) + "," +
                      std::to_string(spec.center.col) + ") lies outside " +
                      std::to_string(canvas.height) + "x" + std::to_string(canvas.width) +
                      " canvas");
  }
}

int uniform(std::mt19937_64& rng, IntRange range) {
  return std::uniform_int_distribution<int>(range.min, range.max)(rng);
}

}  // namespace

std::string to_string(MarkerClass label) {
  return label == MarkerClass::marker ? "marker" : "fake_marker";
}

MarkerClass marker_class_from_string(const std::string& name) {
  if (name == "marker") return MarkerClass::marker;
  if (name == "fake_marker") return MarkerClass::fake_marker;
  throw Error("unknown marker class '" + name + "'");
}

std::string to_string(IntensityMode mode) {
  switch (mode) {
    case IntensityMode::fixed_white: return "fixed_white";
    case IntensityMode::fixed_black: return "fixed_black";
    case IntensityMode::sampled: return "sampled";
  }
  return "?";
}

IntensityMode intensity_mode_from_string(const std::string& name) {
  if (name == "fixed_white") return IntensityMode::fixed_white;
  if (name == "fixed_black") return IntensityMode::fixed_black;
  if (name == "sampled") return IntensityMode::sampled;
  throw ConfigError("unknown marker intensity mode '" + name +
                    "' (expected fixed_white, fixed_black or sampled)");
}

MarkerPolicy MarkerPolicy::for_image_size(int side) {
  const double scale = side / 64.0;
  MarkerPolicy policy;
  policy.arm_length = {std::max(1, static_cast<int>(std::lround(3 * scale))),
                       std::max(1, static_cast<int>(std::lround(9 * scale)))};
  policy.thickness = {1, std::max(1, static_cast<int>(std::lround(2 * scale)))};
  return policy;
}

void MarkerPolicy::validate() const {
  auto check = [](IntRange r, int floor, const char* name) {
    if (r.min < floor || r.max < r.min) {
      throw ConfigError(std::string("marker policy: ") + name + " range [" +
                        std::to_string(r.min) + ", " + std::to_string(r.max) + "] is invalid");
    }
  };
  check(count, 0, "count");
  check(arm_length, 1, "arm_length");
  check(thickness, 1, "thickness");
}

torch::Tensor rasterize_marker(const MarkerSpec& spec, CanvasSize canvas) {
  check_spec(spec, canvas);
  auto mask = torch::zeros({canvas.height, canvas.width}, torch::kFloat32);
  auto acc = mask.accessor<float, 2>();
  for_each_raster_pixel(spec, canvas, [&](int r, int c) { acc[r][c] = 1.0F; });
  return mask;
}

std::vector<MarkerSpec> sample_marker_specs(const MarkerPolicy& policy, CanvasSize canvas,
                                            std::uint64_t seed) {
  policy.validate();
  const int min_extent = 2 * policy.arm_length.min + 1;
  if (policy.count.max > 0 && (canvas.height < min_extent || canvas.width < min_extent)) {
    throw ConfigError("image " + std::to_string(canvas.height) + "x" +
                      std::to_string(canvas.width) + " is smaller than the minimum marker extent " +
                      std::to_string(min_extent));
  }
  std::mt19937_64 rng(seed);
  const int count = uniform(rng, policy.count);
  std::vector<MarkerSpec> specs;
  specs.reserve(count);
  for (int i = 0; i < count; ++i) {
    MarkerSpec spec;
    spec.kind = std::bernoulli_distribution(0.5)(rng) ? MarkerKind::fork : MarkerKind::crosshair;
    spec.arm_length = uniform(rng, policy.arm_length);
    spec.thickness = uniform(rng, policy.thickness);
    // Keep the whole marker on canvas whenever the canvas is large enough.
    const int margin_r = std::min(spec.arm_length, (canvas.height - 1) / 2);
    const int margin_c = std::min(spec.arm_length, (canvas.width - 1) / 2);
    spec.center.row = uniform(rng, {margin_r, canvas.height - 1 - margin_r});
    spec.center.col = uniform(rng, {margin_c, canvas.width - 1 - margin_c});
    switch (policy.intensity) {
      case IntensityMode::fixed_white: spec.intensity = {1.0F, 1.0F, 1.0F}; break;
      case IntensityMode::fixed_black: spec.intensity = {0.0F, 0.0F, 0.0F}; break;
      case IntensityMode::sampled: {
        std::uniform_real_distribution<float> u(0.0F, 1.0F);
        for (auto& v : spec.intensity) v = u(rng);
        break;
      }
    }
    specs.push_back(spec);
  }
  return specs;
}

StampResult stamp_markers(const torch::Tensor& clean, std::span<const MarkerSpec> specs) {
  if (clean.dim() != 3) throw Error("stamp_markers expects a [C, H, W] image");
  const CanvasSize canvas = image_size(clean);
  const int channels = static_cast<int>(clean.size(0));
  StampResult result;
  result.corrupted = clean.to(torch::kFloat32).clone().contiguous();
  result.mask = torch::zeros({canvas.height, canvas.width}, torch::kFloat32);
  auto img = result.corrupted.accessor<float, 3>();
  auto mask = result.mask.accessor<float, 2>();
  for (const auto& spec : specs) {
    check_spec(spec, canvas);
    int r_min = canvas.height, r_max = -1, c_min = canvas.width, c_max = -1;
    for_each_raster_pixel(spec, canvas, [&](int r, int c) {
      for (int ch = 0; ch < channels; ++ch) {
        img[ch][r][c] = std::clamp(spec.intensity[std::min(ch, 2)], 0.0F, 1.0F);
      }
      mask[r][c] = 1.0F;
      r_min = std::min(r_min, r);
      r_max = std::max(r_max, r);
      c_min = std::min(c_min, c);
      c_max = std::max(c_max, c);
    });
    result.boxes.push_back({c_min, r_min, c_max - c_min + 1, r_max - r_min + 1, MarkerClass::marker});
  }
  return result;
}

MarkerAnnotation tight_box(const torch::Tensor& mask, MarkerClass label) {
  auto nz = torch::nonzero(mask > 0);
  if (nz.size(0) == 0) throw Error("tight_box: mask is empty");
  auto lo = std::get<0>(nz.min(0));
  auto hi = std::get<0>(nz.max(0));
  const int r0 = static_cast<int>(lo[0].item<int64_t>());
  const int c0 = static_cast<int>(lo[1].item<int64_t>());
  return {c0, r0, static_cast<int>(hi[1].item<int64_t>()) - c0 + 1,
          static_cast<int>(hi[0].item<int64_t>()) - r0 + 1, label};
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over a combined state
  std::uint64_t z = a * 0x9E3779B97F4A7C15ULL + b + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace blindpaint

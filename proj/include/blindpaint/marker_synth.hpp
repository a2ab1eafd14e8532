#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "blindpaint/image_io.hpp"

namespace blindpaint {

enum class MarkerKind { crosshair, fork };

// Detector class labels. Real markers on corrupted inputs are `marker`; marker regions inside
// generator reconstructions are `fake_marker`.
enum class MarkerClass : int { marker = 0, fake_marker = 1 };

std::string to_string(MarkerClass label);
MarkerClass marker_class_from_string(const std::string& name);

struct PixelPos {
  int row = 0;
  int col = 0;
};

struct MarkerSpec {
  MarkerKind kind = MarkerKind::crosshair;
  PixelPos center;
  int arm_length = 1;
  int thickness = 1;
  std::array<float, 3> intensity{1.0F, 1.0F, 1.0F};
};

// Axis-aligned pixel box: covers columns [x_min, x_min + width) and rows [y_min, y_min + height).
struct MarkerAnnotation {
  int x_min = 0;
  int y_min = 0;
  int width = 0;
  int height = 0;
  MarkerClass label = MarkerClass::marker;

  bool operator==(const MarkerAnnotation&) const = default;
};

struct IntRange {
  int min = 0;
  int max = 0;
};

enum class IntensityMode { fixed_white, fixed_black, sampled };

std::string to_string(IntensityMode mode);
IntensityMode intensity_mode_from_string(const std::string& name);

struct MarkerPolicy {
  IntRange count{1, 4};
  IntRange arm_length{3, 9};
  IntRange thickness{1, 2};
  IntensityMode intensity = IntensityMode::fixed_white;
  std::uint64_t rng_seed = 0;

  // Default policy with arm lengths scaled linearly from the 64-pixel reference size.
  static MarkerPolicy for_image_size(int side);

  // Throws ConfigError on empty or negative ranges.
  void validate() const;
};

// Binary [H, W] raster of one marker, clipped to the canvas. Each skeleton pixel is dilated to
// a thickness x thickness square. Throws ConfigError if the center is off-canvas or the arm
// length / thickness is below 1.
torch::Tensor rasterize_marker(const MarkerSpec& spec, CanvasSize canvas);

// Deterministic in (policy, canvas, seed). policy.rng_seed is ignored here; callers fold it
// into `seed`.
std::vector<MarkerSpec> sample_marker_specs(const MarkerPolicy& policy, CanvasSize canvas,
                                            std::uint64_t seed);

struct StampResult {
  torch::Tensor corrupted;  // [C, H, W]
  torch::Tensor mask;       // [H, W], exactly {0, 1}
  std::vector<MarkerAnnotation> boxes;
};

// Paints each marker's raster with its intensity, later specs overwriting earlier ones.
StampResult stamp_markers(const torch::Tensor& clean, std::span<const MarkerSpec> specs);

// Tight bounding box of the nonzero pixels of an [H, W] mask. Throws Error if the mask is empty.
MarkerAnnotation tight_box(const torch::Tensor& mask, MarkerClass label = MarkerClass::marker);

// Order-sensitive 64-bit mixing used to derive per-sample seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace blindpaint

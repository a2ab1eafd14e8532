#pragma once

#include <filesystem>

#include <torch/torch.h>

namespace blindpaint {

struct CanvasSize {
  int height = 0;
  int width = 0;

  bool operator==(const CanvasSize&) const = default;
};

// Images are float32 tensors shaped [C, H, W] with values in [0, 1], RGB channel order.
// Masks are float32 tensors shaped [H, W].

// Decodes an 8-bit image file into a 3-channel [3, H, W] tensor. Grayscale inputs are
// replicated across channels. Throws Error naming the path when decoding fails.
torch::Tensor read_image(const std::filesystem::path& path);

// Reads a single-channel mask, binarized at half intensity, as [H, W].
torch::Tensor read_mask(const std::filesystem::path& path);

// Quantizes to 8 bits (round to nearest) and writes PNG. Accepts [C, H, W] with C in {1, 3}
// or an [H, W] mask.
void write_png(const std::filesystem::path& path, const torch::Tensor& image);

CanvasSize image_size(const torch::Tensor& image);

torch::Tensor resize_bilinear(const torch::Tensor& image, CanvasSize size);
torch::Tensor resize_nearest(const torch::Tensor& mask, CanvasSize size);

// Concatenates same-height [C, H, W] panels left to right; 1-channel panels are expanded to RGB.
torch::Tensor hconcat(const std::vector<torch::Tensor>& panels);

bool is_image_file(const std::filesystem::path& path);

}  // namespace blindpaint

#include "blindpaint/image_io.hpp"

#include <algorithm>
#include <string>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "blindpaint/error.hpp"

namespace blindpaint {

namespace {

// [C, H, W] float -> HxW CV_32FC(C), channel order flipped to BGR for 3-channel images.
cv::Mat to_mat(const torch::Tensor& image) {
  auto t = image.detach().to(torch::kFloat32).contiguous();
  if (t.dim() == 2) t = t.unsqueeze(0);
  const int channels = static_cast<int>(t.size(0));
  if (channels == 3) t = t.flip({0});
  t = t.permute({1, 2, 0}).contiguous();
  cv::Mat mat(static_cast<int>(t.size(0)), static_cast<int>(t.size(1)), CV_32FC(channels),
              t.data_ptr<float>());
  return mat.clone();
}

torch::Tensor from_mat(const cv::Mat& mat) {
  cv::Mat f;
  mat.convertTo(f, CV_32F);
  if (!f.isContinuous()) f = f.clone();
  const int channels = f.channels();
  auto t = torch::from_blob(f.data, {f.rows, f.cols, channels}, torch::kFloat32).clone();
  t = t.permute({2, 0, 1}).contiguous();
  if (channels == 3) t = t.flip({0}).contiguous();
  return t;
}

}  // namespace

torch::Tensor read_image(const std::filesystem::path& path) {
  cv::Mat raw = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (raw.empty()) throw Error("cannot decode image: " + path.string());
  return from_mat(raw) / 255.0F;
}

torch::Tensor read_mask(const std::filesystem::path& path) {
  cv::Mat raw = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (raw.empty()) throw Error("cannot decode mask: " + path.string());
  return (from_mat(raw).squeeze(0) >= 128.0F).to(torch::kFloat32);
}

void write_png(const std::filesystem::path& path, const torch::Tensor& image) {
  if (image.dim() != 2 && image.dim() != 3) {
    throw Error("write_png expects [H, W] or [C, H, W], got " + std::to_string(image.dim()) +
                " dims");
  }
  cv::Mat f = to_mat(image.clamp(0.0, 1.0) * 255.0F);
  cv::Mat u8;
  f.convertTo(u8, CV_8U);  // saturating round-to-nearest
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::vector<int> params{cv::IMWRITE_PNG_COMPRESSION, 6};
  if (!cv::imwrite(path.string(), u8, params)) throw Error("cannot write image: " + path.string());
}

CanvasSize image_size(const torch::Tensor& image) {
  return {static_cast<int>(image.size(-2)), static_cast<int>(image.size(-1))};
}

torch::Tensor resize_bilinear(const torch::Tensor& image, CanvasSize size) {
  if (image_size(image) == size) return image;
  cv::Mat out;
  cv::resize(to_mat(image), out, cv::Size(size.width, size.height), 0, 0, cv::INTER_LINEAR);
  auto t = from_mat(out);
  return image.dim() == 2 ? t.squeeze(0) : t;
}

torch::Tensor resize_nearest(const torch::Tensor& mask, CanvasSize size) {
  if (image_size(mask) == size) return mask;
  cv::Mat out;
  cv::resize(to_mat(mask), out, cv::Size(size.width, size.height), 0, 0, cv::INTER_NEAREST);
  auto t = from_mat(out);
  return mask.dim() == 2 ? t.squeeze(0) : t;
}

torch::Tensor hconcat(const std::vector<torch::Tensor>& panels) {
  std::vector<torch::Tensor> rgb;
  rgb.reserve(panels.size());
  for (const auto& p : panels) {
    auto t = p.detach().to(torch::kFloat32);
    if (t.dim() == 2) t = t.unsqueeze(0);
    if (t.size(0) == 1) t = t.expand({3, t.size(1), t.size(2)});
    rgb.push_back(t);
  }
  return torch::cat(rgb, 2);
}

bool is_image_file(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp" || ext == ".tif" ||
         ext == ".tiff";
}

}  // namespace blindpaint

#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "blindpaint/datasets.hpp"
#include "blindpaint/generator.hpp"
#include "json.hpp"

namespace blindpaint {

// All metrics take [C, H, W] (or [H, W]) images in [0, 1] and are computed in double precision
// on the 8-bit intensity scale.

inline constexpr double kPsnrCap = 100.0;

double mse(const torch::Tensor& a, const torch::Tensor& b);
double psnr_from_mse(double mse_value, double peak = 255.0);
double psnr(const torch::Tensor& a, const torch::Tensor& b, double peak = 255.0);

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 255.0;
};

// Mean local SSIM over the valid (unpadded) window positions of each channel, averaged over
// channels. Throws Error if the image is smaller than the window.
double ssim(const torch::Tensor& a, const torch::Tensor& b, const SsimOptions& options = {});

struct MetricsRow {
  std::string name;
  double psnr_db = 0;
  double ssim = 0;
  double mse = 0;
};

struct Aggregate {
  double mean = 0;
  double sd = 0;  // population standard deviation
};

enum class MetricScope { full, mask_only };
std::string to_string(MetricScope scope);

struct MetricsReport {
  MetricScope scope = MetricScope::full;
  std::vector<MetricsRow> rows;
  Aggregate psnr;
  Aggregate ssim;
  Aggregate mse;

  // Recomputes the aggregates from rows, summing in row order.
  void finalize();
  nlohmann::json to_json() const;
};

MetricsRow full_metrics(const torch::Tensor& a, const torch::Tensor& b);

// MSE/PSNR over the union of box interiors; SSIM per box crop (replicate-padded up to the window
// size) averaged over boxes. Throws Error when boxes is empty or a box leaves the image.
MetricsRow masked_metrics(const torch::Tensor& a, const torch::Tensor& b,
                          std::span<const MarkerAnnotation> boxes);

// Produces the restored image I^ ([3, H, W]) for one sample.
using Restorer = std::function<torch::Tensor(const CorruptedSample&)>;

Restorer generator_restorer(Generator generator);

struct Evaluation {
  MetricsReport full;
  MetricsReport mask_only;
  MetricsReport baseline_full;       // corrupted input I scored against I*
  MetricsReport baseline_mask_only;
};

// Scores every sample of `dataset` (loaded without augmentation, epoch seed 0). Samples without
// boxes are left out of the mask-only reports.
Evaluation evaluate(const Restorer& restore, const DatasetIndex& dataset, const MarkerPolicy& policy);

// Writes per_image.csv and summary.json into `dir`.
void write_reports(const Evaluation& evaluation, const std::filesystem::path& dir);
nlohmann::json summary_json(const Evaluation& evaluation);

// "PSNR 37.877±3.289  SSIM 0.995±0.002  MSE 13.027±10.201"
std::string format_row(const MetricsReport& report);

}  // namespace blindpaint

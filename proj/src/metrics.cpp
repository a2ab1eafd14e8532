#include "blindpaint/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "blindpaint/error.hpp"

namespace blindpaint {

namespace {

torch::Tensor as_chw_double(const torch::Tensor& t) {
  auto d = t.detach().to(torch::kFloat64);
  return d.dim() == 2 ? d.unsqueeze(0) : d;
}

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (!a.sizes().equals(b.sizes())) throw Error(std::string(what) + ": image shapes differ");
}

torch::Tensor gaussian_window(const SsimOptions& o) {
  auto x = torch::arange(o.window, torch::kFloat64) - (o.window - 1) / 2.0;
  auto g = torch::exp(-x.square() / (2 * o.sigma * o.sigma));
  g = g / g.sum();
  return g;
}

}  // namespace

double mse(const torch::Tensor& a, const torch::Tensor& b) {
  check_same_shape(a, b, "mse");
  const auto sq = ((as_chw_double(a) - as_chw_double(b)) * 255.0).square();
  return sq.sum().item<double>() / static_cast<double>(sq.numel());
}

double psnr_from_mse(double mse_value, double peak) {
  if (mse_value <= 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse_value));
}

double psnr(const torch::Tensor& a, const torch::Tensor& b, double peak) {
  return psnr_from_mse(mse(a, b), peak);
}

double ssim(const torch::Tensor& a, const torch::Tensor& b, const SsimOptions& o) {
  check_same_shape(a, b, "ssim");
  const auto x = as_chw_double(a) * 255.0;
  const auto y = as_chw_double(b) * 255.0;
  if (x.size(1) < o.window || x.size(2) < o.window) {
    throw Error("ssim: image " + std::to_string(x.size(1)) + "x" + std::to_string(x.size(2)) +
                " is smaller than the " + std::to_string(o.window) + "x" + std::to_string(o.window) +
                " window");
  }
  const double c1 = (o.k1 * o.dynamic_range) * (o.k1 * o.dynamic_range);
  const double c2 = (o.k2 * o.dynamic_range) * (o.k2 * o.dynamic_range);
  const auto g = gaussian_window(o);
  const auto kernel = torch::outer(g, g).view({1, 1, o.window, o.window});
  // channels as batch: [C, 1, H, W]
  auto filt = [&](const torch::Tensor& t) { return torch::conv2d(t.unsqueeze(1), kernel); };
  const auto mu_x = filt(x);
  const auto mu_y = filt(y);
  const auto sxx = filt(x * x) - mu_x * mu_x;
  const auto syy = filt(y * y) - mu_y * mu_y;
  const auto sxy = filt(x * y) - mu_x * mu_y;
  const auto map = ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) /
                   ((mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2));
  return map.mean({1, 2, 3}).mean().item<double>();
}

std::string to_string(MetricScope scope) { return scope == MetricScope::full ? "full" : "mask_only"; }

void MetricsReport::finalize() {
  auto agg = [&](auto field) {
    Aggregate a;
    if (rows.empty()) return a;
    double sum = 0;
    for (const auto& r : rows) sum += r.*field;
    a.mean = sum / static_cast<double>(rows.size());
    double var = 0;
    for (const auto& r : rows) var += (r.*field - a.mean) * (r.*field - a.mean);
    a.sd = std::sqrt(var / static_cast<double>(rows.size()));
    return a;
  };
  psnr = agg(&MetricsRow::psnr_db);
  ssim = agg(&MetricsRow::ssim);
  mse = agg(&MetricsRow::mse);
}

nlohmann::json MetricsReport::to_json() const {
  return {{"scope", to_string(scope)},
          {"count", rows.size()},
          {"psnr_db", {{"mean", psnr.mean}, {"sd", psnr.sd}}},
          {"ssim", {{"mean", ssim.mean}, {"sd", ssim.sd}}},
          {"mse", {{"mean", mse.mean}, {"sd", mse.sd}}}};
}

MetricsRow full_metrics(const torch::Tensor& a, const torch::Tensor& b) {
  const double m = mse(a, b);
  return {"", psnr_from_mse(m), ssim(a, b), m};
}

MetricsRow masked_metrics(const torch::Tensor& a, const torch::Tensor& b,
                          std::span<const MarkerAnnotation> boxes) {
  check_same_shape(a, b, "masked_metrics");
  if (boxes.empty()) throw Error("masked_metrics: no boxes, mask-area scope is undefined");
  const auto x = as_chw_double(a);
  const auto y = as_chw_double(b);
  const auto h = x.size(1);
  const auto w = x.size(2);
  auto region = torch::zeros({h, w}, torch::kBool);
  double ssim_sum = 0;
  const SsimOptions options;
  for (const auto& box : boxes) {
    if (box.width < 1 || box.height < 1 || box.x_min < 0 || box.y_min < 0 ||
        box.x_min + box.width > w || box.y_min + box.height > h) {
      throw Error("masked_metrics: box outside the image");
    }
    using torch::indexing::Slice;
    const auto rows = Slice(box.y_min, box.y_min + box.height);
    const auto cols = Slice(box.x_min, box.x_min + box.width);
    region.index_put_({rows, cols}, true);
    auto cx = x.index({Slice(), rows, cols});
    auto cy = y.index({Slice(), rows, cols});
    const int64_t pad_h = std::max<int64_t>(0, options.window - box.height);
    const int64_t pad_w = std::max<int64_t>(0, options.window - box.width);
    if (pad_h > 0 || pad_w > 0) {
      const std::vector<int64_t> pad{pad_w / 2, pad_w - pad_w / 2, pad_h / 2, pad_h - pad_h / 2};
      namespace F = torch::nn::functional;
      const auto opts = F::PadFuncOptions(pad).mode(torch::kReplicate);
      cx = F::pad(cx.unsqueeze(0), opts).squeeze(0);
      cy = F::pad(cy.unsqueeze(0), opts).squeeze(0);
    }
    ssim_sum += ssim(cx, cy, options);
  }
  // Same summation as mse() so a whole-image box reproduces it bit for bit.
  const auto sq = ((x - y) * 255.0).square() * region.to(torch::kFloat64);
  const double count = region.sum().item<double>() * static_cast<double>(x.size(0));
  const double m = sq.sum().item<double>() / count;
  return {"", psnr_from_mse(m), ssim_sum / static_cast<double>(boxes.size()), m};
}

Restorer generator_restorer(Generator generator) {
  return [generator](const CorruptedSample& sample) mutable {
    torch::NoGradGuard guard;
    generator->eval();
    return generator->forward(sample.corrupted.unsqueeze(0)).composed.squeeze(0);
  };
}

Evaluation evaluate(const Restorer& restore, const DatasetIndex& dataset, const MarkerPolicy& policy) {
  Evaluation ev;
  ev.full.scope = ev.baseline_full.scope = MetricScope::full;
  ev.mask_only.scope = ev.baseline_mask_only.scope = MetricScope::mask_only;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto sample = load_sample(dataset, i, policy, 0, false);
    const auto restored = restore(sample);
    const auto name = dataset.entries[i].clean.filename().string();
    auto row = full_metrics(restored, sample.clean);
    auto base = full_metrics(sample.corrupted, sample.clean);
    row.name = base.name = name;
    ev.full.rows.push_back(row);
    ev.baseline_full.rows.push_back(base);
    if (!sample.boxes.empty()) {
      auto mrow = masked_metrics(restored, sample.clean, sample.boxes);
      auto mbase = masked_metrics(sample.corrupted, sample.clean, sample.boxes);
      mrow.name = mbase.name = name;
      ev.mask_only.rows.push_back(mrow);
      ev.baseline_mask_only.rows.push_back(mbase);
    }
  }
  ev.full.finalize();
  ev.mask_only.finalize();
  ev.baseline_full.finalize();
  ev.baseline_mask_only.finalize();
  return ev;
}

nlohmann::json summary_json(const Evaluation& ev) {
  return {{"restored", {{"full", ev.full.to_json()}, {"mask_only", ev.mask_only.to_json()}}},
          {"baseline", {{"full", ev.baseline_full.to_json()}, {"mask_only", ev.baseline_mask_only.to_json()}}}};
}

void write_reports(const Evaluation& ev, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream csv(dir / "per_image.csv", std::ios::trunc);
    if (!csv) throw Error("cannot write " + (dir / "per_image.csv").string());
    csv << "file,model,scope,psnr_db,ssim,mse\n";
    auto emit = [&](const MetricsReport& r, const char* model) {
      for (const auto& row : r.rows) {
        char line[256];
        std::snprintf(line, sizeof(line), ",%s,%s,%.6f,%.6f,%.6f\n", model, to_string(r.scope).c_str(),
                      row.psnr_db, row.ssim, row.mse);
        csv << row.name << line;
      }
    };
    emit(ev.full, "restored");
    emit(ev.mask_only, "restored");
    emit(ev.baseline_full, "baseline");
    emit(ev.baseline_mask_only, "baseline");
  }
  std::ofstream js(dir / "summary.json", std::ios::trunc);
  if (!js) throw Error("cannot write " + (dir / "summary.json").string());
  js << summary_json(ev).dump(2) << '\n';
}

std::string format_row(const MetricsReport& r) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "PSNR %.3f±%.3f  SSIM %.3f±%.3f  MSE %.3f±%.3f", r.psnr.mean,
                r.psnr.sd, r.ssim.mean, r.ssim.sd, r.mse.mean, r.mse.sd);
  return buf;
}

}  // namespace blindpaint

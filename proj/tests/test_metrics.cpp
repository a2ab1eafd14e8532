#include <cmath>
#include <fstream>

#include "blindpaint/error.hpp"
#include "blindpaint/metrics.hpp"
#include "test_helpers.hpp"

using namespace blindpaint;
using blindpaint::testing::TempDir;

namespace {

// Naive double-loop SSIM, Gaussian-weighted statistics over valid window positions.
double oracle_ssim(const torch::Tensor& a, const torch::Tensor& b) {
  const int win = 11;
  const double sigma = 1.5;
  std::vector<double> g(win);
  double gsum = 0;
  for (int i = 0; i < win; ++i) {
    g[i] = std::exp(-((i - 5) * (i - 5)) / (2 * sigma * sigma));
    gsum += g[i];
  }
  std::vector<std::vector<double>> w(win, std::vector<double>(win));
  for (int i = 0; i < win; ++i)
    for (int j = 0; j < win; ++j) w[i][j] = g[i] * g[j] / (gsum * gsum);
  const double c1 = std::pow(0.01 * 255, 2), c2 = std::pow(0.03 * 255, 2);

  const auto A = a.to(torch::kFloat64).mul(255).contiguous();
  const auto B = b.to(torch::kFloat64).mul(255).contiguous();
  const auto aa = A.accessor<double, 3>();
  const auto ba = B.accessor<double, 3>();
  double total = 0;
  for (int ch = 0; ch < A.size(0); ++ch) {
    double sum = 0;
    int count = 0;
    for (int r = 0; r + win <= A.size(1); ++r)
      for (int c = 0; c + win <= A.size(2); ++c) {
        double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
        for (int i = 0; i < win; ++i)
          for (int j = 0; j < win; ++j) {
            const double x = aa[ch][r + i][c + j], y = ba[ch][r + i][c + j];
            mx += w[i][j] * x;
            my += w[i][j] * y;
            xx += w[i][j] * x * x;
            yy += w[i][j] * y * y;
            xy += w[i][j] * x * y;
          }
        const double vx = xx - mx * mx, vy = yy - my * my, cov = xy - mx * my;
        sum += ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++count;
      }
    total += sum / count;
  }
  return total / static_cast<double>(A.size(0));
}

}  // namespace

TEST_CASE("mse and psnr closed forms") {
  const auto a = torch::rand({3, 16, 16}) * 0.5;
  CHECK(mse(a, a) == 0);
  CHECK(psnr(a, a) == kPsnrCap);
  const auto b = a + 16.0 / 255;
  CHECK(mse(a, b) == doctest::Approx(256).epsilon(1e-5));
  CHECK(psnr(a, b) == doctest::Approx(10 * std::log10(65025.0 / 256)).epsilon(1e-6));
  CHECK(psnr(a, b) == doctest::Approx(24.048).epsilon(1e-4));
  CHECK(psnr_from_mse(13.027) == doctest::Approx(36.98).epsilon(1e-4));
  CHECK_THROWS_AS(mse(a, torch::rand({3, 16, 15})), Error);
  double previous = kPsnrCap + 1;
  for (double m : {0.01, 0.5, 1.0, 13.027, 100.0, 5000.0}) {
    CHECK(psnr_from_mse(m) < previous);
    previous = psnr_from_mse(m);
  }
}

TEST_CASE("ssim") {
  torch::manual_seed(1);
  SUBCASE("identity and symmetry") {
    const auto a = torch::rand({3, 20, 24});
    const auto b = torch::rand({3, 20, 24});
    CHECK(ssim(a, a) == 1.0);
    CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-12));
  }
  SUBCASE("contrast inversion is negative") {
    const auto a = (torch::rand({1, 32, 32}) > 0.5).to(torch::kFloat32);
    CHECK(ssim(a, 1 - a) < 0);
  }
  SUBCASE("agrees with the double-loop oracle") {
    for (int t = 0; t < 5; ++t) {
      const auto a = torch::rand({3, 32, 32});
      const auto b = (a + torch::randn({3, 32, 32}) * 0.1).clamp(0, 1);
      CHECK(std::abs(ssim(a, b) - oracle_ssim(a, b)) < 1e-6);
    }
  }
  SUBCASE("too small") {
    CHECK_THROWS_AS(ssim(torch::rand({3, 10, 32}), torch::rand({3, 10, 32})), Error);
  }
}

TEST_CASE("masked metrics") {
  torch::manual_seed(2);
  SUBCASE("whole-image box equals full metrics exactly") {
    const auto a = torch::rand({3, 24, 20});
    const auto b = torch::rand({3, 24, 20});
    const std::vector<MarkerAnnotation> box{{0, 0, 20, 24, MarkerClass::marker}};
    const auto full = full_metrics(a, b);
    const auto masked = masked_metrics(a, b, box);
    CHECK(masked.mse == full.mse);
    CHECK(masked.psnr_db == full.psnr_db);
    CHECK(masked.ssim == full.ssim);
  }
  SUBCASE("two disjoint boxes") {
    auto a = torch::zeros({3, 32, 32});
    auto b = torch::zeros({3, 32, 32});
    using torch::indexing::Slice;
    b.index_put_({Slice(), Slice(0, 8), Slice(0, 8)}, 8.0 / 255);
    b.index_put_({Slice(), Slice(16, 24), Slice(16, 24)}, 16.0 / 255);
    const std::vector<MarkerAnnotation> boxes{{0, 0, 8, 8, MarkerClass::marker}, {16, 16, 8, 8, MarkerClass::marker}};
    CHECK(masked_metrics(a, b, boxes).mse == doctest::Approx(160).epsilon(1e-6));
  }
  SUBCASE("identical inside boxes") {
    const auto a = torch::rand({3, 16, 16});
    auto b = torch::rand({3, 16, 16});
    using torch::indexing::Slice;
    b.index_put_({Slice(), Slice(2, 6), Slice(3, 9)}, a.index({Slice(), Slice(2, 6), Slice(3, 9)}));
    const std::vector<MarkerAnnotation> box{{3, 2, 6, 4, MarkerClass::marker}};
    const auto row = masked_metrics(a, b, box);
    CHECK(row.mse == 0);
    CHECK(row.psnr_db == kPsnrCap);
    CHECK(row.ssim == doctest::Approx(1.0));
  }
  SUBCASE("invalid scopes") {
    const auto a = torch::rand({3, 16, 16});
    CHECK_THROWS_AS(masked_metrics(a, a, std::vector<MarkerAnnotation>{}), Error);
    const std::vector<MarkerAnnotation> out{{10, 10, 8, 8, MarkerClass::marker}};
    CHECK_THROWS_AS(masked_metrics(a, a, out), Error);
  }
}

TEST_CASE("report aggregation") {
  MetricsReport report;
  report.rows = {{"a", 10, 0.5, 4}, {"b", 20, 0.7, 2}, {"c", 30, 0.9, 0}};
  report.finalize();
  CHECK(report.psnr.mean == doctest::Approx(20));
  CHECK(report.psnr.sd == doctest::Approx(std::sqrt(200.0 / 3)));
  CHECK(report.mse.mean == doctest::Approx(2));
  CHECK(report.ssim.mean >= 0.5);
  CHECK(report.ssim.mean <= 0.9);
  const auto j = report.to_json();
  CHECK(j["psnr_db"]["mean"].get<double>() == doctest::Approx(20));
}

TEST_CASE("evaluate with stub restorers") {
  TempDir dir("eval");
  write_phantom_corpus(dir.path(), Split::test, 4, {32, 32}, 9);
  const auto index = scan_dataset(dir.path(), Layout::clean_only, Split::test, {32, 32});
  const auto policy = MarkerPolicy::for_image_size(32);

  const auto perfect = evaluate([](const CorruptedSample& s) { return s.clean; }, index, policy);
  REQUIRE(perfect.full.rows.size() == 4);
  for (const auto& r : perfect.full.rows) {
    CHECK(r.psnr_db == kPsnrCap);
    CHECK(r.ssim == 1.0);
    CHECK(r.mse == 0);
  }
  const auto identity = evaluate([](const CorruptedSample& s) { return s.corrupted; }, index, policy);
  CHECK(identity.full.to_json() == identity.baseline_full.to_json());
  CHECK(identity.mask_only.to_json() == identity.baseline_mask_only.to_json());
  CHECK(identity.full.psnr.mean < kPsnrCap);

  write_reports(identity, dir / "out");
  const auto again = evaluate([](const CorruptedSample& s) { return s.corrupted; }, index, policy);
  write_reports(again, dir / "out2");
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream in(p);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  CHECK(slurp(dir / "out/summary.json") == slurp(dir / "out2/summary.json"));
  CHECK(slurp(dir / "out/per_image.csv") == slurp(dir / "out2/per_image.csv"));
  CHECK(slurp(dir / "out/per_image.csv").rfind("file,model,scope,psnr_db,ssim,mse", 0) == 0);
}

#include <cmath>

#include "blindpaint/error.hpp"
#include "blindpaint/generator.hpp"
#include "test_helpers.hpp"

using namespace blindpaint;
using blindpaint::testing::bitwise_equal;

namespace {

GeneratorConfig small_config(BranchMode mode = BranchMode::two_branch) {
  GeneratorConfig c;
  c.encoder_width = 8;
  c.bottleneck_width = 8;
  c.branches = mode;
  return c;
}

double elu(double v) { return v > 0 ? v : std::expm1(v); }
double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Direct loop convolution with zero padding, [1, Cin, H, W] -> value at (o, r, c).
double conv_at(const torch::Tensor& x, const torch::Tensor& w, const torch::Tensor& b, int o, int r,
               int c, int dilation) {
  const auto xa = x.accessor<float, 4>();
  const auto wa = w.accessor<float, 4>();
  const int k = static_cast<int>(w.size(2));
  const int pad = dilation * (k - 1) / 2;
  double acc = b[o].item<double>();
  for (int i = 0; i < x.size(1); ++i)
    for (int u = 0; u < k; ++u)
      for (int v = 0; v < k; ++v) {
        const int rr = r - pad + u * dilation;
        const int cc = c - pad + v * dilation;
        if (rr < 0 || cc < 0 || rr >= x.size(2) || cc >= x.size(3)) continue;
        acc += static_cast<double>(xa[0][i][rr][cc]) * wa[o][i][u][v];
      }
  return acc;
}

void set_mask_head(Generator& g, float bias) {
  torch::NoGradGuard ng;
  g->mask_branch->head->weight.zero_();
  g->mask_branch->head->bias.fill_(bias);
}

}  // namespace

TEST_CASE("gated convolution") {
  torch::manual_seed(0);
  GatedConv2d block(GatedConvOptions{2, 3, 3, 1, 1, true});
  const auto x = torch::rand({1, 2, 4, 4});

  SUBCASE("gate closed") {
    torch::NoGradGuard ng;
    block->gate->weight.zero_();
    block->gate->bias.fill_(-100.0F);
    CHECK(block->forward(x).abs().max().item<float>() < 1e-4F);
  }
  SUBCASE("gate open") {
    torch::NoGradGuard ng;
    block->gate->bias.fill_(100.0F);
    block->gate->weight.zero_();
    const auto expected = torch::elu(block->feature->forward(x));
    CHECK((block->forward(x) - expected).abs().max().item<float>() < 1e-4F);
  }
  SUBCASE("matches a hand-rolled loop") {
    torch::NoGradGuard ng;
    const auto out = block->forward(x);
    double worst = 0;
    for (int o = 0; o < 3; ++o)
      for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) {
          const double f = conv_at(x, block->feature->weight, block->feature->bias, o, r, c, 1);
          const double g = conv_at(x, block->gate->weight, block->gate->bias, o, r, c, 1);
          worst = std::max(worst, std::abs(elu(f) * sigmoid(g) - out[0][o][r][c].item<double>()));
        }
    CHECK(worst < 1e-5);
  }
  SUBCASE("dilated hand-rolled loop") {
    GatedConv2d dil(GatedConvOptions{2, 2, 3, 1, 2, true});
    torch::NoGradGuard ng;
    const auto y = torch::rand({1, 2, 6, 6});
    const auto out = dil->forward(y);
    double worst = 0;
    for (int o = 0; o < 2; ++o)
      for (int r = 0; r < 6; ++r)
        for (int c = 0; c < 6; ++c) {
          const double f = conv_at(y, dil->feature->weight, dil->feature->bias, o, r, c, 2);
          const double g = conv_at(y, dil->gate->weight, dil->gate->bias, o, r, c, 2);
          worst = std::max(worst, std::abs(elu(f) * sigmoid(g) - out[0][o][r][c].item<double>()));
        }
    CHECK(worst < 1e-5);
  }
  SUBCASE("channel mismatch") {
    CHECK_THROWS(block->forward(torch::rand({1, 3, 4, 4})));
  }
}

TEST_CASE("compose") {
  const auto I = torch::full({1, 3, 4, 4}, 0.2F);
  const auto Ig = torch::full({1, 3, 4, 4}, 0.8F);
  CHECK(torch::allclose(compose(I, Ig, torch::full({1, 1, 4, 4}, 0.5F)), torch::full({1, 3, 4, 4}, 0.5F)));
  CHECK(bitwise_equal(compose(I, Ig, torch::zeros({1, 1, 4, 4})), I));
  CHECK(bitwise_equal(compose(I, Ig, torch::ones({1, 1, 4, 4})), Ig));
  CHECK_THROWS(compose(I, Ig, torch::zeros({1, 1, 4, 5})));
}

TEST_CASE("generator forward") {
  torch::manual_seed(1);
  Generator g(small_config());
  torch::NoGradGuard ng;

  SUBCASE("composition identity and ranges on random inputs") {
    for (int t = 0; t < 10; ++t) {
      const auto I = torch::rand({2, 3, 16, 16});
      const auto out = g->forward(I);
      CHECK(out.inpainted.sizes() == I.sizes());
      CHECK(out.composed.sizes() == I.sizes());
      CHECK(out.mask.sizes() == torch::IntArrayRef({2, 1, 16, 16}));
      CHECK(bitwise_equal(out.composed, out.mask * out.inpainted + (1 - out.mask) * I));
      for (const auto& t2 : {out.inpainted, out.mask, out.composed}) {
        CHECK(t2.min().item<float>() >= 0);
        CHECK(t2.max().item<float>() <= 1);
      }
    }
  }
  SUBCASE("unbatched input") {
    const auto out = g->forward(torch::rand({3, 8, 8}));
    CHECK(out.inpainted.sizes() == torch::IntArrayRef({3, 8, 8}));
    CHECK(out.mask.sizes() == torch::IntArrayRef({1, 8, 8}));
  }
  SUBCASE("mask forced to zero reproduces the input") {
    set_mask_head(g, -1000.0F);
    const auto I = torch::rand({1, 3, 16, 16});
    CHECK(bitwise_equal(g->forward(I).composed, I));
  }
  SUBCASE("mask forced to one reproduces the inpainting") {
    set_mask_head(g, 1000.0F);
    const auto out = g->forward(torch::rand({1, 3, 16, 16}));
    CHECK(bitwise_equal(out.composed, out.inpainted));
  }
  SUBCASE("indivisible size") {
    CHECK_THROWS_WITH_AS(g->forward(torch::rand({1, 3, 18, 16})), doctest::Contains("4"), Error);
  }
  SUBCASE("single branch") {
    Generator s(small_config(BranchMode::single_branch));
    CHECK(!s->mask_branch);
    const auto out = s->forward(torch::rand({1, 3, 16, 16}));
    CHECK(bitwise_equal(out.composed, out.inpainted));
    CHECK(out.mask.min().item<float>() == 1);
  }
}

TEST_CASE("branches share architecture apart from the head width") {
  Generator g(small_config());
  const auto a = g->inpaint_branch->named_parameters();
  const auto b = g->mask_branch->named_parameters();
  REQUIRE(a.size() == b.size());
  for (const auto& item : a) {
    const auto& other = b[item.key()];
    if (item.key().rfind("head", 0) == 0) {
      CHECK(item.value().size(0) == 3);
      CHECK(other.size(0) == 1);
    } else {
      CHECK(item.value().sizes() == other.sizes());
    }
  }
}

TEST_CASE("branch independence") {
  torch::manual_seed(2);
  Generator g(small_config());
  torch::NoGradGuard ng;
  const auto I = torch::rand({1, 3, 16, 16});
  const auto before = g->forward(I);
  for (auto& p : g->mask_branch->parameters()) p.add_(torch::randn_like(p) * 0.1);
  const auto mid = g->forward(I);
  CHECK(bitwise_equal(before.inpainted, mid.inpainted));
  CHECK(!bitwise_equal(before.mask, mid.mask));
  for (auto& p : g->inpaint_branch->parameters()) p.add_(torch::randn_like(p) * 0.1);
  const auto after = g->forward(I);
  CHECK(bitwise_equal(mid.mask, after.mask));
  CHECK(!bitwise_equal(mid.inpainted, after.inpainted));
}

TEST_CASE("finite-difference gradient of sum(composed)") {
  torch::manual_seed(3);
  Generator g(small_config());
  g->to(torch::kDouble);
  const auto I = torch::rand({1, 3, 16, 16}, torch::kDouble);
  auto params = g->parameters();
  std::mt19937_64 rng(4);
  int checked = 0;
  for (int trial = 0; trial < 12; ++trial) {
    auto& p = params[rng() % params.size()];
    const auto flat_index = static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(p.numel()));
    g->zero_grad();
    g->forward(I).composed.sum().backward();
    const double analytic = p.grad().view(-1)[flat_index].item<double>();
    const double h = 1e-4;
    double plus, minus;
    {
      torch::NoGradGuard ng;
      auto flat = p.view(-1);
      const double orig = flat[flat_index].item<double>();
      flat[flat_index] = orig + h;
      plus = g->forward(I).composed.sum().item<double>();
      flat[flat_index] = orig - h;
      minus = g->forward(I).composed.sum().item<double>();
      flat[flat_index] = orig;
    }
    const double numeric = (plus - minus) / (2 * h);
    const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    CHECK_MESSAGE(std::abs(analytic - numeric) / scale < 1e-3, "analytic " << analytic << " numeric " << numeric);
    ++checked;
  }
  CHECK(checked == 12);
}

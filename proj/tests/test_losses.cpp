#include <gtest/gtest.h>

#include <random>

#include "iidnet/losses.hpp"
#include "iidnet/selftest.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace iidnet;

namespace {

ColorVec random_color(std::mt19937_64& rng, double lo = 0.0, double hi = 2.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  return {d(rng), d(rng), d(rng)};
}

Decomposition random_decomposition(std::size_t h, std::size_t w, std::mt19937_64& rng) {
  return {random_image(h, w, rng(), 0.0, 1.5), random_gray(h, w, rng(), 0.0, 2.0), random_color(rng)};
}

// Reflectance with luminance exactly 0.5 at every pixel: gray 0.5 scaled
// per channel so that the weighted sum stays 0.5.
LinearImage half_luminance_image(std::size_t h, std::size_t w) { return LinearImage(h, w, {0.5, 0.5, 0.5}); }

double loop_cos_sim(const LinearImage& a, const LinearImage& b) {
  double s = 0.0;
  for (std::size_t y = 0; y < a.height(); ++y)
    for (std::size_t x = 0; x < a.width(); ++x) {
      const Rgb p = a.pixel(y, x), q = b.pixel(y, x);
      const double dot = p.r * q.r + p.g * q.g + p.b * q.b;
      const double np = std::sqrt(p.r * p.r + p.g * p.g + p.b * p.b);
      const double nq = std::sqrt(q.r * q.r + q.g * q.g + q.b * q.b);
      s += dot / (np * nq + 1e-8);
    }
  return s / double(a.pixel_count());
}

NetConfig tiny_config() {
  NetConfig c;
  c.depth = 2;
  c.input_height = c.input_width = 16;
  c.channels = {2, 3, 4};
  c.illum_head_channels = 3;
  c.neutral_illuminant_init = false;
  return c;
}

}  // namespace

TEST(L1, Basics) {
  const auto x = random_image(3, 3, 1);
  EXPECT_EQ(l1(x, x), 0.0);
  EXPECT_EQ(l1(LinearImage(2, 5, {0, 0, 0}), LinearImage(2, 5, {1, 1, 1})), 1.0);
  EXPECT_THROW(l1(LinearImage(2, 2), LinearImage(2, 3)), StructuralError);
}

TEST(L1, MatchesLoop) {
  const auto a = random_image(4, 5, 2), b = random_image(4, 5, 3);
  double s = 0.0;
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 5; ++x)
      for (std::size_t k = 0; k < 3; ++k) s += std::abs(a(y, x, k) - b(y, x, k));
  EXPECT_EQ(l1(a, b), s / 60.0);
}

TEST(CosSim, ScaledCopyIsOne) {
  const auto a = random_image(4, 4, 4, 0.1, 1.0);
  EXPECT_NEAR(cos_sim(a, scale(a, 3.7)), 1.0, 1e-6);
}

TEST(CosSim, OrthogonalChannelsAreZero) {
  EXPECT_EQ(cos_sim(LinearImage(3, 3, {1, 0, 0}), LinearImage(3, 3, {0, 1, 0})), 0.0);
}

TEST(CosSim, MatchesLoopOracle) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto a = random_image(4, 4, seed), b = random_image(4, 4, seed + 10);
    EXPECT_NEAR(cos_sim(a, b), loop_cos_sim(a, b), 1e-10);
  }
}

TEST(CosSim, ZeroPixelsContributeNothing) {
  EXPECT_EQ(cos_sim(LinearImage(2, 2), random_image(2, 2, 5)), 0.0);
}

TEST(CosSim, InUnitIntervalForNonnegativeImages) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const double c = cos_sim(random_image(3, 3, seed), random_image(3, 3, seed + 100));
    EXPECT_GE(c, 0.0);
    EXPECT_LE(c, 1.0);
  }
}

TEST(LumLoss, Cases) {
  EXPECT_NEAR(lum_loss(half_luminance_image(3, 3)), 0.0, 1e-15);
  EXPECT_EQ(lum_loss(LinearImage(3, 3, {1, 1, 1})), 0.5);
  EXPECT_EQ(lum_loss(LinearImage(3, 3, {0, 0, 0})), 0.5);
}

TEST(ReconstLoss, PerfectReconstructionIsMinusTwoLambda2) {
  const auto i1 = random_image(4, 4, 6, 0.1, 1.0), i2 = random_image(4, 4, 7, 0.1, 1.0);
  const auto r = reconst_loss(i1, i2, i1, i2);
  EXPECT_NEAR(r.value, -2.0, 1e-6);
}

TEST(ReconstLoss, BlackReconstructionOfWhiteIsSix) {
  const LinearImage ones(3, 3, {1, 1, 1}), zeros(3, 3);
  EXPECT_EQ(reconst_loss(ones, ones, zeros, zeros).value, 6.0);
}

TEST(ReconstLoss, RecombinesWeightedParts) {
  const auto i1 = random_image(4, 4, 8), i2 = random_image(4, 4, 9), h1 = random_image(4, 4, 10),
             h2 = random_image(4, 4, 11);
  const LossWeights w{2.5, 0.7, 1.0, 1.0, 1.0};
  const auto r = reconst_loss(i1, i2, h1, h2, w);
  EXPECT_EQ(r.l1, l1(i1, h1) + l1(i2, h2));
  EXPECT_EQ(r.cos, cos_sim(i1, h1) + cos_sim(i2, h2));
  EXPECT_EQ(r.value, 2.5 * r.l1 - 0.7 * r.cos);
}

TEST(ReflectLoss, PerfectCaseIsZero) {
  const auto r = half_luminance_image(4, 4);
  const ColorVec c1{0.9, 1.0, 1.1}, c2{1.05, 0.95, 1.0};
  EXPECT_NEAR(reflect_loss(r, r, c1, c2, c1, c2).value, 0.0, 1e-15);
}

TEST(ReflectLoss, IlluminantOffsetCostsLambda5TimesPointTwo) {
  const auto r = half_luminance_image(4, 4);
  const ColorVec c1{0.9, 1.0, 1.1}, c2{1.05, 0.95, 1.0};
  const ColorVec h1{c1.r + 0.1, c1.g + 0.1, c1.b + 0.1}, h2{c2.r + 0.1, c2.g + 0.1, c2.b + 0.1};
  EXPECT_NEAR(reflect_loss(r, r, c1, c2, h1, h2).value, 0.2, 1e-12);
}

TEST(ReflectLoss, RecombinesFromParts) {
  std::mt19937_64 rng(12);
  const auto r1 = random_image(5, 5, 13), r2 = random_image(5, 5, 14);
  const auto c1 = random_color(rng), c2 = random_color(rng), h1 = random_color(rng), h2 = random_color(rng);
  const LossWeights w{1.0, 1.0, 1.5, 0.3, 2.0};
  const auto r = reflect_loss(r1, r2, c1, c2, h1, h2, w);
  EXPECT_EQ(r.pair_l1, l1(r1, r2));
  EXPECT_EQ(r.lum_1, lum_loss(r1));
  EXPECT_EQ(r.lum_2, lum_loss(r2));
  EXPECT_EQ(r.illum_l1, l1(c1, h1) + l1(c2, h2));
  EXPECT_EQ(r.value, 1.5 * r.pair_l1 + 0.3 * (r.lum_1 + r.lum_2) + 2.0 * r.illum_l1);
}

TEST(TotalLoss, PerfectDecompositionIsMinusTwo) {
  const auto r = half_luminance_image(6, 6);
  const auto s = random_gray(6, 6, 15, 0.2, 1.5);
  const ColorVec c1{0.9, 1.0, 1.1}, c2{1.1, 1.0, 0.9};
  const Decomposition d1{r, s, c1}, d2{r, s, c2};
  const auto b = total_loss(reconstruct(d1), reconstruct(d2), d1, d2, c1, c2);
  EXPECT_NEAR(b.total, -2.0, 1e-6);
}

TEST(TotalLoss, LowerBoundAndRecombinationOverRandomInputs) {
  std::mt19937_64 rng(16);
  const LossWeights w;
  for (int i = 0; i < 1000; ++i) {
    const auto v1 = random_image(3, 3, rng()), v2 = random_image(3, 3, rng());
    const auto d1 = random_decomposition(3, 3, rng), d2 = random_decomposition(3, 3, rng);
    const auto c1 = random_color(rng, 0.9, 1.1), c2 = random_color(rng, 0.9, 1.1);
    const auto b = total_loss(v1, v2, d1, d2, c1, c2, w);
    ASSERT_GE(b.total, -2.0 * w.reconst_cos);
    ASSERT_EQ(b.total, b.recombine(w));
  }
}

TEST(TotalLoss, SymmetricInViewOrder) {
  std::mt19937_64 rng(17);
  const auto v1 = random_image(4, 4, 18), v2 = random_image(4, 4, 19);
  const auto d1 = random_decomposition(4, 4, rng), d2 = random_decomposition(4, 4, rng);
  const ColorVec c1{0.95, 1.0, 1.04}, c2{1.02, 0.93, 1.0};
  EXPECT_EQ(total_loss(v1, v2, d1, d2, c1, c2).total, total_loss(v2, v1, d2, d1, c2, c1).total);
}

TEST(TotalLoss, PermutationInvariantOverPixels) {
  std::mt19937_64 rng(20);
  const auto v1 = random_image(1, 6, 21), v2 = random_image(1, 6, 22);
  const auto d1 = random_decomposition(1, 6, rng), d2 = random_decomposition(1, 6, rng);
  const ColorVec c1{1, 1, 1}, c2{0.9, 1.0, 1.1};
  auto flip = [](const Decomposition& d) {
    return Decomposition{flip_horizontal(d.reflectance), flip_horizontal(d.gray_shading), d.illuminant};
  };
  EXPECT_NEAR(total_loss(v1, v2, d1, d2, c1, c2).total,
              total_loss(flip_horizontal(v1), flip_horizontal(v2), flip(d1), flip(d2), c1, c2).total, 1e-12);
}

TEST(LossWeights, DefaultsAndJson) {
  const LossWeights w;
  EXPECT_EQ(w.reconst_l1, 3.0);
  EXPECT_EQ(w.reconst_cos, 1.0);
  EXPECT_EQ(w.reflect_pair, 2.0);
  EXPECT_EQ(w.luminance, 1.0);
  EXPECT_EQ(w.illuminant, 1.0);
  const nlohmann::json j = w;
  EXPECT_EQ(j.at("lambda3"), 2.0);
  EXPECT_EQ(j.get<LossWeights>(), w);
  EXPECT_EQ(LossWeights{-1.0}.problems().size(), 1u);
}

// ------------------------------------------------------------ tensor level

TEST(TensorLosses, AgreeWithValueLevel) {
  std::mt19937_64 rng(23);
  auto p = init<double>(tiny_config(), 24);
  const auto v1 = random_image(16, 16, 25), v2 = random_image(16, 16, 26);
  const ColorVec c1{0.92, 1.0, 1.07}, c2{1.08, 0.97, 0.91};
  ad::NoGradGuard g;
  const auto t1 = forward(p, images_to_tensor<double>({v1}), Mode::Eval);
  const auto t2 = forward(p, images_to_tensor<double>({v2}), Mode::Eval);
  const auto ct1 = ad::Tensor<double>::from({1, 3}, {c1.r, c1.g, c1.b});
  const auto ct2 = ad::Tensor<double>::from({1, 3}, {c2.r, c2.g, c2.b});
  const auto terms = tl::total_loss(images_to_tensor<double>({v1}), images_to_tensor<double>({v2}), t1, t2, ct1, ct2);
  const auto value = total_loss(v1, v2, to_decompositions(t1)[0], to_decompositions(t2)[0], c1, c2);
  EXPECT_NEAR(terms.breakdown.total, value.total, 1e-12);
  EXPECT_NEAR(terms.breakdown.reconst_l1, value.reconst_l1, 1e-12);
  EXPECT_NEAR(terms.breakdown.reconst_cos, value.reconst_cos, 1e-12);
  EXPECT_NEAR(terms.breakdown.reflect_pair_l1, value.reflect_pair_l1, 1e-12);
  EXPECT_NEAR(terms.breakdown.lum_1, value.lum_1, 1e-12);
  EXPECT_NEAR(terms.breakdown.illum_l1, value.illum_l1, 1e-12);
  EXPECT_NEAR(terms.breakdown.total, terms.breakdown.recombine({}), 1e-12);
}

TEST(TensorLosses, FullNetworkGradientMatchesFiniteDifferences) {
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    std::vector<std::string> names;
    const auto r = selftest::full_loss_grad_check(seed, 200, &names);
    EXPECT_EQ(r.checked, 200u);
    EXPECT_TRUE(r.passed) << "seed " << seed << " max rel error " << r.max_rel_error << " on "
                          << names[r.worst_input] << "[" << r.worst_index << "] analytic " << r.worst_analytic
                          << " numeric " << r.worst_numeric;
  }
}

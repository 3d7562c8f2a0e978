#include <gtest/gtest.h>

#include <random>

#include "iidnet/image.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace iidnet;

TEST(LuminanceWeights, SumToExactlyOne) {
  EXPECT_EQ(kLuminanceWeights[0] + kLuminanceWeights[1] + kLuminanceWeights[2], 1.0);
}

TEST(Luminance, WhiteIsOne) {
  const auto lum = luminance(LinearImage(3, 4, {1, 1, 1}));
  for (double v : lum.data()) EXPECT_EQ(v, 1.0);
}

TEST(Luminance, BlackIsZero) {
  const auto lum = luminance(LinearImage(2, 2, {0, 0, 0}));
  for (double v : lum.data()) EXPECT_EQ(v, 0.0);
}

TEST(Luminance, RedPixelUsesRedWeight) {
  EXPECT_EQ(luminance(LinearImage(1, 1, {1, 0, 0}))(0, 0), 0.2126);
  EXPECT_EQ(luminance(Rgb{0, 1, 0}), 0.7152);
  EXPECT_EQ(luminance(Rgb{0, 0, 1}), 0.0722);
}

TEST(Luminance, IsLinearInScale) {
  const auto img = random_image(5, 7, 1);
  const auto base = luminance(img);
  for (double k : {0.0, 0.5, 3.0, 17.25}) {
    const auto scaled = luminance(scale(img, k));
    for (std::size_t i = 0; i < base.pixel_count(); ++i)
      EXPECT_NEAR(scaled.data()[i], k * base.data()[i], 1e-12 * std::max(1.0, k * base.data()[i]));
  }
}

TEST(GeometricMean, ConstantImage) {
  // Luminance 0.18 on a gray image.
  EXPECT_NEAR(geometric_mean_luminance(LinearImage(4, 4, {0.18, 0.18, 0.18})), 0.18, 1e-5);
}

TEST(GeometricMean, TwoPixels) {
  LinearImage img(1, 2);
  img.set_pixel(0, 0, {0.25, 0.25, 0.25});
  img.set_pixel(0, 1, {1.0, 1.0, 1.0});
  EXPECT_NEAR(geometric_mean_luminance(img), 0.5, 1e-4);
}

TEST(GeometricMean, MatchesExtendedPrecisionOracle) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto img = random_image(8, 8, seed);
    const auto lum = luminance(img);
    const double expected =
        oracle::geometric_mean(std::vector<double>(lum.data().begin(), lum.data().end()), kGeoMeanEpsilon);
    EXPECT_NEAR(geometric_mean_luminance(img), expected, 1e-12 * expected);
  }
}

TEST(GeometricMean, ScalesLinearlyAwayFromEpsilon) {
  // Luminances of order 10 keep the epsilon offset below the tolerance.
  const auto img = random_image(6, 6, 3, 10.0, 20.0);
  const double g = geometric_mean_luminance(img);
  for (double k : {0.5, 2.0, 8.0}) EXPECT_NEAR(geometric_mean_luminance(scale(img, k)), k * g, 1e-6 * k * g);
}

TEST(Scale, OneIsIdentity) {
  const auto img = random_image(3, 3, 4);
  EXPECT_EQ(scale(img, 1.0), img);
}

TEST(Scale, RejectsNegativeAndNonFinite) {
  const auto img = random_image(2, 2, 4);
  EXPECT_THROW(scale(img, -1.0), StructuralError);
  EXPECT_THROW(scale(img, std::nan("")), StructuralError);
}

TEST(ApplyColor, WhiteIsIdentity) {
  const auto img = random_image(3, 5, 5);
  EXPECT_EQ(apply_color(img, {1, 1, 1}), img);
}

TEST(ApplyColor, ReciprocalRoundTrip) {
  const auto img = random_image(4, 4, 6);
  const ColorVec c{0.7, 1.3, 2.9};
  const auto back = apply_color(apply_color(img, c), c.reciprocal());
  for (std::size_t i = 0; i < img.data().size(); ++i)
    EXPECT_NEAR(back.data()[i], img.data()[i], 1e-12 * std::max(1e-300, img.data()[i]));
}

TEST(Hadamard, ComposesShadingColorAndReflectanceLikePerPixelLoop) {
  std::mt19937_64 rng(7);
  const auto r = random_image(4, 4, 8);
  const auto s_vals = oracle::random_vector(16, rng, 0.0, 2.0);
  const GrayMap s = GrayMap::from_data(4, 4, s_vals);
  const ColorVec c{0.9, 1.0, 1.1};
  const auto composed = hadamard(apply_color(gray_to_rgb(s), c), r);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x)
      for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(composed(y, x, k), (s(y, x) * c[k]) * r(y, x, k));
}

TEST(Hadamard, DimensionMismatchIsStructuralError) {
  EXPECT_THROW(hadamard(LinearImage(2, 2), LinearImage(2, 3)), StructuralError);
}

TEST(LinearImage, RejectsInvalidData) {
  EXPECT_THROW(LinearImage::from_data(1, 1, {0.1, -0.2, 0.3}), StructuralError);
  EXPECT_THROW(LinearImage::from_data(1, 1, {0.1, std::numeric_limits<double>::infinity(), 0.3}),
               StructuralError);
  EXPECT_THROW(LinearImage::from_data(1, 2, {0.1, 0.2, 0.3}), StructuralError);
  EXPECT_THROW(LinearImage(0, 3), StructuralError);
  EXPECT_THROW(GrayMap::from_data(1, 1, {-1.0}), StructuralError);
}

TEST(LinearImage, ValuesAboveOneAreLegal) {
  EXPECT_NO_THROW(LinearImage::from_data(1, 1, {3.0, 10.0, 1.5}));
}

TEST(FlipHorizontal, TwiceIsIdentity) {
  const auto img = random_image(5, 6, 9);
  EXPECT_EQ(flip_horizontal(flip_horizontal(img)), img);
  EXPECT_EQ(flip_horizontal(img).pixel(2, 0), img.pixel(2, 5));
}

TEST(Crop, CopiesWindowAndChecksBounds) {
  const auto img = random_image(5, 6, 10);
  const auto c = crop(img, 1, 2, 3, 4);
  EXPECT_EQ(c.height(), 3u);
  EXPECT_EQ(c.width(), 4u);
  EXPECT_EQ(c.pixel(0, 0), img.pixel(1, 2));
  EXPECT_EQ(c.pixel(2, 3), img.pixel(3, 5));
  EXPECT_THROW(crop(img, 3, 0, 3, 1), StructuralError);
}

TEST(ResizeBilinear, SameSizeIsIdentity) {
  const auto img = random_image(7, 5, 11);
  EXPECT_EQ(resize_bilinear(img, 7, 5), img);
}

TEST(ResizeBilinear, ConstantStaysConstant) {
  const LinearImage img(9, 13, {0.3, 0.6, 0.9});
  const auto out = resize_bilinear(img, 5, 4);
  for (std::size_t y = 0; y < 5; ++y)
    for (std::size_t x = 0; x < 4; ++x) {
      EXPECT_NEAR(out(y, x, 0), 0.3, 1e-15);
      EXPECT_NEAR(out(y, x, 2), 0.9, 1e-15);
    }
}

TEST(ResizeBilinear, HalvingAveragesPixelPairs) {
  // Half-pixel centers: output pixel 0 sits between inputs 0 and 1.
  LinearImage img(1, 4);
  for (std::size_t x = 0; x < 4; ++x) img.set_pixel(0, x, {double(x), 0, 0});
  const auto out = resize_bilinear(img, 1, 2);
  EXPECT_NEAR(out(0, 0, 0), 0.5, 1e-15);
  EXPECT_NEAR(out(0, 1, 0), 2.5, 1e-15);
}

TEST(Clip, ClampsToRange) {
  const auto img = LinearImage::from_data(1, 1, {0.5, 1.5, 0.0});
  const auto c = clip(img);
  EXPECT_EQ(c.pixel(0, 0), (Rgb{0.5, 1.0, 0.0}));
}

TEST(MeanColor, AveragesChannels) {
  LinearImage img(1, 2);
  img.set_pixel(0, 0, {1, 0, 0.5});
  img.set_pixel(0, 1, {0, 1, 0.5});
  EXPECT_EQ(mean_color(img), (Rgb{0.5, 0.5, 0.5}));
}

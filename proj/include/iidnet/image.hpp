// Linear-light RGB and gray rasters plus the elementwise algebra used by the
// simulator, the losses and the metrics.
//
// Values are linear radiance. The nominal range is [0, 1] but values above 1
// are legal everywhere and only clipped on export.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "iidnet/errors.hpp"

namespace iidnet {

/// Rec. 709 luminance coefficients. They sum to exactly 1.0 in binary64.
inline constexpr std::array<double, 3> kLuminanceWeights{0.2126, 0.7152, 0.0722};

/// Offset inside the log-mean so black pixels do not send it to -inf.
inline constexpr double kGeoMeanEpsilon = 1e-6;

struct Rgb {
  double r = 0.0;
  double g = 0.0;
  double b = 0.0;

  friend bool operator==(const Rgb&, const Rgb&) = default;
};

/// Global illuminant color; all components nonnegative and finite.
struct ColorVec {
  double r = 1.0;
  double g = 1.0;
  double b = 1.0;

  double operator[](std::size_t i) const { return i == 0 ? r : (i == 1 ? g : b); }
  double& operator[](std::size_t i) { return i == 0 ? r : (i == 1 ? g : b); }

  bool valid() const {
    return std::isfinite(r) && std::isfinite(g) && std::isfinite(b) && r >= 0.0 && g >= 0.0 &&
           b >= 0.0;
  }

  ColorVec reciprocal() const { return {1.0 / r, 1.0 / g, 1.0 / b}; }

  friend bool operator==(const ColorVec&, const ColorVec&) = default;
};

namespace detail {

inline void require_dims(std::size_t h, std::size_t w) {
  if (h == 0 || w == 0) throw StructuralError("image dimensions must be at least 1x1");
}

}  // namespace detail

/// H x W gray raster (shading, luminance).
class GrayMap {
 public:
  GrayMap() = default;
  GrayMap(std::size_t height, std::size_t width, double fill = 0.0)
      : height_(height), width_(width), data_(height * width, fill) {
    detail::require_dims(height, width);
  }

  static GrayMap from_data(std::size_t height, std::size_t width, std::vector<double> data) {
    GrayMap m;
    detail::require_dims(height, width);
    if (data.size() != height * width)
      throw StructuralError("gray map data size does not match dimensions");
    m.height_ = height;
    m.width_ = width;
    m.data_ = std::move(data);
    m.validate();
    return m;
  }

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t pixel_count() const noexcept { return height_ * width_; }
  bool empty() const noexcept { return data_.empty(); }

  double operator()(std::size_t y, std::size_t x) const { return data_[y * width_ + x]; }
  double& operator()(std::size_t y, std::size_t x) { return data_[y * width_ + x]; }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }

  bool is_valid() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v) && v >= 0.0; });
  }
  void validate() const {
    if (!is_valid()) throw StructuralError("gray map contains negative or non-finite values");
  }

  friend bool operator==(const GrayMap&, const GrayMap&) = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<double> data_;
};

/// H x W x 3 linear RGB raster, interleaved, row-major.
class LinearImage {
 public:
  LinearImage() = default;
  LinearImage(std::size_t height, std::size_t width, Rgb fill = {})
      : height_(height), width_(width), data_(height * width * 3) {
    detail::require_dims(height, width);
    for (std::size_t i = 0; i < height * width; ++i) {
      data_[3 * i] = fill.r;
      data_[3 * i + 1] = fill.g;
      data_[3 * i + 2] = fill.b;
    }
  }

  static LinearImage from_data(std::size_t height, std::size_t width, std::vector<double> data) {
    LinearImage img;
    detail::require_dims(height, width);
    if (data.size() != height * width * 3)
      throw StructuralError("image data size does not match dimensions");
    img.height_ = height;
    img.width_ = width;
    img.data_ = std::move(data);
    img.validate();
    return img;
  }

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t pixel_count() const noexcept { return height_ * width_; }
  bool empty() const noexcept { return data_.empty(); }

  Rgb pixel(std::size_t y, std::size_t x) const {
    const double* p = &data_[(y * width_ + x) * 3];
    return {p[0], p[1], p[2]};
  }
  void set_pixel(std::size_t y, std::size_t x, Rgb v) {
    double* p = &data_[(y * width_ + x) * 3];
    p[0] = v.r;
    p[1] = v.g;
    p[2] = v.b;
  }
  double operator()(std::size_t y, std::size_t x, std::size_t c) const {
    return data_[(y * width_ + x) * 3 + c];
  }
  double& operator()(std::size_t y, std::size_t x, std::size_t c) {
    return data_[(y * width_ + x) * 3 + c];
  }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }

  bool is_valid() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v) && v >= 0.0; });
  }
  void validate() const {
    if (!is_valid()) throw StructuralError("image contains negative or non-finite values");
  }

  friend bool operator==(const LinearImage&, const LinearImage&) = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<double> data_;
};

template <class A, class B>
void require_same_dims(const A& a, const B& b, const char* what) {
  if (a.height() != b.height() || a.width() != b.width())
    throw StructuralError(std::string(what) + ": dimension mismatch (" +
                          std::to_string(a.height()) + "x" + std::to_string(a.width()) + " vs " +
                          std::to_string(b.height()) + "x" + std::to_string(b.width()) + ")");
}

inline double luminance(const Rgb& p) {
  return kLuminanceWeights[0] * p.r + kLuminanceWeights[1] * p.g + kLuminanceWeights[2] * p.b;
}

inline GrayMap luminance(const LinearImage& img) {
  GrayMap out(img.height(), img.width());
  auto src = img.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < img.pixel_count(); ++i)
    dst[i] = kLuminanceWeights[0] * src[3 * i] + kLuminanceWeights[1] * src[3 * i + 1] +
             kLuminanceWeights[2] * src[3 * i + 2];
  return out;
}

/// exp(mean(ln(L + eps))).
inline double geometric_mean_luminance(const LinearImage& img) {
  const GrayMap lum = luminance(img);
  double acc = 0.0;
  for (double l : lum.data()) acc += std::log(l + kGeoMeanEpsilon);
  return std::exp(acc / static_cast<double>(lum.pixel_count()));
}

inline LinearImage scale(const LinearImage& img, double k) {
  if (!(k >= 0.0) || !std::isfinite(k))
    throw StructuralError("scale factor must be finite and nonnegative");
  LinearImage out = img;
  for (double& v : out.data()) v *= k;
  return out;
}

inline LinearImage hadamard(const LinearImage& a, const LinearImage& b) {
  require_same_dims(a, b, "hadamard");
  LinearImage out = a;
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bd[i];
  return out;
}

/// Channelwise multiply of every pixel by c, i.e. diag(c) * I(x, y).
inline LinearImage apply_color(const LinearImage& img, const ColorVec& c) {
  if (!c.valid()) throw StructuralError("color vector must be finite and nonnegative");
  LinearImage out = img;
  auto o = out.data();
  for (std::size_t i = 0; i < img.pixel_count(); ++i) {
    o[3 * i] *= c.r;
    o[3 * i + 1] *= c.g;
    o[3 * i + 2] *= c.b;
  }
  return out;
}

inline LinearImage gray_to_rgb(const GrayMap& g) {
  LinearImage out(g.height(), g.width());
  auto o = out.data();
  auto s = g.data();
  for (std::size_t i = 0; i < g.pixel_count(); ++i) o[3 * i] = o[3 * i + 1] = o[3 * i + 2] = s[i];
  return out;
}

inline LinearImage clip(const LinearImage& img, double lo = 0.0, double hi = 1.0) {
  LinearImage out = img;
  for (double& v : out.data()) v = std::clamp(v, lo, hi);
  return out;
}

inline GrayMap clip(const GrayMap& img, double lo = 0.0, double hi = 1.0) {
  GrayMap out = img;
  for (double& v : out.data()) v = std::clamp(v, lo, hi);
  return out;
}

inline Rgb mean_color(const LinearImage& img) {
  double r = 0, g = 0, b = 0;
  auto d = img.data();
  for (std::size_t i = 0; i < img.pixel_count(); ++i) {
    r += d[3 * i];
    g += d[3 * i + 1];
    b += d[3 * i + 2];
  }
  const double n = static_cast<double>(img.pixel_count());
  return {r / n, g / n, b / n};
}

inline LinearImage flip_horizontal(const LinearImage& img) {
  LinearImage out(img.height(), img.width());
  for (std::size_t y = 0; y < img.height(); ++y)
    for (std::size_t x = 0; x < img.width(); ++x)
      out.set_pixel(y, x, img.pixel(y, img.width() - 1 - x));
  return out;
}

inline GrayMap flip_horizontal(const GrayMap& map) {
  GrayMap out(map.height(), map.width());
  for (std::size_t y = 0; y < map.height(); ++y)
    for (std::size_t x = 0; x < map.width(); ++x) out(y, x) = map(y, map.width() - 1 - x);
  return out;
}

inline LinearImage crop(const LinearImage& img, std::size_t y0, std::size_t x0, std::size_t h,
                        std::size_t w) {
  if (y0 + h > img.height() || x0 + w > img.width())
    throw StructuralError("crop window exceeds image bounds");
  LinearImage out(h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) out.set_pixel(y, x, img.pixel(y0 + y, x0 + x));
  return out;
}

/// Bilinear resize with half-pixel centers and edge clamping. Identity when
/// the target size equals the source size.
inline LinearImage resize_bilinear(const LinearImage& img, std::size_t new_h, std::size_t new_w) {
  LinearImage out(new_h, new_w);
  const double sy = static_cast<double>(img.height()) / static_cast<double>(new_h);
  const double sx = static_cast<double>(img.width()) / static_cast<double>(new_w);
  const auto last_y = static_cast<double>(img.height() - 1);
  const auto last_x = static_cast<double>(img.width() - 1);
  for (std::size_t y = 0; y < new_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, last_y);
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, img.height() - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < new_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, last_x);
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, img.width() - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = img(y0, x0, c) * (1.0 - wx) + img(y0, x1, c) * wx;
        const double bot = img(y1, x0, c) * (1.0 - wx) + img(y1, x1, c) * wx;
        out(y, x, c) = top * (1.0 - wy) + bot * wy;
      }
    }
  }
  return out;
}

}  // namespace iidnet

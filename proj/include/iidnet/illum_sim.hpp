// Illumination-brightness and -color simulation, and the two-view /
// nine-view generators built on them.
#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "iidnet/errors.hpp"
#include "iidnet/image.hpp"
#include "iidnet/rng.hpp"

namespace iidnet {

/// Middle-gray target for the log-mean luminance after anchoring.
inline constexpr double kAnchorKey = 0.18;

inline constexpr double kTrainEvMin = -1.0;
inline constexpr double kTrainEvMax = 1.0;
inline constexpr double kTrainColorMin = 0.9;
inline constexpr double kTrainColorMax = 1.1;

struct IlluminationCondition {
  double ev = 0.0;
  ColorVec color{};

  friend bool operator==(const IlluminationCondition&, const IlluminationCondition&) = default;
};

struct WbParams {
  double alpha = 1.0;
  double beta = 1.0;
  double gamma = 1.0;
  Eigen::Matrix3d adaptation = Eigen::Matrix3d::Identity();  // M_A
};

struct View {
  LinearImage image;
  IlluminationCondition condition;
};

/// out = 2^v * img.
inline LinearImage simulate_brightness(const LinearImage& img, double ev) {
  if (!std::isfinite(ev)) throw StructuralError("exposure offset must be finite");
  return scale(img, std::exp2(ev));
}

/// Rescales img so its log-mean luminance equals 0.18.
inline LinearImage anchor_exposure(const LinearImage& img) {
  const GrayMap lum = luminance(img);
  double peak = 0.0;
  for (double l : lum.data()) peak = std::max(peak, l);
  if (peak <= 0.0) throw DegenerateInputError("cannot anchor exposure of an all-black image");
  return scale(img, kAnchorKey / geometric_mean_luminance(img));
}

namespace detail {

inline void validate(const WbParams& p) {
  if (!(p.alpha > 0.0) || !(p.beta > 0.0) || !(p.gamma > 0.0) || !std::isfinite(p.alpha) ||
      !std::isfinite(p.beta) || !std::isfinite(p.gamma))
    throw StructuralError("white-balance gains must be finite and positive");
  if (!p.adaptation.allFinite()) throw StructuralError("adaptation matrix is not finite");
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(p.adaptation);
  const auto sv = svd.singularValues();
  if (!(sv(2) > sv(0) * 1e-12))
    throw StructuralError("adaptation matrix is singular or numerically rank-deficient");
}

}  // namespace detail

/// M_WB = M_A^-1 diag(alpha, beta, gamma) M_A.
inline Eigen::Matrix3d wb_matrix(const WbParams& p) {
  detail::validate(p);
  const Eigen::Vector3d gains(p.alpha, p.beta, p.gamma);
  return p.adaptation.inverse() * gains.asDiagonal() * p.adaptation;
}

/// M_c = M_WB^-1 = M_A^-1 diag(1/alpha, 1/beta, 1/gamma) M_A.
inline Eigen::Matrix3d inverse_wb_matrix(const WbParams& p) {
  detail::validate(p);
  const Eigen::Vector3d gains(1.0 / p.alpha, 1.0 / p.beta, 1.0 / p.gamma);
  return p.adaptation.inverse() * gains.asDiagonal() * p.adaptation;
}

/// Per-pixel 3x3 color transform. A non-diagonal matrix can push components
/// below zero; those values are kept so that M and M^-1 round-trip, and the
/// caller decides whether to validate or clip.
inline LinearImage apply_color_matrix(const LinearImage& img, const Eigen::Matrix3d& m) {
  LinearImage out(img.height(), img.width());
  auto src = img.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < img.pixel_count(); ++i) {
    const double r = src[3 * i], g = src[3 * i + 1], b = src[3 * i + 2];
    for (int row = 0; row < 3; ++row)
      dst[3 * i + row] = m(row, 0) * r + m(row, 1) * g + m(row, 2) * b;
  }
  return out;
}

/// diag(c) * I(x, y).
inline LinearImage simulate_color(const LinearImage& img, const ColorVec& c) {
  if (!(c.r > 0.0 && c.g > 0.0 && c.b > 0.0) || !c.valid())
    throw StructuralError("illumination color must be componentwise positive");
  return apply_color(img, c);
}

inline LinearImage simulate(const LinearImage& anchored, const IlluminationCondition& cond) {
  return simulate_color(simulate_brightness(anchored, cond.ev), cond.color);
}

inline IlluminationCondition sample_condition(Rng& rng) {
  IlluminationCondition cond;
  cond.ev = rng.uniform(kTrainEvMin, kTrainEvMax);
  cond.color.r = rng.uniform(kTrainColorMin, kTrainColorMax);
  cond.color.g = rng.uniform(kTrainColorMin, kTrainColorMax);
  cond.color.b = rng.uniform(kTrainColorMin, kTrainColorMax);
  return cond;
}

/// n randomly lit views of one scene: anchor, then 2^v_i, then diag(c_i).
inline std::vector<View> generate_views(const LinearImage& img, Rng& rng, std::size_t n) {
  img.validate();
  const LinearImage anchored = anchor_exposure(img);
  std::vector<View> views;
  views.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const IlluminationCondition cond = sample_condition(rng);
    views.push_back({simulate(anchored, cond), cond});
  }
  return views;
}

inline constexpr std::array<double, 3> kGridEv{-1.0, 0.0, 1.0};
inline constexpr std::array<ColorVec, 3> kGridColors{
    ColorVec{0.9, 1.0, 1.1}, ColorVec{1.0, 1.0, 1.0}, ColorVec{1.1, 1.0, 0.9}};
inline constexpr std::array<const char*, 3> kGridColorNames{"Cold white", "White", "Warm white"};

/// 0-based index of the unmodified (0 EV, white) grid entry.
inline constexpr std::size_t kGridReference = 4;

/// The nine grid conditions, row-major over brightness (-1, 0, +1 EV) then
/// color (cold, white, warm).
inline std::array<IlluminationCondition, 9> evaluation_conditions() {
  std::array<IlluminationCondition, 9> out{};
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 3; ++c) out[r * 3 + c] = {kGridEv[r], kGridColors[c]};
  return out;
}

/// "-1 [EV], Cold white" style label for grid entry i (0-based).
inline std::string condition_label(std::size_t i) {
  const double ev = kGridEv[i / 3];
  std::string ev_str = ev < 0 ? "-1" : (ev > 0 ? "+1" : "0");
  return ev_str + " [EV], " + kGridColorNames[i % 3];
}

/// Nine views I_1..I_9 of the anchored image under the fixed grid.
inline std::vector<View> evaluation_grid(const LinearImage& img) {
  img.validate();
  const LinearImage anchored = anchor_exposure(img);
  std::vector<View> views;
  views.reserve(9);
  for (const auto& cond : evaluation_conditions()) views.push_back({simulate(anchored, cond), cond});
  return views;
}

}  // namespace iidnet

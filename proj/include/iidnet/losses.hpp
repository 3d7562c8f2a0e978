// Training objective: reconstruction consistency of each view plus
// reflectance consistency across the two views.
//
// Each function exists twice: a value-level version over images (double
// precision, used by reports and tests) and a differentiable version over
// batched tensors used by training.
#pragma once

#include <cmath>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "iidnet/autodiff.hpp"
#include "iidnet/errors.hpp"
#include "iidnet/image.hpp"
#include "iidnet/network.hpp"

namespace iidnet {

inline constexpr double kCosineEpsilon = 1e-8;
inline constexpr double kTargetLuminance = 0.5;

struct LossWeights {
  double reconst_l1 = 3.0;      // lambda1
  double reconst_cos = 1.0;     // lambda2
  double reflect_pair = 2.0;    // lambda3
  double luminance = 1.0;       // lambda4
  double illuminant = 1.0;      // lambda5

  std::vector<std::string> problems() const {
    std::vector<std::string> out;
    const double all[] = {reconst_l1, reconst_cos, reflect_pair, luminance, illuminant};
    const char* names[] = {"lambda1", "lambda2", "lambda3", "lambda4", "lambda5"};
    for (int i = 0; i < 5; ++i)
      if (!(all[i] >= 0.0) || !std::isfinite(all[i]))
        out.push_back(std::string("loss.") + names[i] + " must be finite and >= 0");
    return out;
  }

  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

inline void to_json(nlohmann::json& j, const LossWeights& w) {
  j = {{"lambda1", w.reconst_l1},
       {"lambda2", w.reconst_cos},
       {"lambda3", w.reflect_pair},
       {"lambda4", w.luminance},
       {"lambda5", w.illuminant}};
}

inline void from_json(const nlohmann::json& j, LossWeights& w) {
  LossWeights d;
  w.reconst_l1 = j.value("lambda1", d.reconst_l1);
  w.reconst_cos = j.value("lambda2", d.reconst_cos);
  w.reflect_pair = j.value("lambda3", d.reflect_pair);
  w.luminance = j.value("lambda4", d.luminance);
  w.illuminant = j.value("lambda5", d.illuminant);
}

/// Individual terms. reconst_l1, reconst_cos and illum_l1 are sums over both
/// views; total recombines them with the weights.
struct LossBreakdown {
  double total = 0.0;
  double reconst_l1 = 0.0;
  double reconst_cos = 0.0;
  double reflect_pair_l1 = 0.0;
  double lum_1 = 0.0;
  double lum_2 = 0.0;
  double illum_l1 = 0.0;

  double recombine(const LossWeights& w) const {
    return w.reconst_l1 * reconst_l1 - w.reconst_cos * reconst_cos + w.reflect_pair * reflect_pair_l1 +
           w.luminance * (lum_1 + lum_2) + w.illuminant * illum_l1;
  }
};

inline void to_json(nlohmann::json& j, const LossBreakdown& b) {
  j = {{"total", b.total},       {"reconst_l1", b.reconst_l1}, {"reconst_cos", b.reconst_cos},
       {"reflect_pair_l1", b.reflect_pair_l1}, {"lum_1", b.lum_1}, {"lum_2", b.lum_2},
       {"illum_l1", b.illum_l1}};
}

// ---------------------------------------------------------------------------
// Value level

inline double l1(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw StructuralError("l1: size mismatch");
  if (a.empty()) throw StructuralError("l1: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

inline double l1(const LinearImage& a, const LinearImage& b) {
  require_same_dims(a, b, "l1");
  return l1(a.data(), b.data());
}

inline double l1(const ColorVec& a, const ColorVec& b) {
  const double x[3] = {a.r, a.g, a.b}, y[3] = {b.r, b.g, b.b};
  return l1(std::span<const double>(x), std::span<const double>(y));
}

inline double cos_sim(const LinearImage& a, const LinearImage& b) {
  require_same_dims(a, b, "cos_sim");
  if (a.pixel_count() == 0) throw StructuralError("cos_sim: empty image");
  double s = 0.0;
  for (std::size_t y = 0; y < a.height(); ++y)
    for (std::size_t x = 0; x < a.width(); ++x) {
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (std::size_t k = 0; k < 3; ++k) {
        dot += a(y, x, k) * b(y, x, k);
        na += a(y, x, k) * a(y, x, k);
        nb += b(y, x, k) * b(y, x, k);
      }
      s += dot / (std::sqrt(na) * std::sqrt(nb) + kCosineEpsilon);
    }
  return s / static_cast<double>(a.pixel_count());
}

inline double lum_loss(const LinearImage& r) {
  if (r.pixel_count() == 0) throw StructuralError("lum_loss: empty image");
  double s = 0.0;
  for (std::size_t y = 0; y < r.height(); ++y)
    for (std::size_t x = 0; x < r.width(); ++x) s += std::abs(kTargetLuminance - luminance(r.pixel(y, x)));
  return s / static_cast<double>(r.pixel_count());
}

struct ReconstLoss {
  double value = 0.0;
  double l1 = 0.0;   // l1(I1, I1_hat) + l1(I2, I2_hat)
  double cos = 0.0;  // cos_sim(I1, I1_hat) + cos_sim(I2, I2_hat)
};

inline ReconstLoss reconst_loss(const LinearImage& i1, const LinearImage& i2, const LinearImage& i1_hat,
                                const LinearImage& i2_hat, const LossWeights& w = {}) {
  ReconstLoss r;
  r.l1 = l1(i1, i1_hat) + l1(i2, i2_hat);
  r.cos = cos_sim(i1, i1_hat) + cos_sim(i2, i2_hat);
  r.value = w.reconst_l1 * r.l1 - w.reconst_cos * r.cos;
  return r;
}

struct ReflectLoss {
  double value = 0.0;
  double pair_l1 = 0.0;
  double lum_1 = 0.0;
  double lum_2 = 0.0;
  double illum_l1 = 0.0;  // l1(c1, c1_hat) + l1(c2, c2_hat)
};

inline ReflectLoss reflect_loss(const LinearImage& r1, const LinearImage& r2, const ColorVec& c1,
                                const ColorVec& c2, const ColorVec& c1_hat, const ColorVec& c2_hat,
                                const LossWeights& w = {}) {
  ReflectLoss r;
  r.pair_l1 = l1(r1, r2);
  r.lum_1 = lum_loss(r1);
  r.lum_2 = lum_loss(r2);
  r.illum_l1 = l1(c1, c1_hat) + l1(c2, c2_hat);
  r.value = w.reflect_pair * r.pair_l1 + w.luminance * (r.lum_1 + r.lum_2) + w.illuminant * r.illum_l1;
  return r;
}

/// Objective for one pair of views of the same source. c1 and c2 are the
/// colors the simulator applied to produce the views.
inline LossBreakdown total_loss(const LinearImage& view1, const LinearImage& view2, const Decomposition& d1,
                                const Decomposition& d2, const ColorVec& c1, const ColorVec& c2,
                                const LossWeights& w = {}) {
  const auto rc = reconst_loss(view1, view2, reconstruct(d1), reconstruct(d2), w);
  const auto rf = reflect_loss(d1.reflectance, d2.reflectance, c1, c2, d1.illuminant, d2.illuminant, w);
  LossBreakdown b;
  b.reconst_l1 = rc.l1;
  b.reconst_cos = rc.cos;
  b.reflect_pair_l1 = rf.pair_l1;
  b.lum_1 = rf.lum_1;
  b.lum_2 = rf.lum_2;
  b.illum_l1 = rf.illum_l1;
  b.total = b.recombine(w);
  return b;
}

// ---------------------------------------------------------------------------
// Tensor level. Images are (N, 3, H, W), shading (N, 1, H, W), colors (N, 3).
// Means run over the whole batch, so a batch of pairs gives the empirical
// mean of the per-pair objective.

namespace tl {

template <class T>
ad::Tensor<T> l1(const ad::Tensor<T>& a, const ad::Tensor<T>& b) {
  return ad::mean(ad::abs(ad::sub(a, b)));
}

template <class T>
ad::Tensor<T> cos_sim(const ad::Tensor<T>& a, const ad::Tensor<T>& b) {
  auto dot = ad::channel_dot(a, b);
  auto denom = ad::add_scalar(ad::mul(ad::l2_norm_channels(a), ad::l2_norm_channels(b)),
                              static_cast<T>(kCosineEpsilon));
  return ad::mean(ad::div(dot, denom));
}

template <class T>
ad::Tensor<T> lum_loss(const ad::Tensor<T>& r) {
  std::vector<T> v{static_cast<T>(kLuminanceWeights[0]), static_cast<T>(kLuminanceWeights[1]),
                   static_cast<T>(kLuminanceWeights[2])};
  auto lum = ad::weighted_channel_sum(r, std::move(v));
  return ad::mean(ad::abs(ad::rsub_scalar(static_cast<T>(kTargetLuminance), lum)));
}

template <class T>
struct LossTerms {
  ad::Tensor<T> total;
  LossBreakdown breakdown;
};

/// Differentiable objective. view_k are the simulated inputs, d_k the
/// network outputs on them and c_k the simulator colors (no gradient).
template <class T>
LossTerms<T> total_loss(const ad::Tensor<T>& view1, const ad::Tensor<T>& view2,
                        const DecompositionTensors<T>& d1, const DecompositionTensors<T>& d2,
                        const ad::Tensor<T>& c1, const ad::Tensor<T>& c2, const LossWeights& w = {}) {
  auto rec1 = reconstruct(d1);
  auto rec2 = reconstruct(d2);
  auto l1_1 = l1(view1, rec1), l1_2 = l1(view2, rec2);
  auto cos_1 = cos_sim(view1, rec1), cos_2 = cos_sim(view2, rec2);
  auto pair = l1(d1.reflectance, d2.reflectance);
  auto lum_1 = lum_loss(d1.reflectance), lum_2 = lum_loss(d2.reflectance);
  auto il_1 = l1(c1, d1.illuminant), il_2 = l1(c2, d2.illuminant);

  auto reconst = ad::sub(ad::mul_scalar(ad::add(l1_1, l1_2), static_cast<T>(w.reconst_l1)),
                         ad::mul_scalar(ad::add(cos_1, cos_2), static_cast<T>(w.reconst_cos)));
  auto reflect = ad::add(ad::add(ad::mul_scalar(pair, static_cast<T>(w.reflect_pair)),
                                 ad::mul_scalar(ad::add(lum_1, lum_2), static_cast<T>(w.luminance))),
                         ad::mul_scalar(ad::add(il_1, il_2), static_cast<T>(w.illuminant)));

  LossTerms<T> out;
  out.total = ad::add(reconst, reflect);
  auto& b = out.breakdown;
  b.reconst_l1 = static_cast<double>(l1_1.item()) + static_cast<double>(l1_2.item());
  b.reconst_cos = static_cast<double>(cos_1.item()) + static_cast<double>(cos_2.item());
  b.reflect_pair_l1 = static_cast<double>(pair.item());
  b.lum_1 = static_cast<double>(lum_1.item());
  b.lum_2 = static_cast<double>(lum_2.item());
  b.illum_l1 = static_cast<double>(il_1.item()) + static_cast<double>(il_2.item());
  b.total = static_cast<double>(out.total.item());
  return out;
}

}  // namespace tl

}  // namespace iidnet

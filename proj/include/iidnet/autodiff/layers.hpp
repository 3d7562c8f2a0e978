// Convolution, transposed convolution and batch normalization with their
// backward passes.
//
// Convolutions are lowered to im2col + GEMM per image; the GEMM is Eigen's
// single-threaded kernel, so the reduction order is fixed and results are
// bitwise reproducible on a given build.
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <memory>
#include <utility>
#include <vector>

#include "iidnet/autodiff/ops.hpp"

namespace iidnet::ad {

struct ConvGeometry {
  std::size_t channels, height, width;  // image side
  std::size_t kernel, stride, padding;
  std::size_t out_height, out_width;  // column side

  std::size_t rows() const { return channels * kernel * kernel; }
  std::size_t cols() const { return out_height * out_width; }
};

inline std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t s, std::size_t p) {
  if (in + 2 * p < k) throw StructuralError("convolution kernel larger than padded input");
  return (in + 2 * p - k) / s + 1;
}

namespace detail {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

/// Output columns ox whose input column ox*stride + kj - padding lies in
/// [0, width): the half-open range [lo, hi).
inline std::pair<std::size_t, std::size_t> valid_columns(const ConvGeometry& g, std::size_t kj) {
  const std::size_t lo = g.padding > kj ? (g.padding - kj + g.stride - 1) / g.stride : 0;
  const std::size_t reach = g.width + g.padding;  // ix < width  <=>  ox*stride + kj < reach
  const std::size_t hi = reach > kj ? std::min(g.out_width, (reach - kj - 1) / g.stride + 1) : 0;
  return {std::min(lo, hi), hi};
}

/// cols[(c*k + ki)*k + kj][oy*Wo + ox] = img[c][oy*s - p + ki][ox*s - p + kj] (0 outside).
template <class T>
void im2col(const T* img, const ConvGeometry& g, T* cols) {
  const std::size_t hw_out = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ki = 0; ki < g.kernel; ++ki)
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        T* row = cols + ((c * g.kernel + ki) * g.kernel + kj) * hw_out;
        const auto [lo, hi] = valid_columns(g, kj);
        for (std::size_t oy = 0; oy < g.out_height; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                          static_cast<std::ptrdiff_t>(g.padding);
          T* dst = row + oy * g.out_width;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill_n(dst, g.out_width, T(0));
            continue;
          }
          // src[ox * stride] is input column ox*stride + kj - padding.
          const T* src = img + (c * g.height + static_cast<std::size_t>(iy)) * g.width + kj - g.padding;
          std::fill(dst, dst + lo, T(0));
          if (g.stride == 1)
            std::copy(src + lo, src + hi, dst + lo);
          else
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride];
          std::fill(dst + hi, dst + g.out_width, T(0));
        }
      }
}

/// Adjoint of im2col: scatters-and-adds columns back onto the image.
template <class T>
void col2im_add(const T* cols, const ConvGeometry& g, T* img) {
  const std::size_t hw_out = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ki = 0; ki < g.kernel; ++ki)
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        const T* row = cols + ((c * g.kernel + ki) * g.kernel + kj) * hw_out;
        const auto [lo, hi] = valid_columns(g, kj);
        for (std::size_t oy = 0; oy < g.out_height; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                          static_cast<std::ptrdiff_t>(g.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          const T* src = row + oy * g.out_width;
          T* dst = img + (c * g.height + static_cast<std::size_t>(iy)) * g.width + kj - g.padding;
          if (g.stride == 1)
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] += src[ox];
          else
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox * g.stride] += src[ox];
        }
      }
}

template <class T>
void add_bias(T* out, const T* bias, std::size_t channels, std::size_t hw) {
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t j = 0; j < hw; ++j) out[c * hw + j] += bias[c];
}

template <class T>
void accumulate_bias_grad(const T* grad_out, std::size_t channels, std::size_t hw, T* bias_grad) {
  for (std::size_t c = 0; c < channels; ++c) {
    double acc = 0.0;
    for (std::size_t j = 0; j < hw; ++j) acc += static_cast<double>(grad_out[c * hw + j]);
    bias_grad[c] += static_cast<T>(acc);
  }
}

}  // namespace detail

/// Cross-correlation. x: (N, C, H, W), w: (O, C, k, k), b: (O) or undefined.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t stride,
                 std::size_t padding) {
  detail::require_rank(x, 4, "conv2d");
  detail::require_rank(w, 4, "conv2d");
  if (w.dim(1) != x.dim(1) || w.dim(2) != w.dim(3))
    throw StructuralError("conv2d: weight shape " + to_string(w.shape()) +
                          " incompatible with input " + to_string(x.shape()));
  if (stride == 0) throw StructuralError("conv2d: stride must be positive");
  const bool has_bias = b.defined();
  if (has_bias && (b.rank() != 1 || b.dim(0) != w.dim(0)))
    throw StructuralError("conv2d: bias shape " + to_string(b.shape()) + " does not match weight");

  const std::size_t n = x.dim(0), out_c = w.dim(0), k = w.dim(2);
  const ConvGeometry g{x.dim(1),
                       x.dim(2),
                       x.dim(3),
                       k,
                       stride,
                       padding,
                       conv_out_size(x.dim(2), k, stride, padding),
                       conv_out_size(x.dim(3), k, stride, padding)};
  Tensor<T> out = has_bias ? detail::make_result<T>({n, out_c, g.out_height, g.out_width}, {&x, &w, &b})
                           : detail::make_result<T>({n, out_c, g.out_height, g.out_width}, {&x, &w});

  const std::size_t in_stride = g.channels * g.height * g.width;
  const std::size_t out_stride = out_c * g.cols();
  detail::RowMatrix<T> cols(g.rows(), g.cols());
  detail::ConstMatMap<T> wm(w.value().data(), out_c, g.rows());
  T* ov = out.mutable_value().data();
  for (std::size_t i = 0; i < n; ++i) {
    detail::im2col(x.value().data() + i * in_stride, g, cols.data());
    detail::MatMap<T> om(ov + i * out_stride, out_c, g.cols());
    om.noalias() = wm * cols;
    if (has_bias) detail::add_bias(ov + i * out_stride, b.value().data(), out_c, g.cols());
  }

  if (out.requires_grad()) {
    Node<T>* o = out.node();
    Node<T>* xn = x.node();
    Node<T>* wn = w.node();
    Node<T>* bn = has_bias ? b.node() : nullptr;
    o->backward_fn = [o, xn, wn, bn, g, n, out_c, in_stride, out_stride] {
      detail::RowMatrix<T> cols(g.rows(), g.cols());
      detail::ConstMatMap<T> wm(wn->value.data(), out_c, g.rows());
      if (wn->requires_grad) wn->ensure_grad();
      if (xn->requires_grad) xn->ensure_grad();
      if (bn && bn->requires_grad) bn->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        detail::ConstMatMap<T> dy(o->grad.data() + i * out_stride, out_c, g.cols());
        if (wn->requires_grad) {
          detail::im2col(xn->value.data() + i * in_stride, g, cols.data());
          detail::MatMap<T> dw(wn->grad.data(), out_c, g.rows());
          dw.noalias() += dy * cols.transpose();
        }
        if (bn && bn->requires_grad)
          detail::accumulate_bias_grad(o->grad.data() + i * out_stride, out_c, g.cols(),
                                       bn->grad.data());
        if (xn->requires_grad) {
          cols.noalias() = wm.transpose() * dy;
          detail::col2im_add(cols.data(), g, xn->grad.data() + i * in_stride);
        }
      }
    };
  }
  return out;
}

/// Transposed convolution (adjoint of conv2d in its input).
/// x: (N, Cin, H, W), w: (Cin, Cout, k, k), b: (Cout) or undefined.
/// Output size (H - 1) * stride - 2 * padding + k.
template <class T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                           std::size_t stride, std::size_t padding) {
  detail::require_rank(x, 4, "conv_transpose2d");
  detail::require_rank(w, 4, "conv_transpose2d");
  if (w.dim(0) != x.dim(1) || w.dim(2) != w.dim(3))
    throw StructuralError("conv_transpose2d: weight shape " + to_string(w.shape()) +
                          " incompatible with input " + to_string(x.shape()));
  if (x.dim(2) == 0 || x.dim(3) == 0) throw StructuralError("conv_transpose2d: empty input");
  const bool has_bias = b.defined();
  const std::size_t n = x.dim(0), in_c = x.dim(1), out_c = w.dim(1), k = w.dim(2);
  if (has_bias && (b.rank() != 1 || b.dim(0) != out_c))
    throw StructuralError("conv_transpose2d: bias shape does not match weight");
  const std::size_t full_h = (x.dim(2) - 1) * stride + k;
  const std::size_t full_w = (x.dim(3) - 1) * stride + k;
  if (full_h <= 2 * padding || full_w <= 2 * padding)
    throw StructuralError("conv_transpose2d: padding too large");
  // The output plays the role of the conv2d input; x lives on the column side.
  const ConvGeometry g{out_c, full_h - 2 * padding, full_w - 2 * padding, k, stride, padding,
                       x.dim(2), x.dim(3)};
  if (conv_out_size(g.height, k, stride, padding) != g.out_height ||
      conv_out_size(g.width, k, stride, padding) != g.out_width)
    throw StructuralError("conv_transpose2d: inconsistent geometry");

  Tensor<T> out = has_bias ? detail::make_result<T>({n, out_c, g.height, g.width}, {&x, &w, &b})
                           : detail::make_result<T>({n, out_c, g.height, g.width}, {&x, &w});
  const std::size_t in_stride = in_c * g.cols();
  const std::size_t out_stride = out_c * g.height * g.width;
  detail::RowMatrix<T> cols(g.rows(), g.cols());
  detail::ConstMatMap<T> wm(w.value().data(), in_c, g.rows());
  T* ov = out.mutable_value().data();
  for (std::size_t i = 0; i < n; ++i) {
    detail::ConstMatMap<T> xm(x.value().data() + i * in_stride, in_c, g.cols());
    cols.noalias() = wm.transpose() * xm;
    detail::col2im_add(cols.data(), g, ov + i * out_stride);
    if (has_bias) detail::add_bias(ov + i * out_stride, b.value().data(), out_c, g.height * g.width);
  }

  if (out.requires_grad()) {
    Node<T>* o = out.node();
    Node<T>* xn = x.node();
    Node<T>* wn = w.node();
    Node<T>* bn = has_bias ? b.node() : nullptr;
    o->backward_fn = [o, xn, wn, bn, g, n, in_c, out_c, in_stride, out_stride] {
      detail::RowMatrix<T> cols(g.rows(), g.cols());
      detail::ConstMatMap<T> wm(wn->value.data(), in_c, g.rows());
      if (wn->requires_grad) wn->ensure_grad();
      if (xn->requires_grad) xn->ensure_grad();
      if (bn && bn->requires_grad) bn->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        detail::im2col(o->grad.data() + i * out_stride, g, cols.data());
        if (xn->requires_grad) {
          detail::MatMap<T> dx(xn->grad.data() + i * in_stride, in_c, g.cols());
          dx.noalias() += wm * cols;
        }
        if (wn->requires_grad) {
          detail::ConstMatMap<T> xm(xn->value.data() + i * in_stride, in_c, g.cols());
          detail::MatMap<T> dw(wn->grad.data(), in_c, g.rows());
          dw.noalias() += xm * cols.transpose();
        }
        if (bn && bn->requires_grad)
          detail::accumulate_bias_grad(o->grad.data() + i * out_stride, out_c,
                                       g.height * g.width, bn->grad.data());
      }
    };
  }
  return out;
}

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

enum class Mode { Train, Eval };

/// Running statistics of one batch-norm layer.
template <class T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;

  explicit BatchNormState(std::size_t channels = 0)
      : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

/// Per-channel batch normalization over (N, H, W). Train mode normalizes with
/// batch statistics and updates the running averages (unbiased variance);
/// eval mode uses the running averages.
template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormState<T>& state, Mode mode, double eps = kBatchNormEpsilon,
                     double momentum = kBatchNormMomentum) {
  detail::require_rank(x, 4, "batch_norm");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gamma.numel() != c || beta.numel() != c || state.running_mean.size() != c ||
      state.running_var.size() != c)
    throw StructuralError("batch_norm: parameter shapes do not match channel count " +
                          std::to_string(c));
  const std::size_t m = n * hw;
  if (mode == Mode::Train && m <= 1)
    throw DegenerateInputError("batch_norm: train mode needs more than one value per channel");

  Tensor<T> out = detail::make_result<T>(x.shape(), {&x, &gamma, &beta});
  auto xv = x.value();
  auto ov = out.mutable_value();
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(c);

  for (std::size_t ch = 0; ch < c; ++ch) {
    double mu, var;
    if (mode == Mode::Train) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < hw; ++j) acc += static_cast<double>(xv[(i * c + ch) * hw + j]);
      mu = acc / static_cast<double>(m);
      double sq = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < hw; ++j) {
          const double d = static_cast<double>(xv[(i * c + ch) * hw + j]) - mu;
          sq += d * d;
        }
      var = sq / static_cast<double>(m);
      const double unbiased = sq / static_cast<double>(m - 1);
      state.running_mean[ch] =
          static_cast<T>((1.0 - momentum) * static_cast<double>(state.running_mean[ch]) + momentum * mu);
      state.running_var[ch] = static_cast<T>((1.0 - momentum) * static_cast<double>(state.running_var[ch]) +
                                             momentum * unbiased);
    } else {
      mu = static_cast<double>(state.running_mean[ch]);
      var = static_cast<double>(state.running_var[ch]);
    }
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[ch] = is;
    const T gm = gamma.value()[ch], bt = beta.value()[ch];
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < hw; ++j) {
        const std::size_t idx = (i * c + ch) * hw + j;
        const T xh = static_cast<T>((static_cast<double>(xv[idx]) - mu) * is);
        (*xhat)[idx] = xh;
        ov[idx] = gm * xh + bt;
      }
  }

  if (out.requires_grad()) {
    Node<T>* o = out.node();
    Node<T>* xn = x.node();
    Node<T>* gn = gamma.node();
    Node<T>* bn = beta.node();
    const bool train = mode == Mode::Train;
    o->backward_fn = [o, xn, gn, bn, xhat, inv_std, n, c, hw, m, train] {
      if (xn->requires_grad) xn->ensure_grad();
      if (gn->requires_grad) gn->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      for (std::size_t ch = 0; ch < c; ++ch) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < hw; ++j) {
            const std::size_t idx = (i * c + ch) * hw + j;
            sum_dy += static_cast<double>(o->grad[idx]);
            sum_dy_xhat += static_cast<double>(o->grad[idx]) * static_cast<double>((*xhat)[idx]);
          }
        if (gn->requires_grad) gn->grad[ch] += static_cast<T>(sum_dy_xhat);
        if (bn->requires_grad) bn->grad[ch] += static_cast<T>(sum_dy);
        if (!xn->requires_grad) continue;
        const double scale = static_cast<double>(gn->value[ch]) * (*inv_std)[ch];
        const double md = static_cast<double>(m);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < hw; ++j) {
            const std::size_t idx = (i * c + ch) * hw + j;
            const double dy = static_cast<double>(o->grad[idx]);
            const double g = train ? scale * (dy - sum_dy / md -
                                              static_cast<double>((*xhat)[idx]) * sum_dy_xhat / md)
                                   : scale * dy;
            xn->grad[idx] += static_cast<T>(g);
          }
      }
    };
  }
  return out;
}

}  // namespace iidnet::ad

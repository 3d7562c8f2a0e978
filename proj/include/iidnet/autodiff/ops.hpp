// Differentiable elementwise, reduction and channel-structured operations.
// Convolution and batch normalization live in layers.hpp.
//
// Image tensors use NCHW layout. Reductions accumulate in double.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "iidnet/autodiff/tensor.hpp"

namespace iidnet::ad {

/// While alive, logs the branch (sign of the input) taken by every relu and
/// abs element evaluated on this thread. Two evaluations with equal logs lie
/// on the same linear piece of every kink.
class BranchRecorder {
 public:
  BranchRecorder() : previous_(active_) { active_ = this; }
  ~BranchRecorder() { active_ = previous_; }
  BranchRecorder(const BranchRecorder&) = delete;
  BranchRecorder& operator=(const BranchRecorder&) = delete;

  const std::vector<std::int8_t>& branches() const noexcept { return branches_; }

  template <class T>
  static void record(std::span<const T> xs) {
    if (active_ == nullptr) return;
    for (T x : xs) active_->branches_.push_back(x > T(0) ? 1 : (x < T(0) ? -1 : 0));
  }

 private:
  inline static thread_local BranchRecorder* active_ = nullptr;
  BranchRecorder* previous_;
  std::vector<std::int8_t> branches_;
};

namespace detail {

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw StructuralError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                          to_string(b.shape()));
}

template <class T>
void require_rank(const Tensor<T>& a, std::size_t rank, const char* op) {
  if (a.rank() != rank)
    throw StructuralError(std::string(op) + ": expected rank " + std::to_string(rank) +
                          ", got shape " + to_string(a.shape()));
}

/// Applies out = f(a, b) elementwise, with df/da, df/db evaluated in backward.
template <class T, class F, class Da, class Db>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, const char* name, F f, Da da, Db db) {
  require_same_shape(a, b, name);
  Tensor<T> out = make_result<T>(a.shape(), {&a, &b});
  auto av = a.value();
  auto bv = b.value();
  auto ov = out.mutable_value();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = f(av[i], bv[i]);
  if (out.requires_grad()) {
    Node<T>* o = out.node();
    Node<T>* an = a.node();
    Node<T>* bn = b.node();
    o->backward_fn = [o, an, bn, da, db] {
      const std::size_t n = o->value.size();
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          an->grad[i] += o->grad[i] * da(an->value[i], bn->value[i], o->value[i]);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          bn->grad[i] += o->grad[i] * db(an->value[i], bn->value[i], o->value[i]);
      }
    };
  }
  return out;
}

template <class T, class F, class D>
Tensor<T> unary(const Tensor<T>& a, F f, D d) {
  Tensor<T> out = make_result<T>(a.shape(), {&a});
  auto av = a.value();
  auto ov = out.mutable_value();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = f(av[i]);
  if (out.requires_grad()) {
    Node<T>* o = out.node();
    Node<T>* an = a.node();
    o->backward_fn = [o, an, d] {
      an->ensure_grad();
      for (std::size_t i = 0; i < o->value.size(); ++i)
        an->grad[i] += o->grad[i] * d(an->value[i], o->value[i]);
    };
  }
  return out;
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
      [](T x, T, T) { return x; });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "div", [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
      [](T x, T y, T) { return -x / (y * y); });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return detail::unary(a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  return detail::unary(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

/// s - a.
template <class T>
Tensor<T> rsub_scalar(T s, const Tensor<T>& a) {
  return detail::unary(a, [s](T x) { return s - x; }, [](T, T) { return T(-1); });
}

/// max(x, 0); derivative at exactly 0 is 0.
template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  BranchRecorder::record(a.value());
  return detail::unary(
      a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

/// |x|; derivative at exactly 0 is 0.
template <class T>
Tensor<T> abs(const Tensor<T>& a) {
  BranchRecorder::record(a.value());
  return detail::unary(
      a, [](T x) { return std::abs(x); },
      [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  Tensor<T> out = detail::make_result<T>({}, {&a});
  double acc = 0.0;
  for (T v : a.value()) acc += static_cast<double>(v);
  out.mutable_value()[0] = static_cast<T>(acc);
  if (out.requires_grad()) {
    Node<T>* o = out.node();
    Node<T>* an = a.node();
    o->backward_fn = [o, an] {
      an->ensure_grad();
      for (T& g : an->grad) g += o->grad[0];
    };
  }
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  Tensor<T> out = detail::make_result<T>({}, {&a});
  double acc = 0.0;
  for (T v : a.value()) acc += static_cast<double>(v);
  const double n = static_cast<double>(a.numel());
  out.mutable_value()[0] = static_cast<T>(acc / n);
  if (out.requires_grad()) {
    Node<T>* o = out.node();
    Node<T>* an = a.node();
    o->backward_fn = [o, an, n] {
      an->ensure_grad();
      const T g = static_cast<T>(static_cast<double>(o->grad[0]) / n);
      for (T& v : an->grad) v += g;
    };
  }
  return out;
}

/// Same values under a new shape with equal element count.
template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.numel())
    throw StructuralError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  Tensor<T> out = detail::make_result<T>(std::move(shape), {&a});
  std::copy(a.value().begin(), a.value().end(), out.mutable_value().begin());
  if (out.requires_grad()) {
    Node<T>* o = out.node();
    Node<T>* an = a.node();
    o->backward_fn = [o, an] {
      an->ensure_grad();
      for (std::size_t i = 0; i < o->grad.size(); ++i) an->grad[i] += o->grad[i];
    };
  }
  return out;
}

/// (N, Ca, H, W) ++ (N, Cb, H, W) -> (N, Ca + Cb, H, W).
template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a, 4, "concat_channels");
  detail::require_rank(b, 4, "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    throw StructuralError("concat_channels: incompatible shapes " + to_string(a.shape()) + " and " +
                          to_string(b.shape()));
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  Tensor<T> out = detail::make_result<T>({n, ca + cb, a.dim(2), a.dim(3)}, {&a, &b});
  auto ov = out.mutable_value();
  auto av = a.value();
  auto bv = b.value();
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(av.begin() + i * ca * hw, ca * hw, ov.begin() + i * (ca + cb) * hw);
    std::copy_n(bv.begin() + i * cb * hw, cb * hw, ov.begin() + (i * (ca + cb) + ca) * hw);
  }
  if (out.requires_grad()) {
    Node<T>* o = out.node();
    Node<T>* an = a.node();
    Node<T>* bn = b.node();
    o->backward_fn = [o, an, bn, n, ca, cb, hw] {
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < ca * hw; ++j)
            an->grad[i * ca * hw + j] += o->grad[i * (ca + cb) * hw + j];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < cb * hw; ++j)
            bn->grad[i * cb * hw + j] += o->grad[(i * (ca + cb) + ca) * hw + j];
      }
    };
  }
  return out;
}

/// Rows [begin, end) along the leading (batch) dimension.
template <class T>
Tensor<T> slice_batch(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  if (x.rank() == 0 || begin >= end || end > x.dim(0))
    throw StructuralError("slice_batch: bad range [" + std::to_string(begin) + ", " + std::to_string(end) +
                          ") for shape " + to_string(x.shape()));
  Shape shape = x.shape();
  const std::size_t row = x.numel() / shape[0];
  shape[0] = end - begin;
  Tensor<T> out = detail::make_result<T>(std::move(shape), {&x});
  auto xv = x.value();
  std::copy(xv.begin() + begin * row, xv.begin() + end * row, out.mutable_value().begin());
  if (out.requires_grad()) {
    Node<T>* o = out.node();
    Node<T>* xn = x.node();
    o->backward_fn = [o, xn, offset = begin * row] {
      xn->ensure_grad();
      for (std::size_t i = 0; i < o->grad.size(); ++i) xn->grad[offset + i] += o->grad[i];
    };
  }
  return out;
}

/// Spatial mean per channel: (N, C, H, W) -> (N, C).
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require_rank(x, 4, "global_avg_pool");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out = detail::make_result<T>({n, c}, {&x});
  auto xv = x.value();
  auto ov = out.mutable_value();
  for (std::size_t i = 0; i < n * c; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < hw; ++j) acc += static_cast<double>(xv[i * hw + j]);
    ov[i] = static_cast<T>(acc / static_cast<double>(hw));
  }
  if (out.requires_grad()) {
    Node<T>* o = out.node();
    Node<T>* xn = x.node();
    o->backward_fn = [o, xn, n, c, hw] {
      xn->ensure_grad();
      for (std::size_t i = 0; i < n * c; ++i) {
        const T g = static_cast<T>(static_cast<double>(o->grad[i]) / static_cast<double>(hw));
        for (std::size_t j = 0; j < hw; ++j) xn->grad[i * hw + j] += g;
      }
    };
  }
  return out;
}

/// x(n, c, :, :) * v(n, c): per-image, per-channel scale.
template <class T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& v) {
  detail::require_rank(x, 4, "scale_channels");
  detail::require_rank(v, 2, "scale_channels");
  if (v.dim(0) != x.dim(0) || v.dim(1) != x.dim(1))
    throw StructuralError("scale_channels: vector shape " + to_string(v.shape()) +
                          " does not match " + to_string(x.shape()));
  const std::size_t nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out = detail::make_result<T>(x.shape(), {&x, &v});
  auto xv = x.value();
  auto vv = v.value();
  auto ov = out.mutable_value();
  for (std::size_t i = 0; i < nc; ++i)
    for (std::size_t j = 0; j < hw; ++j) ov[i * hw + j] = xv[i * hw + j] * vv[i];
  if (out.requires_grad()) {
    Node<T>* o = out.node();
    Node<T>* xn = x.node();
    Node<T>* vn = v.node();
    o->backward_fn = [o, xn, vn, nc, hw] {
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < nc; ++i)
          for (std::size_t j = 0; j < hw; ++j) xn->grad[i * hw + j] += o->grad[i * hw + j] * vn->value[i];
      }
      if (vn->requires_grad) {
        vn->ensure_grad();
        for (std::size_t i = 0; i < nc; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < hw; ++j)
            acc += static_cast<double>(o->grad[i * hw + j]) * static_cast<double>(xn->value[i * hw + j]);
          vn->grad[i] += static_cast<T>(acc);
        }
      }
    };
  }
  return out;
}

/// x(n, c, y, x) * s(n, 0, y, x): per-pixel scale broadcast over channels.
template <class T>
Tensor<T> scale_pixels(const Tensor<T>& x, const Tensor<T>& s) {
  detail::require_rank(x, 4, "scale_pixels");
  detail::require_rank(s, 4, "scale_pixels");
  if (s.dim(0) != x.dim(0) || s.dim(1) != 1 || s.dim(2) != x.dim(2) || s.dim(3) != x.dim(3))
    throw StructuralError("scale_pixels: map shape " + to_string(s.shape()) + " does not match " +
                          to_string(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out = detail::make_result<T>(x.shape(), {&x, &s});
  auto xv = x.value();
  auto sv = s.value();
  auto ov = out.mutable_value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t j = 0; j < hw; ++j)
        ov[(i * c + k) * hw + j] = xv[(i * c + k) * hw + j] * sv[i * hw + j];
  if (out.requires_grad()) {
    Node<T>* o = out.node();
    Node<T>* xn = x.node();
    Node<T>* sn = s.node();
    o->backward_fn = [o, xn, sn, n, c, hw] {
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t k = 0; k < c; ++k)
            for (std::size_t j = 0; j < hw; ++j)
              xn->grad[(i * c + k) * hw + j] += o->grad[(i * c + k) * hw + j] * sn->value[i * hw + j];
      }
      if (sn->requires_grad) {
        sn->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t k = 0; k < c; ++k)
            for (std::size_t j = 0; j < hw; ++j)
              sn->grad[i * hw + j] += o->grad[(i * c + k) * hw + j] * xn->value[(i * c + k) * hw + j];
      }
    };
  }
  return out;
}

/// sum_c w[c] * x(n, c, y, x) -> (N, 1, H, W).
template <class T>
Tensor<T> weighted_channel_sum(const Tensor<T>& x, std::vector<T> weights) {
  detail::require_rank(x, 4, "weighted_channel_sum");
  if (weights.size() != x.dim(1))
    throw StructuralError("weighted_channel_sum: weight count does not match channels");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out = detail::make_result<T>({n, 1, x.dim(2), x.dim(3)}, {&x});
  auto xv = x.value();
  auto ov = out.mutable_value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < hw; ++j) {
      T acc = T(0);
      for (std::size_t k = 0; k < c; ++k) acc += weights[k] * xv[(i * c + k) * hw + j];
      ov[i * hw + j] = acc;
    }
  if (out.requires_grad()) {
    Node<T>* o = out.node();
    Node<T>* xn = x.node();
    o->backward_fn = [o, xn, n, c, hw, weights = std::move(weights)] {
      xn->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < c; ++k)
          for (std::size_t j = 0; j < hw; ++j)
            xn->grad[(i * c + k) * hw + j] += o->grad[i * hw + j] * weights[k];
    };
  }
  return out;
}

/// Per-pixel Euclidean norm over channels -> (N, 1, H, W). The gradient at a
/// zero vector is taken as zero.
template <class T>
Tensor<T> l2_norm_channels(const Tensor<T>& x) {
  detail::require_rank(x, 4, "l2_norm_channels");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out = detail::make_result<T>({n, 1, x.dim(2), x.dim(3)}, {&x});
  auto xv = x.value();
  auto ov = out.mutable_value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < hw; ++j) {
      T acc = T(0);
      for (std::size_t k = 0; k < c; ++k) {
        const T v = xv[(i * c + k) * hw + j];
        acc += v * v;
      }
      ov[i * hw + j] = std::sqrt(acc);
    }
  if (out.requires_grad()) {
    Node<T>* o = out.node();
    Node<T>* xn = x.node();
    o->backward_fn = [o, xn, n, c, hw] {
      xn->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < hw; ++j) {
          const T norm = o->value[i * hw + j];
          if (norm == T(0)) continue;
          const T g = o->grad[i * hw + j] / norm;
          for (std::size_t k = 0; k < c; ++k)
            xn->grad[(i * c + k) * hw + j] += g * xn->value[(i * c + k) * hw + j];
        }
    };
  }
  return out;
}

/// Per-pixel inner product over channels -> (N, 1, H, W).
template <class T>
Tensor<T> channel_dot(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "channel_dot");
  return weighted_channel_sum(mul(a, b), std::vector<T>(a.dim(1), T(1)));
}

}  // namespace iidnet::ad

#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "dar/error.hpp"

namespace dar {

/// C x H x W activation of one backbone block (channel-major).
template <typename T>
struct BasicFeatureMap {
  int channels = 0;
  int height = 0;
  int width = 0;
  int block = 0;  // 1-based block index, 0 when unknown
  std::vector<T> values;

  BasicFeatureMap() = default;
  BasicFeatureMap(int c, int h, int w, T fill = T(0), int blk = 0)
      : channels(c), height(h), width(w), block(blk),
        values(static_cast<std::size_t>(c) * static_cast<std::size_t>(h) * static_cast<std::size_t>(w), fill) {}

  std::size_t size() const noexcept { return values.size(); }
  bool same_shape(const BasicFeatureMap& o) const noexcept {
    return channels == o.channels && height == o.height && width == o.width;
  }
  T& operator()(int c, int y, int x) { return values[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  T operator()(int c, int y, int x) const { return values[(static_cast<std::size_t>(c) * height + y) * width + x]; }
};

using FeatureMap = BasicFeatureMap<float>;

template <typename T>
inline T sigmoid(T x) {
  // Branch keeps exp() from overflowing for large |x|.
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
inline T sigmoid_grad(T x) {
  const T s = sigmoid(x);
  return s * (T(1) - s);
}

namespace detail {
template <typename T>
void require_same_shape(const BasicFeatureMap<T>& a, const BasicFeatureMap<T>& b, const char* op) {
  if (!a.same_shape(b)) {
    throw DataError(std::string(op) + ": shape mismatch (" + std::to_string(a.channels) + "x" +
                    std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " + std::to_string(b.channels) +
                    "x" + std::to_string(b.height) + "x" + std::to_string(b.width) + ")");
  }
}
}  // namespace detail

/// Negative attention: (1 - sigmoid(f_cf)) * f_prd, elementwise.
template <typename T>
BasicFeatureMap<T> na_module(const BasicFeatureMap<T>& f_cf, const BasicFeatureMap<T>& f_prd) {
  detail::require_same_shape(f_cf, f_prd, "na_module");
  BasicFeatureMap<T> out = f_prd;
  for (std::size_t i = 0; i < out.size(); ++i) out.values[i] = (T(1) - sigmoid(f_cf.values[i])) * f_prd.values[i];
  return out;
}

/// Consistency metric 1 - |sigmoid(f_lr) - sigmoid(f_prd)|, in (0, 1].
template <typename T>
BasicFeatureMap<T> consistent_metric(const BasicFeatureMap<T>& f_lr, const BasicFeatureMap<T>& f_prd) {
  detail::require_same_shape(f_lr, f_prd, "consistent_metric");
  BasicFeatureMap<T> cm = f_prd;
  for (std::size_t i = 0; i < cm.size(); ++i) {
    cm.values[i] = T(1) - std::abs(sigmoid(f_lr.values[i]) - sigmoid(f_prd.values[i]));
  }
  return cm;
}

/// Consistent attention: CM * f_prd, elementwise.
template <typename T>
BasicFeatureMap<T> ca_module(const BasicFeatureMap<T>& f_lr, const BasicFeatureMap<T>& f_prd) {
  BasicFeatureMap<T> out = consistent_metric(f_lr, f_prd);
  for (std::size_t i = 0; i < out.size(); ++i) out.values[i] *= f_prd.values[i];
  return out;
}

/// Augmented features f + O_na + O_ca.
template <typename T>
BasicFeatureMap<T> fuse_features(const BasicFeatureMap<T>& f_prd, const BasicFeatureMap<T>& o_na,
                                 const BasicFeatureMap<T>& o_ca) {
  detail::require_same_shape(f_prd, o_na, "fuse_features");
  detail::require_same_shape(f_prd, o_ca, "fuse_features");
  BasicFeatureMap<T> out = f_prd;
  for (std::size_t i = 0; i < out.size(); ++i) out.values[i] += o_na.values[i] + o_ca.values[i];
  return out;
}

template <typename T>
BasicFeatureMap<T> augment_features(const BasicFeatureMap<T>& f_prd, const BasicFeatureMap<T>& f_cf,
                                    const BasicFeatureMap<T>& f_lr) {
  return fuse_features(f_prd, na_module(f_cf, f_prd), ca_module(f_lr, f_prd));
}

// Vector-Jacobian products. `grad_out` is dL/d(output); the results are the
// contributions to dL/d(input) through this module alone.

template <typename T>
struct PairGrad {
  BasicFeatureMap<T> other;  // d/d f_cf or d/d f_lr
  BasicFeatureMap<T> prd;    // d/d f_prd
};

template <typename T>
PairGrad<T> na_backward(const BasicFeatureMap<T>& f_cf, const BasicFeatureMap<T>& f_prd,
                        const BasicFeatureMap<T>& grad_out) {
  detail::require_same_shape(f_cf, f_prd, "na_backward");
  detail::require_same_shape(f_prd, grad_out, "na_backward");
  PairGrad<T> g{f_cf, f_prd};
  for (std::size_t i = 0; i < f_prd.size(); ++i) {
    const T s = sigmoid(f_cf.values[i]);
    g.other.values[i] = -s * (T(1) - s) * f_prd.values[i] * grad_out.values[i];
    g.prd.values[i] = (T(1) - s) * grad_out.values[i];
  }
  return g;
}

/// |.| is taken with derivative 0 at exactly zero difference.
template <typename T>
PairGrad<T> ca_backward(const BasicFeatureMap<T>& f_lr, const BasicFeatureMap<T>& f_prd,
                        const BasicFeatureMap<T>& grad_out) {
  detail::require_same_shape(f_lr, f_prd, "ca_backward");
  detail::require_same_shape(f_prd, grad_out, "ca_backward");
  PairGrad<T> g{f_lr, f_prd};
  for (std::size_t i = 0; i < f_prd.size(); ++i) {
    const T sl = sigmoid(f_lr.values[i]);
    const T sp = sigmoid(f_prd.values[i]);
    const T d = sl - sp;
    const T sign = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
    const T f = f_prd.values[i];
    const T go = grad_out.values[i];
    g.other.values[i] = -sign * sl * (T(1) - sl) * f * go;
    g.prd.values[i] = ((T(1) - std::abs(d)) + sign * sp * (T(1) - sp) * f) * go;
  }
  return g;
}

template <typename T>
struct AugmentGrad {
  BasicFeatureMap<T> prd;
  BasicFeatureMap<T> cf;
  BasicFeatureMap<T> lr;
};

/// Backward through augment_features; the fuse step passes grad_out
/// unchanged to each of its three summands.
template <typename T>
AugmentGrad<T> augment_backward(const BasicFeatureMap<T>& f_prd, const BasicFeatureMap<T>& f_cf,
                                const BasicFeatureMap<T>& f_lr, const BasicFeatureMap<T>& grad_out) {
  auto na = na_backward(f_cf, f_prd, grad_out);
  auto ca = ca_backward(f_lr, f_prd, grad_out);
  AugmentGrad<T> g{grad_out, std::move(na.other), std::move(ca.other)};
  for (std::size_t i = 0; i < g.prd.size(); ++i) g.prd.values[i] += na.prd.values[i] + ca.prd.values[i];
  return g;
}

}  // namespace dar

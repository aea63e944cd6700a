#pragma once

// Continuous-sigma Gaussian kernels and per-pixel adaptive smoothing with
// analytic gradients for both the smoothed field and the sigma map.
//
// Kernels are truncated at radius min(ceil(3*sigma), radius_cap) and
// renormalized after truncation, so smoothing preserves constants exactly.
// Borders use symmetric reflection.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "scaleadapt/tensor.hpp"

namespace scaleadapt {

inline constexpr double kSigmaMin = 0.3;
inline constexpr int kDefaultRadiusCap = 12;

template <class T>
struct GaussianKernel {
  T sigma = T(0);
  int radius = 0;
  std::vector<T> taps;  // (2*radius+1)^2, row-major, sum 1

  T tap(int u, int v) const {
    const int d = 2 * radius + 1;
    return taps[(u + radius) * d + (v + radius)];
  }
};

template <class T>
GaussianKernel<T> gaussian_kernel(T sigma, int radius) {
  if (!(sigma > T(0)))
    throw std::invalid_argument("gaussian_kernel: sigma must be positive, got " +
                                std::to_string(static_cast<double>(sigma)));
  if (radius < 0) throw std::invalid_argument("gaussian_kernel: negative radius");
  const int d = 2 * radius + 1;
  GaussianKernel<T> k{sigma, radius, std::vector<T>(d * d)};
  const T inv2s2 = T(1) / (T(2) * sigma * sigma);
  T sum = T(0);
  for (int u = -radius; u <= radius; ++u)
    for (int v = -radius; v <= radius; ++v) {
      const T g = std::exp(-(T(u * u + v * v)) * inv2s2);
      k.taps[(u + radius) * d + (v + radius)] = g;
      sum += g;
    }
  for (T& t : k.taps) t /= sum;
  return k;
}

// Derivative of each normalized tap with respect to sigma (quotient rule over
// the truncated-then-normalized kernel). Derivative taps sum to zero.
template <class T>
std::vector<T> kernel_dsigma(T sigma, int radius) {
  if (!(sigma > T(0)))
    throw std::invalid_argument("kernel_dsigma: sigma must be positive");
  const int d = 2 * radius + 1;
  std::vector<T> g(d * d), dg(d * d);
  const T inv2s2 = T(1) / (T(2) * sigma * sigma);
  const T inv_s3 = T(1) / (sigma * sigma * sigma);
  T sum = T(0), dsum = T(0);
  for (int u = -radius; u <= radius; ++u)
    for (int v = -radius; v <= radius; ++v) {
      const int i = (u + radius) * d + (v + radius);
      const T r2 = T(u * u + v * v);
      g[i] = std::exp(-r2 * inv2s2);
      dg[i] = g[i] * r2 * inv_s3;
      sum += g[i];
      dsum += dg[i];
    }
  std::vector<T> out(d * d);
  for (int i = 0; i < d * d; ++i)
    out[i] = (dg[i] * sum - g[i] * dsum) / (sum * sum);
  return out;
}

namespace detail {

// Symmetric reflection (edge repeated): -1 -> 0, n -> n-1. Iterated so it is
// valid even when the radius exceeds the image size.
inline int reflect(int i, int n) {
  while (i < 0 || i >= n) {
    if (i < 0) i = -i - 1;
    if (i >= n) i = 2 * n - 1 - i;
  }
  return i;
}

inline int sigma_radius(double sigma, int radius_cap) {
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  return r < radius_cap ? r : radius_cap;
}

}  // namespace detail

template <class T>
void check_sigma_map(const Tensor<T>& field, const Tensor<T>& sigmas) {
  if (sigmas.c != 1 || sigmas.n != field.n || sigmas.h != field.h ||
      sigmas.w != field.w)
    throw shape_error("sigma map " + sigmas.dims_str() +
                      " does not match field " + field.dims_str());
  for (T s : sigmas.data)
    if (!(s >= T(kSigmaMin)))
      throw std::invalid_argument("sigma below minimum: " +
                                  std::to_string(static_cast<double>(s)));
}

// output[c,i,j] = sum_{u,v} K(sigma_ij)[u,v] * field[c, i+u, j+v]
template <class T>
Tensor<T> adaptive_smooth(const Tensor<T>& field, const Tensor<T>& sigmas,
                          int radius_cap = kDefaultRadiusCap) {
  check_sigma_map(field, sigmas);
  if (radius_cap < 1)
    throw std::invalid_argument("adaptive_smooth: radius_cap must be >= 1");

  Tensor<T> out(field.n, field.c, field.h, field.w);
  std::vector<T> taps;
  std::vector<int> yidx, xidx;
  for (int in = 0; in < field.n; ++in)
    for (int y = 0; y < field.h; ++y)
      for (int x = 0; x < field.w; ++x) {
        const T sigma = sigmas.at(in, 0, y, x);
        const int r = detail::sigma_radius(static_cast<double>(sigma),
                                           radius_cap);
        const int d = 2 * r + 1;
        taps.resize(d * d);
        const T inv2s2 = T(1) / (T(2) * sigma * sigma);
        T sum = T(0);
        for (int u = -r; u <= r; ++u)
          for (int v = -r; v <= r; ++v) {
            const T g = std::exp(-(T(u * u + v * v)) * inv2s2);
            taps[(u + r) * d + (v + r)] = g;
            sum += g;
          }
        const T inv_sum = T(1) / sum;
        yidx.resize(d);
        xidx.resize(d);
        for (int u = -r; u <= r; ++u)
          yidx[u + r] = detail::reflect(y + u, field.h);
        for (int v = -r; v <= r; ++v)
          xidx[v + r] = detail::reflect(x + v, field.w);
        for (int ic = 0; ic < field.c; ++ic) {
          T acc = T(0);
          for (int u = 0; u < d; ++u) {
            const T* frow = field.row(in, ic, yidx[u]);
            const T* trow = taps.data() + u * d;
            for (int v = 0; v < d; ++v) acc += trow[v] * frow[xidx[v]];
          }
          out.at(in, ic, y, x) = acc * inv_sum;
        }
      }
  return out;
}

template <class T>
struct SmoothGrads {
  Tensor<T> grad_field;
  Tensor<T> grad_sigmas;  // (n, 1, h, w)
};

template <class T>
SmoothGrads<T> adaptive_smooth_backward(const Tensor<T>& grad_out,
                                        const Tensor<T>& field,
                                        const Tensor<T>& sigmas,
                                        int radius_cap = kDefaultRadiusCap) {
  check_sigma_map(field, sigmas);
  require_same_dims(grad_out, field, "adaptive_smooth_backward");

  SmoothGrads<T> g{Tensor<T>(field.n, field.c, field.h, field.w),
                   Tensor<T>(field.n, 1, field.h, field.w)};
  std::vector<T> taps, dtaps;
  std::vector<int> yidx, xidx;
  for (int in = 0; in < field.n; ++in)
    for (int y = 0; y < field.h; ++y)
      for (int x = 0; x < field.w; ++x) {
        const T sigma = sigmas.at(in, 0, y, x);
        const int r = detail::sigma_radius(static_cast<double>(sigma),
                                           radius_cap);
        const int d = 2 * r + 1;
        const GaussianKernel<T> k = gaussian_kernel(sigma, r);
        dtaps = kernel_dsigma(sigma, r);
        yidx.resize(d);
        xidx.resize(d);
        for (int u = -r; u <= r; ++u)
          yidx[u + r] = detail::reflect(y + u, field.h);
        for (int v = -r; v <= r; ++v)
          xidx[v + r] = detail::reflect(x + v, field.w);
        T gsig = T(0);
        for (int ic = 0; ic < field.c; ++ic) {
          const T go = grad_out.at(in, ic, y, x);
          if (go == T(0)) continue;
          for (int u = 0; u < d; ++u) {
            const T* frow = field.row(in, ic, yidx[u]);
            T* grow = g.grad_field.row(in, ic, yidx[u]);
            const T* trow = k.taps.data() + u * d;
            const T* dtrow = dtaps.data() + u * d;
            for (int v = 0; v < d; ++v) {
              grow[xidx[v]] += go * trow[v];
              gsig += go * dtrow[v] * frow[xidx[v]];
            }
          }
        }
        g.grad_sigmas.at(in, 0, y, x) = gsig;
      }
  return g;
}

// sigma = sigma_min + softplus(raw), overflow-safe
template <class T>
Tensor<T> sigma_link(const Tensor<T>& raw) {
  Tensor<T> out = raw;
  for (T& v : out.data) {
    const T sp = v > T(0) ? v + std::log1p(std::exp(-v))
                          : std::log1p(std::exp(v));
    v = T(kSigmaMin) + sp;
  }
  return out;
}

template <class T>
Tensor<T> sigma_link_backward(const Tensor<T>& grad_sigma,
                              const Tensor<T>& raw) {
  require_same_dims(grad_sigma, raw, "sigma_link_backward");
  Tensor<T> g = grad_sigma;
  for (std::size_t i = 0; i < g.data.size(); ++i) {
    const T r = raw.data[i];
    const T sig = r >= T(0) ? T(1) / (T(1) + std::exp(-r))
                            : std::exp(r) / (T(1) + std::exp(r));
    g.data[i] *= sig;
  }
  return g;
}

}  // namespace scaleadapt

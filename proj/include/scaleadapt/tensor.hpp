#pragma once

// Dense 4-D tensors (n, c, h, w) and the fixed layer set of the segmentation
// model, each with a hand-derived backward pass. No general autodiff.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace scaleadapt {

struct shape_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct io_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string dims_str(int n, int c, int h, int w) {
  std::ostringstream os;
  os << "(" << n << "," << c << "," << h << "," << w << ")";
  return os.str();
}

}  // namespace detail

template <class T>
struct Tensor {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<T> data;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_, T fill = T(0))
      : n(n_), c(c_), h(h_), w(w_) {
    if (n < 0 || c < 0 || h < 0 || w < 0)
      throw shape_error("negative tensor dims " + detail::dims_str(n, c, h, w));
    data.assign(static_cast<std::size_t>(n) * c * h * w, fill);
  }

  std::size_t size() const { return data.size(); }

  T& at(int in, int ic, int iy, int ix) {
    return data[((static_cast<std::size_t>(in) * c + ic) * h + iy) * w + ix];
  }
  T at(int in, int ic, int iy, int ix) const {
    return data[((static_cast<std::size_t>(in) * c + ic) * h + iy) * w + ix];
  }

  T* row(int in, int ic, int iy) {
    return data.data() + ((static_cast<std::size_t>(in) * c + ic) * h + iy) * w;
  }
  const T* row(int in, int ic, int iy) const {
    return data.data() + ((static_cast<std::size_t>(in) * c + ic) * h + iy) * w;
  }

  bool same_dims(const Tensor& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }

  std::string dims_str() const { return detail::dims_str(n, c, h, w); }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(n, c, h, w);
    for (std::size_t i = 0; i < data.size(); ++i)
      out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

template <class T>
void require_same_dims(const Tensor<T>& a, const Tensor<T>& b,
                       const char* what) {
  if (!a.same_dims(b))
    throw shape_error(std::string(what) + ": dims " + a.dims_str() + " vs " +
                      b.dims_str());
}

// Cross-correlation, stride 1, zero padding. weights dims (c_out, c_in, k, k)
// with k odd.
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weights,
                 const std::vector<T>& bias, int padding) {
  const int k = weights.h;
  if (k != weights.w || k % 2 == 0)
    throw shape_error("conv2d: kernel must be square odd, got " +
                      weights.dims_str());
  if (weights.c != input.c)
    throw shape_error("conv2d: channel mismatch, input " + input.dims_str() +
                      " vs weights " + weights.dims_str());
  if (static_cast<int>(bias.size()) != weights.n)
    throw shape_error("conv2d: bias size " + std::to_string(bias.size()) +
                      " vs c_out " + std::to_string(weights.n));
  const int oh = input.h - k + 1 + 2 * padding;
  const int ow = input.w - k + 1 + 2 * padding;
  if (oh <= 0 || ow <= 0)
    throw shape_error("conv2d: empty output for input " + input.dims_str());

  Tensor<T> out(input.n, weights.n, oh, ow);
  for (int in = 0; in < input.n; ++in) {
    for (int co = 0; co < weights.n; ++co) {
      for (int y = 0; y < oh; ++y) {
        T* orow = out.row(in, co, y);
        std::fill(orow, orow + ow, bias[co]);
      }
      for (int ci = 0; ci < input.c; ++ci) {
        for (int ku = 0; ku < k; ++ku) {
          const int iy_off = ku - padding;
          for (int kv = 0; kv < k; ++kv) {
            const T wgt = weights.at(co, ci, ku, kv);
            const int ix_off = kv - padding;
            const int x0 = std::max(0, -ix_off);
            const int x1 = std::min(ow, input.w - ix_off);
            for (int y = 0; y < oh; ++y) {
              const int iy = y + iy_off;
              if (iy < 0 || iy >= input.h) continue;
              T* orow = out.row(in, co, y);
              const T* irow = input.row(in, ci, iy) + ix_off;
              for (int x = x0; x < x1; ++x) orow[x] += wgt * irow[x];
            }
          }
        }
      }
    }
  }
  return out;
}

template <class T>
struct ConvGrads {
  Tensor<T> grad_input;
  Tensor<T> grad_weights;
  std::vector<T> grad_bias;
};

template <class T>
ConvGrads<T> conv2d_backward(const Tensor<T>& grad_out, const Tensor<T>& input,
                             const Tensor<T>& weights, int padding) {
  const int k = weights.h;
  const int oh = input.h - k + 1 + 2 * padding;
  const int ow = input.w - k + 1 + 2 * padding;
  if (grad_out.n != input.n || grad_out.c != weights.n || grad_out.h != oh ||
      grad_out.w != ow)
    throw shape_error("conv2d_backward: grad_out " + grad_out.dims_str() +
                      " inconsistent with input " + input.dims_str() +
                      " and weights " + weights.dims_str());

  ConvGrads<T> g{Tensor<T>(input.n, input.c, input.h, input.w),
                 Tensor<T>(weights.n, weights.c, weights.h, weights.w),
                 std::vector<T>(weights.n, T(0))};

  for (int in = 0; in < input.n; ++in) {
    for (int co = 0; co < weights.n; ++co) {
      for (int y = 0; y < oh; ++y) {
        const T* gorow = grad_out.row(in, co, y);
        for (int x = 0; x < ow; ++x) g.grad_bias[co] += gorow[x];
      }
      for (int ci = 0; ci < input.c; ++ci) {
        for (int ku = 0; ku < k; ++ku) {
          const int iy_off = ku - padding;
          for (int kv = 0; kv < k; ++kv) {
            const int ix_off = kv - padding;
            const int x0 = std::max(0, -ix_off);
            const int x1 = std::min(ow, input.w - ix_off);
            const T wgt = weights.at(co, ci, ku, kv);
            T gw = T(0);
            for (int y = 0; y < oh; ++y) {
              const int iy = y + iy_off;
              if (iy < 0 || iy >= input.h) continue;
              const T* gorow = grad_out.row(in, co, y);
              const T* irow = input.row(in, ci, iy) + ix_off;
              T* girow = g.grad_input.row(in, ci, iy) + ix_off;
              for (int x = x0; x < x1; ++x) {
                gw += gorow[x] * irow[x];
                girow[x] += wgt * gorow[x];
              }
            }
            g.grad_weights.at(co, ci, ku, kv) += gw;
          }
        }
      }
    }
  }
  return g;
}

template <class T>
Tensor<T> relu(const Tensor<T>& input) {
  Tensor<T> out = input;
  for (T& v : out.data) v = v > T(0) ? v : T(0);
  return out;
}

template <class T>
Tensor<T> relu_backward(const Tensor<T>& grad_out, const Tensor<T>& input) {
  require_same_dims(grad_out, input, "relu_backward");
  Tensor<T> g = grad_out;
  for (std::size_t i = 0; i < g.data.size(); ++i)
    if (input.data[i] <= T(0)) g.data[i] = T(0);
  return g;
}

// 2x2 average pooling, stride 2. Requires even spatial dims.
template <class T>
Tensor<T> avgpool2(const Tensor<T>& input) {
  if (input.h % 2 != 0 || input.w % 2 != 0)
    throw shape_error("avgpool2: odd spatial dims " + input.dims_str());
  Tensor<T> out(input.n, input.c, input.h / 2, input.w / 2);
  for (int in = 0; in < input.n; ++in)
    for (int ic = 0; ic < input.c; ++ic)
      for (int y = 0; y < out.h; ++y) {
        const T* r0 = input.row(in, ic, 2 * y);
        const T* r1 = input.row(in, ic, 2 * y + 1);
        T* orow = out.row(in, ic, y);
        for (int x = 0; x < out.w; ++x)
          orow[x] = (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]) /
                    T(4);
      }
  return out;
}

template <class T>
Tensor<T> avgpool2_backward(const Tensor<T>& grad_out, int in_h, int in_w) {
  if (grad_out.h * 2 != in_h || grad_out.w * 2 != in_w)
    throw shape_error("avgpool2_backward: grad " + grad_out.dims_str() +
                      " vs input " + std::to_string(in_h) + "x" +
                      std::to_string(in_w));
  Tensor<T> g(grad_out.n, grad_out.c, in_h, in_w);
  for (int in = 0; in < grad_out.n; ++in)
    for (int ic = 0; ic < grad_out.c; ++ic)
      for (int y = 0; y < grad_out.h; ++y) {
        const T* gorow = grad_out.row(in, ic, y);
        T* r0 = g.row(in, ic, 2 * y);
        T* r1 = g.row(in, ic, 2 * y + 1);
        for (int x = 0; x < grad_out.w; ++x) {
          const T v = gorow[x] / T(4);
          r0[2 * x] = v;
          r0[2 * x + 1] = v;
          r1[2 * x] = v;
          r1[2 * x + 1] = v;
        }
      }
  return g;
}

namespace detail {

// align-corners-false source coordinate with clamped neighbors
template <class T>
inline void bilerp_axis(int out_i, int factor, int in_len, int& i0, int& i1,
                        T& w1) {
  const T src = (T(out_i) + T(0.5)) / T(factor) - T(0.5);
  T f = std::floor(src);
  i0 = static_cast<int>(f);
  i1 = i0 + 1;
  w1 = src - f;
  if (i0 < 0) i0 = 0;
  if (i1 < 0) i1 = 0;
  if (i0 > in_len - 1) i0 = in_len - 1;
  if (i1 > in_len - 1) i1 = in_len - 1;
}

}  // namespace detail

template <class T>
Tensor<T> upsample_bilinear(const Tensor<T>& input, int factor) {
  if (factor < 1) throw shape_error("upsample_bilinear: factor must be >= 1");
  Tensor<T> out(input.n, input.c, input.h * factor, input.w * factor);
  for (int y = 0; y < out.h; ++y) {
    int y0, y1;
    T wy;
    detail::bilerp_axis<T>(y, factor, input.h, y0, y1, wy);
    for (int x = 0; x < out.w; ++x) {
      int x0, x1;
      T wx;
      detail::bilerp_axis<T>(x, factor, input.w, x0, x1, wx);
      for (int in = 0; in < input.n; ++in)
        for (int ic = 0; ic < input.c; ++ic) {
          const T v00 = input.at(in, ic, y0, x0);
          const T v01 = input.at(in, ic, y0, x1);
          const T v10 = input.at(in, ic, y1, x0);
          const T v11 = input.at(in, ic, y1, x1);
          out.at(in, ic, y, x) = (T(1) - wy) * ((T(1) - wx) * v00 + wx * v01) +
                                 wy * ((T(1) - wx) * v10 + wx * v11);
        }
    }
  }
  return out;
}

template <class T>
Tensor<T> upsample_bilinear_backward(const Tensor<T>& grad_out, int in_h,
                                     int in_w, int factor) {
  if (grad_out.h != in_h * factor || grad_out.w != in_w * factor)
    throw shape_error("upsample_bilinear_backward: grad " +
                      grad_out.dims_str() + " vs input " + std::to_string(in_h) +
                      "x" + std::to_string(in_w));
  Tensor<T> g(grad_out.n, grad_out.c, in_h, in_w);
  for (int y = 0; y < grad_out.h; ++y) {
    int y0, y1;
    T wy;
    detail::bilerp_axis<T>(y, factor, in_h, y0, y1, wy);
    for (int x = 0; x < grad_out.w; ++x) {
      int x0, x1;
      T wx;
      detail::bilerp_axis<T>(x, factor, in_w, x0, x1, wx);
      for (int in = 0; in < grad_out.n; ++in)
        for (int ic = 0; ic < grad_out.c; ++ic) {
          const T go = grad_out.at(in, ic, y, x);
          g.at(in, ic, y0, x0) += (T(1) - wy) * (T(1) - wx) * go;
          g.at(in, ic, y0, x1) += (T(1) - wy) * wx * go;
          g.at(in, ic, y1, x0) += wy * (T(1) - wx) * go;
          g.at(in, ic, y1, x1) += wy * wx * go;
        }
    }
  }
  return g;
}

// Per-pixel softmax over the channel axis, max-subtracted.
template <class T>
Tensor<T> softmax_channels(const Tensor<T>& input) {
  Tensor<T> out(input.n, input.c, input.h, input.w);
  const std::size_t plane = static_cast<std::size_t>(input.h) * input.w;
  for (int in = 0; in < input.n; ++in) {
    const T* base = input.data.data() + static_cast<std::size_t>(in) *
                                            input.c * plane;
    T* obase = out.data.data() + static_cast<std::size_t>(in) * input.c * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      T mx = base[p];
      for (int ic = 1; ic < input.c; ++ic)
        mx = std::max(mx, base[ic * plane + p]);
      T sum = T(0);
      for (int ic = 0; ic < input.c; ++ic) {
        const T e = std::exp(base[ic * plane + p] - mx);
        obase[ic * plane + p] = e;
        sum += e;
      }
      for (int ic = 0; ic < input.c; ++ic) obase[ic * plane + p] /= sum;
    }
  }
  return out;
}

}  // namespace scaleadapt

#pragma once

// Inference and training objectives: pixel-wise Shannon entropy (nats), the
// above-mean-thresholded entropy loss with its logit gradient, and supervised
// cross-entropy for training / oracle / adversary runs.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "scaleadapt/tensor.hpp"

namespace scaleadapt {

inline constexpr double kLogClamp = 1e-12;  // 0*log 0 = 0 convention

template <class T>
struct EntropyState {
  Tensor<T> entropy;           // (n, 1, h, w), nats
  T mean = T(0);               // H_mu
  std::vector<std::uint8_t> active;  // h*w per image, 1 where H > H_mu
  bool fallback = false;       // empty strict set -> all pixels active
  T loss = T(0);               // sum of active entropies
};

template <class T>
void check_probs(const Tensor<T>& probs, double tol = 1e-5) {
  const std::size_t plane = static_cast<std::size_t>(probs.h) * probs.w;
  for (int in = 0; in < probs.n; ++in) {
    const T* base =
        probs.data.data() + static_cast<std::size_t>(in) * probs.c * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      T sum = T(0);
      for (int c = 0; c < probs.c; ++c) {
        const T v = base[c * plane + p];
        if (v < T(0))
          throw std::invalid_argument("probability below zero: " +
                                      std::to_string(static_cast<double>(v)));
        sum += v;
      }
      if (std::abs(static_cast<double>(sum) - 1.0) > tol)
        throw std::invalid_argument(
            "probabilities not normalized, pixel sum " +
            std::to_string(static_cast<double>(sum)));
    }
  }
}

// H[i,j] = -sum_c p ln p
template <class T>
Tensor<T> entropy_map(const Tensor<T>& probs) {
  check_probs(probs);
  Tensor<T> out(probs.n, 1, probs.h, probs.w);
  const std::size_t plane = static_cast<std::size_t>(probs.h) * probs.w;
  for (int in = 0; in < probs.n; ++in) {
    const T* base =
        probs.data.data() + static_cast<std::size_t>(in) * probs.c * plane;
    T* orow = out.data.data() + static_cast<std::size_t>(in) * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      T h = T(0);
      for (int c = 0; c < probs.c; ++c) {
        const T v = base[c * plane + p];
        h -= v * std::log(std::max(v, T(kLogClamp)));
      }
      orow[p] = h;
    }
  }
  return out;
}

// L = sum of entropies strictly above the mean; falls back to all pixels when
// the strict set is empty. Threshold and mask are recomputed on every call.
template <class T>
EntropyState<T> thresholded_entropy_loss(const Tensor<T>& probs) {
  EntropyState<T> st;
  st.entropy = entropy_map(probs);
  T sum = T(0);
  for (T v : st.entropy.data) sum += v;
  st.mean = sum / T(st.entropy.data.size());
  st.active.assign(st.entropy.data.size(), 0);
  st.loss = T(0);
  bool any = false;
  for (std::size_t i = 0; i < st.entropy.data.size(); ++i)
    if (st.entropy.data[i] > st.mean) {
      st.active[i] = 1;
      st.loss += st.entropy.data[i];
      any = true;
    }
  if (!any) {
    st.fallback = true;
    st.active.assign(st.entropy.data.size(), 1);
    st.loss = sum;
  }
  return st;
}

// Gradient of the thresholded loss with respect to pre-softmax logits, with
// the active mask frozen. dH/dz_c = -p_c (ln p_c + H) at active pixels.
template <class T>
Tensor<T> thresholded_entropy_backward(const Tensor<T>& probs,
                                       const EntropyState<T>& st) {
  if (st.entropy.n != probs.n || st.entropy.h != probs.h ||
      st.entropy.w != probs.w)
    throw shape_error("entropy state " + st.entropy.dims_str() +
                      " does not match probs " + probs.dims_str());
  Tensor<T> grad(probs.n, probs.c, probs.h, probs.w);
  const std::size_t plane = static_cast<std::size_t>(probs.h) * probs.w;
  for (int in = 0; in < probs.n; ++in) {
    const T* pbase =
        probs.data.data() + static_cast<std::size_t>(in) * probs.c * plane;
    T* gbase =
        grad.data.data() + static_cast<std::size_t>(in) * probs.c * plane;
    const T* hrow = st.entropy.data.data() + static_cast<std::size_t>(in) * plane;
    const std::uint8_t* arow = st.active.data() + static_cast<std::size_t>(in) * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      if (!arow[p]) continue;
      const T h = hrow[p];
      for (int c = 0; c < probs.c; ++c) {
        const T pc = pbase[c * plane + p];
        gbase[c * plane + p] =
            -pc * (std::log(std::max(pc, T(kLogClamp))) + h);
      }
    }
  }
  return grad;
}

struct LabelMap {
  int h = 0, w = 0;
  std::vector<int> values;  // row-major

  int at(int y, int x) const { return values[static_cast<std::size_t>(y) * w + x]; }
  int& at(int y, int x) { return values[static_cast<std::size_t>(y) * w + x]; }
};

// Per-pixel argmax over channels of a single-image probability map.
template <class T>
LabelMap argmax_labels(const Tensor<T>& probs) {
  LabelMap out;
  out.h = probs.h;
  out.w = probs.w;
  out.values.resize(static_cast<std::size_t>(probs.h) * probs.w);
  const std::size_t plane = out.values.size();
  for (std::size_t p = 0; p < plane; ++p) {
    int best = 0;
    T best_v = probs.data[p];
    for (int c = 1; c < probs.c; ++c) {
      const T v = probs.data[c * plane + p];
      if (v > best_v) {
        best_v = v;
        best = c;
      }
    }
    out.values[p] = best;
  }
  return out;
}

// Mean over non-ignored pixels of -ln p_label, with the logit gradient.
template <class T>
std::pair<T, Tensor<T>> cross_entropy_loss(const Tensor<T>& probs,
                                           const LabelMap& labels,
                                           int ignore_label = -1) {
  if (probs.n != 1)
    throw shape_error("cross_entropy_loss: expects a single-image batch, got " +
                      probs.dims_str());
  if (probs.h != labels.h || probs.w != labels.w)
    throw shape_error("cross_entropy_loss: probs " + probs.dims_str() +
                      " vs labels " + std::to_string(labels.h) + "x" +
                      std::to_string(labels.w));
  const std::size_t plane = static_cast<std::size_t>(probs.h) * probs.w;
  std::size_t count = 0;
  for (int v : labels.values) {
    if (v == ignore_label) continue;
    if (v < 0 || v >= probs.c)
      throw std::invalid_argument("label " + std::to_string(v) +
                                  " out of range for " +
                                  std::to_string(probs.c) + " classes");
    ++count;
  }
  Tensor<T> grad(probs.n, probs.c, probs.h, probs.w);
  if (count == 0) return {T(0), grad};

  T loss = T(0);
  const T inv_count = T(1) / T(count);
  const T* pbase = probs.data.data();
  T* gbase = grad.data.data();
  for (std::size_t p = 0; p < plane; ++p) {
    const int lab = labels.values[p];
    if (lab == ignore_label) continue;
    loss -= std::log(std::max(pbase[lab * plane + p], T(kLogClamp)));
    for (int c = 0; c < probs.c; ++c) {
      const T pc = pbase[c * plane + p];
      gbase[c * plane + p] = (pc - (c == lab ? T(1) : T(0))) * inv_count;
    }
  }
  return {loss * inv_count, grad};
}

}  // namespace scaleadapt

#pragma once

// The toy fully convolutional segmentation network with a dynamic Gaussian
// receptive-field head.
//
// Backbone (frozen at test time):
//   conv 3x3 pad 1 (c_in -> 16), relu, avgpool2
//   conv 3x3 pad 1 (16 -> 32),   relu, avgpool2
//   conv 3x3 pad 1 (32 -> 64),   relu, bilinear upsample x4
// Head:
//   theta_scale: 1x1 conv (64 -> 1) -> sigma link -> sigma map
//   adaptive Gaussian smoothing of the features by the sigma map
//   theta_free:  3x3 conv pad 1 (64 -> 64), frozen at test time
//   theta_score: 1x1 conv (64 -> C) -> softmax
//
// Only theta_score and theta_scale receive adaptation updates.

#include <cstdint>
#include <utility>
#include <vector>

#include "scaleadapt/rng.hpp"
#include "scaleadapt/scalespace.hpp"
#include "scaleadapt/tensor.hpp"

namespace scaleadapt {

template <class T>
struct ConvLayer {
  Tensor<T> weights;     // (c_out, c_in, k, k)
  std::vector<T> bias;   // c_out

  ConvLayer() = default;
  ConvLayer(int c_out, int c_in, int k)
      : weights(c_out, c_in, k, k), bias(c_out, T(0)) {}
};

inline constexpr int kFeatureChannels = 64;

template <class T>
struct BackboneParams {
  ConvLayer<T> conv1, conv2, conv3;
};

template <class T>
struct HeadParams {
  ConvLayer<T> scale;  // theta_scale, 64 -> 1, 1x1
  ConvLayer<T> free;   // theta_free,  64 -> 64, 3x3
  ConvLayer<T> score;  // theta_score, 64 -> C, 1x1
  int radius_cap = kDefaultRadiusCap;
};

template <class T>
struct ForwardCache {
  Tensor<T> features;   // post-backbone F, (1, 64, h, w)
  Tensor<T> raw_scale;  // pre-link scale logits, (1, 1, h, w)
  Tensor<T> sigma;      // sigma map
  Tensor<T> smoothed;   // adaptively smoothed features
  Tensor<T> free_out;   // theta_free output
  Tensor<T> logits;     // (1, C, h, w)
  Tensor<T> probs;      // softmax of logits
};

// Intermediate backbone activations, needed only for training backprop.
template <class T>
struct BackboneCache {
  Tensor<T> a1, r1, p1;  // conv1 out, relu, pool
  Tensor<T> a2, r2, p2;
  Tensor<T> a3, r3;      // conv3 out, relu (pre-upsample)
};

template <class T>
Tensor<T> backbone_forward(const Tensor<T>& image,
                           const BackboneParams<T>& backbone,
                           BackboneCache<T>* cache = nullptr) {
  if (image.h % 4 != 0 || image.w % 4 != 0)
    throw shape_error("backbone_forward: spatial dims must be divisible by 4, "
                      "got " + image.dims_str());
  Tensor<T> a1 = conv2d(image, backbone.conv1.weights, backbone.conv1.bias, 1);
  Tensor<T> r1 = relu(a1);
  Tensor<T> p1 = avgpool2(r1);
  Tensor<T> a2 = conv2d(p1, backbone.conv2.weights, backbone.conv2.bias, 1);
  Tensor<T> r2 = relu(a2);
  Tensor<T> p2 = avgpool2(r2);
  Tensor<T> a3 = conv2d(p2, backbone.conv3.weights, backbone.conv3.bias, 1);
  Tensor<T> r3 = relu(a3);
  Tensor<T> feats = upsample_bilinear(r3, 4);
  if (cache) {
    cache->a1 = std::move(a1);
    cache->r1 = std::move(r1);
    cache->p1 = std::move(p1);
    cache->a2 = std::move(a2);
    cache->r2 = std::move(r2);
    cache->p2 = std::move(p2);
    cache->a3 = std::move(a3);
    cache->r3 = std::move(r3);
  }
  return feats;
}

// Head-only pass on cached features; shared by full and partial inference so
// the two are bitwise identical.
template <class T>
ForwardCache<T> forward_head(const Tensor<T>& features,
                             const HeadParams<T>& head) {
  if (features.c != kFeatureChannels)
    throw shape_error("forward_head: expected " +
                      std::to_string(kFeatureChannels) + " feature channels, "
                      "got " + features.dims_str());
  ForwardCache<T> cache;
  cache.features = features;
  cache.raw_scale = conv2d(features, head.scale.weights, head.scale.bias, 0);
  cache.sigma = sigma_link(cache.raw_scale);
  cache.smoothed = adaptive_smooth(features, cache.sigma, head.radius_cap);
  cache.free_out = conv2d(cache.smoothed, head.free.weights, head.free.bias, 1);
  cache.logits = conv2d(cache.free_out, head.score.weights, head.score.bias, 0);
  cache.probs = softmax_channels(cache.logits);
  return cache;
}

template <class T>
ForwardCache<T> forward_full(const Tensor<T>& image,
                             const BackboneParams<T>& backbone,
                             const HeadParams<T>& head,
                             BackboneCache<T>* bb_cache = nullptr) {
  return forward_head(backbone_forward(image, backbone, bb_cache), head);
}

template <class T>
struct HeadGrads {
  Tensor<T> score_w;
  std::vector<T> score_b;
  Tensor<T> scale_w;
  std::vector<T> scale_b;
};

// Gradients of a scalar loss with respect to theta_score and theta_scale,
// given the loss gradient at the logits. theta_free and the backbone receive
// no gradient here. Optionally reports the gradient at the features for
// callers that continue into the backbone.
template <class T>
HeadGrads<T> head_backward(const ForwardCache<T>& cache,
                           const Tensor<T>& grad_logits,
                           const HeadParams<T>& head,
                           Tensor<T>* grad_free_w = nullptr,
                           std::vector<T>* grad_free_b = nullptr,
                           Tensor<T>* grad_features = nullptr) {
  require_same_dims(grad_logits, cache.logits, "head_backward");

  ConvGrads<T> gscore =
      conv2d_backward(grad_logits, cache.free_out, head.score.weights, 0);
  ConvGrads<T> gfree =
      conv2d_backward(gscore.grad_input, cache.smoothed, head.free.weights, 1);
  SmoothGrads<T> gsmooth = adaptive_smooth_backward(
      gfree.grad_input, cache.features, cache.sigma, head.radius_cap);
  Tensor<T> grad_raw = sigma_link_backward(gsmooth.grad_sigmas, cache.raw_scale);
  ConvGrads<T> gscale =
      conv2d_backward(grad_raw, cache.features, head.scale.weights, 0);

  if (grad_free_w) *grad_free_w = std::move(gfree.grad_weights);
  if (grad_free_b) *grad_free_b = std::move(gfree.grad_bias);
  if (grad_features) {
    // Features feed the smoothing, the smoothing input, and the scale conv.
    *grad_features = std::move(gsmooth.grad_field);
    for (std::size_t i = 0; i < grad_features->data.size(); ++i)
      grad_features->data[i] += gscale.grad_input.data[i];
  }
  return HeadGrads<T>{std::move(gscore.grad_weights),
                      std::move(gscore.grad_bias),
                      std::move(gscale.grad_weights),
                      std::move(gscale.grad_bias)};
}

template <class T>
struct ModelGrads {
  HeadGrads<T> head;
  Tensor<T> free_w;
  std::vector<T> free_b;
  ConvGrads<T> conv1, conv2, conv3;  // grad_input of conv1 is unused
};

// Full backprop through head and backbone, used for training and for the
// opt-in end-to-end adaptation mode.
template <class T>
ModelGrads<T> model_backward(const Tensor<T>& image,
                             const BackboneCache<T>& bb,
                             const ForwardCache<T>& cache,
                             const Tensor<T>& grad_logits,
                             const BackboneParams<T>& backbone,
                             const HeadParams<T>& head) {
  ModelGrads<T> g;
  Tensor<T> grad_features;
  g.head = head_backward(cache, grad_logits, head, &g.free_w, &g.free_b,
                         &grad_features);
  Tensor<T> gr3 = upsample_bilinear_backward(grad_features, bb.r3.h, bb.r3.w, 4);
  Tensor<T> ga3 = relu_backward(gr3, bb.a3);
  g.conv3 = conv2d_backward(ga3, bb.p2, backbone.conv3.weights, 1);
  Tensor<T> gr2 = avgpool2_backward(g.conv3.grad_input, bb.r2.h, bb.r2.w);
  Tensor<T> ga2 = relu_backward(gr2, bb.a2);
  g.conv2 = conv2d_backward(ga2, bb.p1, backbone.conv2.weights, 1);
  Tensor<T> gr1 = avgpool2_backward(g.conv2.grad_input, bb.r1.h, bb.r1.w);
  Tensor<T> ga1 = relu_backward(gr1, bb.a1);
  g.conv1 = conv2d_backward(ga1, image, backbone.conv1.weights, 1);
  return g;
}

template <class T>
struct Model {
  BackboneParams<T> backbone;
  HeadParams<T> head;
  int num_classes = 0;
};

// He-style fan-in init, zero biases. theta_scale gets small weights and a
// bias placing the initial sigma near 1.0 so the regressor has headroom in
// both directions.
template <class T>
Model<T> init_params(std::uint64_t seed, int c_in, int num_classes) {
  Rng rng(seed);
  Model<T> m;
  m.num_classes = num_classes;
  auto he_fill = [&rng](ConvLayer<T>& layer, double gain) {
    const int fan_in = layer.weights.c * layer.weights.h * layer.weights.w;
    const double std = gain * std::sqrt(2.0 / fan_in);
    for (T& v : layer.weights.data) v = T(rng.normal() * std);
  };
  m.backbone.conv1 = ConvLayer<T>(16, c_in, 3);
  m.backbone.conv2 = ConvLayer<T>(32, 16, 3);
  m.backbone.conv3 = ConvLayer<T>(kFeatureChannels, 32, 3);
  he_fill(m.backbone.conv1, 1.0);
  he_fill(m.backbone.conv2, 1.0);
  he_fill(m.backbone.conv3, 1.0);

  m.head.scale = ConvLayer<T>(1, kFeatureChannels, 1);
  m.head.free = ConvLayer<T>(kFeatureChannels, kFeatureChannels, 3);
  m.head.score = ConvLayer<T>(num_classes, kFeatureChannels, 1);
  // Small scale-regressor weights keep the initial raw output near its bias.
  for (T& v : m.head.scale.weights.data) v = T(rng.normal() * 0.01);
  // sigma_min + softplus(b) = 1.05. The target sits off the kernel-truncation
  // lattice {k/3}: at sigma exactly 1.0 the ceil(3*sigma) support flips
  // between radius 3 and 4, and pixels with all-zero features would land
  // exactly on that discontinuity.
  m.head.scale.bias[0] = T(std::log(std::exp(1.05 - kSigmaMin) - 1.0));
  he_fill(m.head.free, 1.0);
  he_fill(m.head.score, 1.0);
  return m;
}

}  // namespace scaleadapt

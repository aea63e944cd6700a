#pragma once

// Supervised training: SGD with momentum and weight decay, poly learning-rate
// decay, optional scale/flip augmentation. Augmented samples are regenerated
// analytically at the sampled scale, so labels stay exact.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "scaleadapt/data.hpp"
#include "scaleadapt/model.hpp"
#include "scaleadapt/objective.hpp"

namespace scaleadapt {

enum class Augment { None, ScaleFlip };

struct TrainConfig {
  int epochs = 60;
  int batch_size = 8;
  double base_lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0001;
  double poly_power = 0.9;
  Augment augment = Augment::None;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs <= 0 || batch_size <= 0)
      throw std::invalid_argument("train: epochs and batch_size must be > 0");
    if (!(base_lr > 0.0) || !(poly_power > 0.0))
      throw std::invalid_argument("train: rates and poly power must be > 0");
  }
};

// base_lr * (1 - iter/max_iter)^power
inline double poly_lr(long long iter, long long max_iter, double base_lr,
                      double power) {
  if (iter < 0 || iter > max_iter)
    throw std::invalid_argument("poly_lr: iter " + std::to_string(iter) +
                                " outside [0, " + std::to_string(max_iter) +
                                "]");
  return base_lr * std::pow(1.0 - static_cast<double>(iter) / max_iter, power);
}

// v <- momentum*v + grad + weight_decay*param; param <- param - lr*v
template <class T>
void sgd_step(T* params, const T* grads, T* velocity, std::size_t size,
              double lr, double momentum, double weight_decay) {
  for (std::size_t i = 0; i < size; ++i) {
    const double v = momentum * static_cast<double>(velocity[i]) +
                     static_cast<double>(grads[i]) +
                     weight_decay * static_cast<double>(params[i]);
    velocity[i] = T(v);
    params[i] = T(static_cast<double>(params[i]) - lr * v);
  }
}

struct TrainLogRow {
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double train_miou = 0.0;
};

inline std::string train_log_csv(const std::vector<TrainLogRow>& rows) {
  std::string out = "epoch,lr,loss,train_miou\n";
  char buf[128];
  for (const TrainLogRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f,%.4f\n", r.epoch, r.lr,
                  r.loss, r.train_miou);
    out += buf;
  }
  return out;
}

namespace detail {

template <class T>
void flip_horizontal(Scene<T>& scene) {
  const int h = scene.image.h, w = scene.image.w;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w / 2; ++x) {
      std::swap(scene.image.at(0, 0, y, x), scene.image.at(0, 0, y, w - 1 - x));
      std::swap(scene.labels.at(y, x), scene.labels.at(y, w - 1 - x));
    }
}

template <class T>
struct Velocity {
  std::vector<T> data;
  explicit Velocity(std::size_t n) : data(n, T(0)) {}
};

}  // namespace detail

template <class T>
struct TrainResult {
  Model<T> model;
  std::vector<TrainLogRow> log;
};

// Trains on scenes identified by their generation seeds (all at scale 1).
// With scale/flip augmentation each sample is re-rendered at a scale drawn
// from [0.5, 2] and flipped with probability 1/2.
template <class T>
TrainResult<T> train_model(const std::vector<std::uint64_t>& scene_seeds,
                           int image_size, const TrainConfig& cfg,
                           const GenConfig& gen_cfg = GenConfig{}) {
  cfg.validate();
  if (scene_seeds.empty()) throw std::invalid_argument("train: empty dataset");

  TrainResult<T> result;
  result.model = init_params<T>(cfg.seed, 1, kNumClasses);
  Model<T>& model = result.model;

  auto vel_of = [](const ConvLayer<T>& l) {
    return std::pair<detail::Velocity<T>, detail::Velocity<T>>(
        detail::Velocity<T>(l.weights.data.size()),
        detail::Velocity<T>(l.bias.size()));
  };
  auto [v_c1w, v_c1b] = vel_of(model.backbone.conv1);
  auto [v_c2w, v_c2b] = vel_of(model.backbone.conv2);
  auto [v_c3w, v_c3b] = vel_of(model.backbone.conv3);
  auto [v_scw, v_scb] = vel_of(model.head.scale);
  auto [v_frw, v_frb] = vel_of(model.head.free);
  auto [v_sow, v_sob] = vel_of(model.head.score);

  Rng order_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  const long long iters_per_epoch =
      (static_cast<long long>(scene_seeds.size()) + cfg.batch_size - 1) /
      cfg.batch_size;
  const long long max_iter = iters_per_epoch * cfg.epochs;
  long long iter = 0;

  std::vector<std::size_t> order(scene_seeds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Fisher-Yates with the run's own RNG for reproducibility.
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1],
                order[static_cast<std::size_t>(order_rng.uniform_int(
                    0, static_cast<int>(i) - 1))]);

    double epoch_loss = 0.0;
    long long epoch_samples = 0;
    std::vector<long long> inter(kNumClasses, 0), uni(kNumClasses, 0);
    double epoch_lr = 0.0;

    for (long long b = 0; b < iters_per_epoch; ++b) {
      const std::size_t begin = static_cast<std::size_t>(b) * cfg.batch_size;
      const std::size_t end =
          std::min(begin + cfg.batch_size, scene_seeds.size());
      if (begin >= end) break;

      const double lr = poly_lr(iter, max_iter, cfg.base_lr, cfg.poly_power);
      epoch_lr = lr;

      ModelGrads<T> acc;
      bool have_acc = false;
      for (std::size_t s = begin; s < end; ++s) {
        double sample_scale = 1.0;
        bool flip = false;
        if (cfg.augment == Augment::ScaleFlip) {
          sample_scale = order_rng.uniform(0.5, 2.0);
          flip = order_rng.coin();
        }
        Scene<T> scene = gen_scene<T>(scene_seeds[order[s]], image_size,
                                      sample_scale, gen_cfg);
        if (flip) detail::flip_horizontal(scene);

        BackboneCache<T> bb;
        ForwardCache<T> cache =
            forward_full(scene.image, model.backbone, model.head, &bb);
        auto [loss, grad_logits] = cross_entropy_loss(cache.probs, scene.labels);
        epoch_loss += static_cast<double>(loss);
        ++epoch_samples;

        const LabelMap pred = argmax_labels(cache.probs);
        for (std::size_t i = 0; i < pred.values.size(); ++i) {
          const int p = pred.values[i], t = scene.labels.values[i];
          if (p == t) {
            ++inter[p];
            ++uni[p];
          } else {
            ++uni[p];
            ++uni[t];
          }
        }

        ModelGrads<T> g = model_backward(scene.image, bb, cache, grad_logits,
                                         model.backbone, model.head);
        if (!have_acc) {
          acc = std::move(g);
          have_acc = true;
        } else {
          auto add = [](auto& dst, const auto& src) {
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
          };
          add(acc.head.score_w.data, g.head.score_w.data);
          add(acc.head.score_b, g.head.score_b);
          add(acc.head.scale_w.data, g.head.scale_w.data);
          add(acc.head.scale_b, g.head.scale_b);
          add(acc.free_w.data, g.free_w.data);
          add(acc.free_b, g.free_b);
          add(acc.conv1.grad_weights.data, g.conv1.grad_weights.data);
          add(acc.conv1.grad_bias, g.conv1.grad_bias);
          add(acc.conv2.grad_weights.data, g.conv2.grad_weights.data);
          add(acc.conv2.grad_bias, g.conv2.grad_bias);
          add(acc.conv3.grad_weights.data, g.conv3.grad_weights.data);
          add(acc.conv3.grad_bias, g.conv3.grad_bias);
        }
      }

      const double inv_b = 1.0 / static_cast<double>(end - begin);
      auto scale_grads = [inv_b](auto& v) {
        for (auto& x : v) x = static_cast<std::remove_reference_t<decltype(x)>>(
                              static_cast<double>(x) * inv_b);
      };
      scale_grads(acc.head.score_w.data);
      scale_grads(acc.head.score_b);
      scale_grads(acc.head.scale_w.data);
      scale_grads(acc.head.scale_b);
      scale_grads(acc.free_w.data);
      scale_grads(acc.free_b);
      scale_grads(acc.conv1.grad_weights.data);
      scale_grads(acc.conv1.grad_bias);
      scale_grads(acc.conv2.grad_weights.data);
      scale_grads(acc.conv2.grad_bias);
      scale_grads(acc.conv3.grad_weights.data);
      scale_grads(acc.conv3.grad_bias);

      auto step = [&](ConvLayer<T>& layer, const Tensor<T>& gw,
                      const std::vector<T>& gb, detail::Velocity<T>& vw,
                      detail::Velocity<T>& vb) {
        sgd_step(layer.weights.data.data(), gw.data.data(), vw.data.data(),
                 layer.weights.data.size(), lr, cfg.momentum,
                 cfg.weight_decay);
        sgd_step(layer.bias.data(), gb.data(), vb.data.data(),
                 layer.bias.size(), lr, cfg.momentum, cfg.weight_decay);
      };
      step(model.backbone.conv1, acc.conv1.grad_weights, acc.conv1.grad_bias,
           v_c1w, v_c1b);
      step(model.backbone.conv2, acc.conv2.grad_weights, acc.conv2.grad_bias,
           v_c2w, v_c2b);
      step(model.backbone.conv3, acc.conv3.grad_weights, acc.conv3.grad_bias,
           v_c3w, v_c3b);
      step(model.head.scale, acc.head.scale_w, acc.head.scale_b, v_scw, v_scb);
      step(model.head.free, acc.free_w, acc.free_b, v_frw, v_frb);
      step(model.head.score, acc.head.score_w, acc.head.score_b, v_sow, v_sob);
      ++iter;
    }

    TrainLogRow row;
    row.epoch = epoch;
    row.lr = epoch_lr;
    row.loss = epoch_samples > 0 ? epoch_loss / epoch_samples : 0.0;
    double sum = 0.0;
    int present = 0;
    for (int c = 0; c < kNumClasses; ++c)
      if (uni[c] > 0) {
        sum += static_cast<double>(inter[c]) / uni[c];
        ++present;
      }
    row.train_miou = present > 0 ? sum / present : 1.0;
    result.log.push_back(row);
  }
  return result;
}

}  // namespace scaleadapt

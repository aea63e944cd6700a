#pragma once

// Inference-time optimization: episodic Adam updates of theta_score and
// theta_scale against the chosen objective (entropy, oracle, adversary), with
// a fixed step count. Each episode works on a private copy of the head, so
// the trained model is untouched.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "scaleadapt/data.hpp"
#include "scaleadapt/model.hpp"
#include "scaleadapt/objective.hpp"

namespace scaleadapt {

enum class AdaptMode { Baseline, Entropy, Oracle, Adversary };
enum class AdaptVars { Score, Scale, Both, All };  // All = end-to-end, opt-in

inline const char* to_string(AdaptMode m) {
  switch (m) {
    case AdaptMode::Baseline: return "baseline";
    case AdaptMode::Entropy: return "entropy";
    case AdaptMode::Oracle: return "oracle";
    case AdaptMode::Adversary: return "adversary";
  }
  return "?";
}

inline const char* to_string(AdaptVars v) {
  switch (v) {
    case AdaptVars::Score: return "score";
    case AdaptVars::Scale: return "scale";
    case AdaptVars::Both: return "both";
    case AdaptVars::All: return "all";
  }
  return "?";
}

struct AdaptConfig {
  int steps = 32;
  double learning_rate = 0.001;
  AdaptMode mode = AdaptMode::Entropy;
  AdaptVars variables = AdaptVars::Both;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  int effective_steps() const {
    return mode == AdaptMode::Baseline ? 0 : steps;
  }
};

template <class T>
struct AdamState {
  std::vector<T> m, v;
  long long t = 0;

  explicit AdamState(std::size_t size) : m(size, T(0)), v(size, T(0)) {}
};

// Standard bias-corrected Adam on a flat parameter span. Returns the L2 norm
// of the applied update.
template <class T>
double adam_step(T* params, const T* grads, std::size_t size, AdamState<T>& st,
                 double lr, double beta1 = 0.9, double beta2 = 0.999,
                 double eps = 1e-8) {
  if (st.m.size() != size)
    throw shape_error("adam_step: state size " + std::to_string(st.m.size()) +
                      " vs params " + std::to_string(size));
  ++st.t;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(st.t));
  double norm2 = 0.0;
  for (std::size_t i = 0; i < size; ++i) {
    const double g = static_cast<double>(grads[i]);
    st.m[i] = T(beta1 * static_cast<double>(st.m[i]) + (1.0 - beta1) * g);
    st.v[i] = T(beta2 * static_cast<double>(st.v[i]) + (1.0 - beta2) * g * g);
    const double mhat = static_cast<double>(st.m[i]) / bc1;
    const double vhat = static_cast<double>(st.v[i]) / bc2;
    const double upd = lr * mhat / (std::sqrt(vhat) + eps);
    params[i] = T(static_cast<double>(params[i]) - upd);
    norm2 += upd * upd;
  }
  return std::sqrt(norm2);
}

struct StepRecord {
  int step = 0;
  double loss = 0.0;
  double mean_entropy = 0.0;
  double update_norm = 0.0;
  double miou = std::nan("");  // only when truth is available
};

template <class T>
struct AdaptTrajectory {
  std::vector<StepRecord> records;  // steps + 1 entries, [0] = feedforward
  ForwardCache<T> final_cache;
  bool aborted = false;             // non-finite loss; last finite state kept
  std::string diagnostic;
};

namespace detail {

template <class T>
double mean_of(const Tensor<T>& t) {
  double sum = 0.0;
  for (T v : t.data) sum += static_cast<double>(v);
  return sum / static_cast<double>(t.data.size());
}

// Loss value and logit gradient for one step of the configured objective.
template <class T>
std::pair<double, Tensor<T>> objective_grad(const ForwardCache<T>& cache,
                                            const LabelMap* truth,
                                            AdaptMode mode) {
  switch (mode) {
    case AdaptMode::Entropy: {
      const EntropyState<T> st = thresholded_entropy_loss(cache.probs);
      return {static_cast<double>(st.loss),
              thresholded_entropy_backward(cache.probs, st)};
    }
    case AdaptMode::Oracle: {
      auto [loss, grad] = cross_entropy_loss(cache.probs, *truth);
      return {static_cast<double>(loss), std::move(grad)};
    }
    case AdaptMode::Adversary: {
      auto [loss, grad] = cross_entropy_loss(cache.probs, *truth);
      for (T& g : grad.data) g = -g;
      return {-static_cast<double>(loss), std::move(grad)};
    }
    case AdaptMode::Baseline:
      break;
  }
  return {0.0, Tensor<T>()};
}

}  // namespace detail

// One adaptation episode on a single image. The caller's model is not
// modified; the head (and, in end-to-end mode, the backbone) is copied.
// In entropy and baseline modes the truth, when given, is used only for the
// reported mIoU column.
template <class T>
using StepObserver = std::function<void(int step, const ForwardCache<T>&)>;

template <class T>
AdaptTrajectory<T> adapt_episode(const Tensor<T>& image, const Model<T>& model,
                                 const LabelMap* truth, const AdaptConfig& cfg,
                                 const StepObserver<T>& on_step = {}) {
  if ((cfg.mode == AdaptMode::Oracle || cfg.mode == AdaptMode::Adversary) &&
      truth == nullptr)
    throw std::invalid_argument(std::string(to_string(cfg.mode)) +
                                " mode requires ground-truth labels");
  if (cfg.steps < 0) throw std::invalid_argument("adapt: steps must be >= 0");

  HeadParams<T> head = model.head;
  BackboneParams<T> backbone = model.backbone;  // copied only for All mode
  const bool end_to_end = cfg.variables == AdaptVars::All;

  BackboneCache<T> bb_cache;
  ForwardCache<T> cache =
      forward_full(image, backbone, head, end_to_end ? &bb_cache : nullptr);

  AdaptTrajectory<T> traj;
  const int steps = cfg.effective_steps();

  auto record = [&](int step, double loss, double update_norm) {
    StepRecord r;
    r.step = step;
    r.loss = loss;
    r.mean_entropy = detail::mean_of(entropy_map(cache.probs));
    r.update_norm = update_norm;
    if (truth)
      r.miou = iou(argmax_labels(cache.probs), *truth, model.num_classes).miou;
    traj.records.push_back(r);
  };

  const AdaptMode loss_mode =
      cfg.mode == AdaptMode::Baseline ? AdaptMode::Entropy : cfg.mode;
  {
    auto [loss0, g0] = detail::objective_grad(cache, truth, loss_mode);
    (void)g0;
    record(0, loss0, 0.0);
    if (on_step) on_step(0, cache);
  }

  AdamState<T> st_score_w(head.score.weights.data.size());
  AdamState<T> st_score_b(head.score.bias.size());
  AdamState<T> st_scale_w(head.scale.weights.data.size());
  AdamState<T> st_scale_b(head.scale.bias.size());
  std::optional<AdamState<T>> st_free_w, st_free_b, st_c1w, st_c1b, st_c2w,
      st_c2b, st_c3w, st_c3b;
  if (end_to_end) {
    st_free_w.emplace(head.free.weights.data.size());
    st_free_b.emplace(head.free.bias.size());
    st_c1w.emplace(backbone.conv1.weights.data.size());
    st_c1b.emplace(backbone.conv1.bias.size());
    st_c2w.emplace(backbone.conv2.weights.data.size());
    st_c2b.emplace(backbone.conv2.bias.size());
    st_c3w.emplace(backbone.conv3.weights.data.size());
    st_c3b.emplace(backbone.conv3.bias.size());
  }

  const bool do_score = cfg.variables == AdaptVars::Score ||
                        cfg.variables == AdaptVars::Both || end_to_end;
  const bool do_scale = cfg.variables == AdaptVars::Scale ||
                        cfg.variables == AdaptVars::Both || end_to_end;

  for (int t = 1; t <= steps; ++t) {
    auto [loss, grad_logits] = detail::objective_grad(cache, truth, loss_mode);
    if (!std::isfinite(loss)) {
      traj.aborted = true;
      traj.diagnostic = "non-finite loss at step " + std::to_string(t) +
                        "; keeping last finite state";
      break;
    }

    double norm2 = 0.0;
    auto step_on = [&](std::vector<T>& p, const std::vector<T>& g,
                       AdamState<T>& st) {
      const double n = adam_step(p.data(), g.data(), p.size(), st,
                                 cfg.learning_rate, cfg.beta1, cfg.beta2,
                                 cfg.epsilon);
      norm2 += n * n;
    };

    if (end_to_end) {
      ModelGrads<T> g = model_backward(image, bb_cache, cache, grad_logits,
                                       backbone, head);
      step_on(head.score.weights.data, g.head.score_w.data, st_score_w);
      step_on(head.score.bias, g.head.score_b, st_score_b);
      step_on(head.scale.weights.data, g.head.scale_w.data, st_scale_w);
      step_on(head.scale.bias, g.head.scale_b, st_scale_b);
      step_on(head.free.weights.data, g.free_w.data, *st_free_w);
      step_on(head.free.bias, g.free_b, *st_free_b);
      step_on(backbone.conv1.weights.data, g.conv1.grad_weights.data, *st_c1w);
      step_on(backbone.conv1.bias, g.conv1.grad_bias, *st_c1b);
      step_on(backbone.conv2.weights.data, g.conv2.grad_weights.data, *st_c2w);
      step_on(backbone.conv2.bias, g.conv2.grad_bias, *st_c2b);
      step_on(backbone.conv3.weights.data, g.conv3.grad_weights.data, *st_c3w);
      step_on(backbone.conv3.bias, g.conv3.grad_bias, *st_c3b);
      cache = forward_full(image, backbone, head, &bb_cache);
    } else {
      HeadGrads<T> g = head_backward(cache, grad_logits, head);
      if (do_score) {
        step_on(head.score.weights.data, g.score_w.data, st_score_w);
        step_on(head.score.bias, g.score_b, st_score_b);
      }
      if (do_scale) {
        step_on(head.scale.weights.data, g.scale_w.data, st_scale_w);
        step_on(head.scale.bias, g.scale_b, st_scale_b);
      }
      cache = forward_head(cache.features, head);
    }

    auto [new_loss, g_unused] = detail::objective_grad(cache, truth, loss_mode);
    (void)g_unused;
    record(t, new_loss, std::sqrt(norm2));
    if (on_step) on_step(t, cache);
  }

  traj.final_cache = std::move(cache);
  return traj;
}

// --- Metrics rows and CSV ---

struct MetricsRow {
  double scale = 1.0;
  AdaptMode mode = AdaptMode::Baseline;
  AdaptVars variables = AdaptVars::Both;
  int steps = 0;
  std::uint64_t seed = 0;
  double miou = 0.0;
  double mean_entropy_initial = 0.0;
  double mean_entropy_final = 0.0;
};

inline constexpr const char* kMetricsHeader =
    "scale,mode,variables,steps,seed,miou,mean_entropy_initial,"
    "mean_entropy_final";

inline std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string out = kMetricsHeader;
  out += "\n";
  char buf[256];
  for (const MetricsRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%.4f,%s,%s,%d,%llu,%.4f,%.4f,%.4f\n",
                  r.scale, to_string(r.mode), to_string(r.variables), r.steps,
                  static_cast<unsigned long long>(r.seed), r.miou,
                  r.mean_entropy_initial, r.mean_entropy_final);
    out += buf;
  }
  return out;
}

// Runs every config against every scene, one row per (config, scene).
// Episodes are independent, so they run on a thread pool; the row order is
// fixed by the (config, scene) grid and does not depend on the thread count.
template <class T>
std::vector<MetricsRow> sweep(const std::vector<Scene<T>>& scenes,
                              const Model<T>& model,
                              const std::vector<AdaptConfig>& cfgs) {
  if (scenes.empty()) throw std::invalid_argument("sweep: empty scene list");
  const std::size_t jobs = cfgs.size() * scenes.size();
  std::vector<MetricsRow> rows(jobs);

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next.fetch_add(1); i < jobs; i = next.fetch_add(1)) {
      const AdaptConfig& cfg = cfgs[i / scenes.size()];
      const Scene<T>& scene = scenes[i % scenes.size()];
      AdaptTrajectory<T> traj =
          adapt_episode(scene.image, model, &scene.labels, cfg);
      MetricsRow r;
      r.scale = scene.scale;
      r.mode = cfg.mode;
      r.variables = cfg.variables;
      r.steps = cfg.effective_steps();
      r.seed = scene.seed;
      r.miou = traj.records.back().miou;
      r.mean_entropy_initial = traj.records.front().mean_entropy;
      r.mean_entropy_final = traj.records.back().mean_entropy;
      rows[i] = r;
    }
  };

  const unsigned hw = std::thread::hardware_concurrency();
  const std::size_t n_threads =
      std::min<std::size_t>(jobs, hw > 0 ? hw : 1);
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < n_threads; ++i) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }
  return rows;
}

}  // namespace scaleadapt

#pragma once

// Independent reference implementations used only by tests: brute-force
// convolution, direct Gaussian evaluation, and central finite differences.
// Nothing here may call into the implementation paths it checks.

#include <cmath>
#include <functional>
#include <vector>

#include "scaleadapt/tensor.hpp"

namespace oracles {

using scaleadapt::Tensor;

// Direct 6-nested-loop cross-correlation with zero padding.
inline Tensor<double> conv2d_naive(const Tensor<double>& input,
                                   const Tensor<double>& weights,
                                   const std::vector<double>& bias,
                                   int padding) {
  const int k = weights.h;
  const int oh = input.h - k + 1 + 2 * padding;
  const int ow = input.w - k + 1 + 2 * padding;
  Tensor<double> out(input.n, weights.n, oh, ow);
  for (int in = 0; in < input.n; ++in)
    for (int co = 0; co < weights.n; ++co)
      for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
          double acc = bias[co];
          for (int ci = 0; ci < input.c; ++ci)
            for (int ku = 0; ku < k; ++ku)
              for (int kv = 0; kv < k; ++kv) {
                const int iy = y + ku - padding;
                const int ix = x + kv - padding;
                if (iy < 0 || iy >= input.h || ix < 0 || ix >= input.w)
                  continue;
                acc += weights.at(co, ci, ku, kv) * input.at(in, ci, iy, ix);
              }
          out.at(in, co, y, x) = acc;
        }
  return out;
}

// Normalized 2-D Gaussian taps evaluated straight from the formula.
inline std::vector<double> gaussian_taps_direct(double sigma, int radius) {
  const int d = 2 * radius + 1;
  std::vector<double> taps(d * d);
  double sum = 0.0;
  for (int u = -radius; u <= radius; ++u)
    for (int v = -radius; v <= radius; ++v) {
      const double g = std::exp(-(u * u + v * v) / (2.0 * sigma * sigma));
      taps[(u + radius) * d + (v + radius)] = g;
      sum += g;
    }
  for (double& t : taps) t /= sum;
  return taps;
}

// Central finite difference of a scalar function over a flat parameter
// vector, evaluated in place.
inline std::vector<double> finite_diff(std::vector<double>& params,
                                       const std::function<double()>& f,
                                       double step = 1e-5) {
  std::vector<double> grad(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = params[i];
    params[i] = saved + step;
    const double fp = f();
    params[i] = saved - step;
    const double fm = f();
    params[i] = saved;
    grad[i] = (fp - fm) / (2.0 * step);
  }
  return grad;
}

// Largest relative error between an analytic and a reference gradient,
// with an absolute floor for near-zero entries.
inline double max_rel_err(const std::vector<double>& analytic,
                          const std::vector<double>& reference,
                          double floor = 1e-8) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double denom = std::max(std::abs(reference[i]), floor);
    worst = std::max(worst, std::abs(analytic[i] - reference[i]) / denom);
  }
  return worst;
}

}  // namespace oracles

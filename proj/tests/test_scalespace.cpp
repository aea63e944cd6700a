#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "scaleadapt/rng.hpp"
#include "scaleadapt/scalespace.hpp"

using namespace scaleadapt;

namespace {

Tensor<double> random_field(int c, int h, int w, Rng& rng) {
  Tensor<double> t(1, c, h, w);
  for (double& v : t.data) v = rng.uniform(-1.0, 1.0);
  return t;
}

Tensor<double> uniform_sigma(int h, int w, double sigma) {
  return Tensor<double>(1, 1, h, w, sigma);
}

// Plain non-adaptive smoothing with one shared kernel, reflect borders.
Tensor<double> smooth_single_kernel(const Tensor<double>& field, double sigma,
                                    int radius) {
  const GaussianKernel<double> k = gaussian_kernel(sigma, radius);
  Tensor<double> out(field.n, field.c, field.h, field.w);
  for (int c = 0; c < field.c; ++c)
    for (int y = 0; y < field.h; ++y)
      for (int x = 0; x < field.w; ++x) {
        double acc = 0.0;
        for (int u = -radius; u <= radius; ++u)
          for (int v = -radius; v <= radius; ++v)
            acc += k.tap(u, v) * field.at(0, c, detail::reflect(y + u, field.h),
                                          detail::reflect(x + v, field.w));
        out.at(0, c, y, x) = acc;
      }
  return out;
}

}  // namespace

TEST_CASE("gaussian kernel basics") {
  SECTION("delta limit as sigma approaches zero") {
    const GaussianKernel<double> k = gaussian_kernel(1e-4, 2);
    CHECK_THAT(k.tap(0, 0), Catch::Matchers::WithinAbs(1.0, 1e-12));
    CHECK(k.tap(1, 0) < 1e-12);
  }
  SECTION("radius zero is a single unit tap") {
    const GaussianKernel<double> k = gaussian_kernel(1.0, 0);
    REQUIRE(k.taps.size() == 1);
    CHECK(k.taps[0] == 1.0);
  }
  SECTION("matches direct evaluation") {
    const GaussianKernel<double> k = gaussian_kernel(1.5, 4);
    const std::vector<double> want = oracles::gaussian_taps_direct(1.5, 4);
    for (std::size_t i = 0; i < want.size(); ++i)
      CHECK(std::abs(k.taps[i] - want[i]) < 1e-12);
  }
  SECTION("rejects non-positive sigma") {
    CHECK_THROWS_AS(gaussian_kernel(0.0, 2), std::invalid_argument);
    CHECK_THROWS_AS(gaussian_kernel(-1.0, 2), std::invalid_argument);
  }
}

TEST_CASE("kernel normalization and symmetry invariants") {
  for (double sigma : {0.3, 0.7, 1.0, 2.5, 6.0}) {
    const int radius = 5;
    const GaussianKernel<double> k = gaussian_kernel(sigma, radius);
    double sum = 0.0;
    for (double t : k.taps) sum += t;
    CHECK_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-9));
    for (int u = -radius; u <= radius; ++u)
      for (int v = -radius; v <= radius; ++v) {
        CHECK(k.tap(u, v) == k.tap(-u, v));
        CHECK(k.tap(u, v) == k.tap(u, -v));
      }
  }
}

TEST_CASE("kernel sigma-derivative") {
  SECTION("derivative taps sum to zero") {
    for (double sigma : {0.4, 1.0, 3.0}) {
      const std::vector<double> d = kernel_dsigma(sigma, 4);
      double sum = 0.0;
      for (double t : d) sum += t;
      CHECK_THAT(sum, Catch::Matchers::WithinAbs(0.0, 1e-9));
    }
  }
  SECTION("matches central finite differences") {
    const double sigma = 1.0, step = 1e-6;
    const std::vector<double> d = kernel_dsigma(sigma, 3);
    const std::vector<double> hi = oracles::gaussian_taps_direct(sigma + step, 3);
    const std::vector<double> lo = oracles::gaussian_taps_direct(sigma - step, 3);
    for (std::size_t i = 0; i < d.size(); ++i)
      CHECK(std::abs(d[i] - (hi[i] - lo[i]) / (2 * step)) < 1e-7);
  }
  SECTION("radius zero has zero derivative") {
    const std::vector<double> d = kernel_dsigma(1.0, 0);
    REQUIRE(d.size() == 1);
    CHECK_THAT(d[0], Catch::Matchers::WithinAbs(0.0, 1e-15));
  }
}

TEST_CASE("adaptive smoothing preserves constants at minimal sigma") {
  Tensor<double> field(1, 2, 6, 6, 0.42);
  Tensor<double> out = adaptive_smooth(field, uniform_sigma(6, 6, kSigmaMin));
  for (double v : out.data)
    CHECK_THAT(v, Catch::Matchers::WithinAbs(0.42, 1e-12));
}

TEST_CASE("uniform sigma map equals plain Gaussian convolution") {
  Rng rng(5);
  Tensor<double> field = random_field(2, 10, 10, rng);
  const double sigma = 1.3;
  const int radius = detail::sigma_radius(sigma, kDefaultRadiusCap);
  Tensor<double> got = adaptive_smooth(field, uniform_sigma(10, 10, sigma));
  Tensor<double> want = smooth_single_kernel(field, sigma, radius);
  for (std::size_t i = 0; i < got.data.size(); ++i)
    CHECK(std::abs(got.data[i] - want.data[i]) < 1e-10);
}

TEST_CASE("two-pass smoothing composes on interior pixels (semigroup)") {
  Rng rng(17);
  const int n = 48;
  Tensor<double> field = random_field(1, n, n, rng);
  Tensor<double> two_pass = adaptive_smooth(
      adaptive_smooth(field, uniform_sigma(n, n, 2.0)),
      uniform_sigma(n, n, std::sqrt(5.0)));
  Tensor<double> one_pass = adaptive_smooth(field, uniform_sigma(n, n, 3.0));
  const int margin = 14;  // beyond the combined truncation radii
  double linf = 0.0;
  for (int y = margin; y < n - margin; ++y)
    for (int x = margin; x < n - margin; ++x)
      linf = std::max(linf, std::abs(two_pass.at(0, 0, y, x) -
                                     one_pass.at(0, 0, y, x)));
  CHECK(linf < 1e-3);
}

TEST_CASE("stronger uniform blur does not increase local total variation") {
  Rng rng(23);
  const int n = 24;
  Tensor<double> field = random_field(1, n, n, rng);
  const int y0 = 12, x0 = 12;
  double prev_tv = 1e300;
  for (double sigma : {0.5, 1.0, 2.0, 4.0}) {
    Tensor<double> sm = adaptive_smooth(field, uniform_sigma(n, n, sigma));
    double tv = 0.0;
    for (int y = y0 - 2; y <= y0 + 2; ++y)
      for (int x = x0 - 2; x <= x0 + 2; ++x) {
        tv += std::abs(sm.at(0, 0, y, x) - sm.at(0, 0, y, x + 1));
        tv += std::abs(sm.at(0, 0, y, x) - sm.at(0, 0, y + 1, x));
      }
    CHECK(tv <= prev_tv + 1e-12);
    prev_tv = tv;
  }
}

TEST_CASE("adaptive smoothing backward") {
  Rng rng(29);
  Tensor<double> field = random_field(2, 8, 8, rng);
  Tensor<double> sigmas(1, 1, 8, 8);
  for (double& s : sigmas.data) s = rng.uniform(0.4, 1.5);

  SECTION("zero grad_out gives zero gradients") {
    Tensor<double> zero(1, 2, 8, 8);
    SmoothGrads<double> g = adaptive_smooth_backward(zero, field, sigmas);
    for (double v : g.grad_field.data) CHECK(v == 0.0);
    for (double v : g.grad_sigmas.data) CHECK(v == 0.0);
  }

  SECTION("matches finite differences") {
    Tensor<double> go = random_field(2, 8, 8, rng);
    SmoothGrads<double> g = adaptive_smooth_backward(go, field, sigmas);
    auto loss = [&]() {
      Tensor<double> out = adaptive_smooth(field, sigmas);
      double s = 0.0;
      for (std::size_t i = 0; i < out.data.size(); ++i)
        s += go.data[i] * out.data[i];
      return s;
    };
    CHECK(oracles::max_rel_err(g.grad_field.data,
                               oracles::finite_diff(field.data, loss, 1e-6),
                               1e-6) < 1e-5);
    CHECK(oracles::max_rel_err(g.grad_sigmas.data,
                               oracles::finite_diff(sigmas.data, loss, 1e-6),
                               1e-6) < 1e-5);
  }

  SECTION("constant field has zero sigma gradient") {
    Tensor<double> const_field(1, 1, 8, 8, 0.9);
    Tensor<double> go(1, 1, 8, 8, 1.0);
    SmoothGrads<double> g = adaptive_smooth_backward(go, const_field, sigmas);
    for (int y = 2; y < 6; ++y)
      for (int x = 2; x < 6; ++x)
        CHECK_THAT(g.grad_sigmas.at(0, 0, y, x),
                   Catch::Matchers::WithinAbs(0.0, 1e-12));
  }
}

TEST_CASE("adaptive smoothing validates shapes and sigma floor") {
  Tensor<double> field(1, 1, 4, 4, 1.0);
  CHECK_THROWS_AS(adaptive_smooth(field, Tensor<double>(1, 1, 5, 4, 1.0)),
                  shape_error);
  CHECK_THROWS_AS(adaptive_smooth(field, Tensor<double>(1, 1, 4, 4, 0.1)),
                  std::invalid_argument);
}

TEST_CASE("sigma link") {
  Tensor<double> raw(1, 1, 1, 3);
  raw.data = {0.0, -100.0, 30.0};
  Tensor<double> sigma = sigma_link(raw);
  CHECK_THAT(sigma.data[0],
             Catch::Matchers::WithinAbs(kSigmaMin + std::log(2.0), 1e-12));
  CHECK_THAT(sigma.data[1], Catch::Matchers::WithinAbs(kSigmaMin, 1e-12));
  CHECK_THAT(sigma.data[2], Catch::Matchers::WithinAbs(kSigmaMin + 30.0, 1e-9));
  CHECK(std::isfinite(sigma.data[2]));

  // Backward multiplies by the logistic sigmoid of raw.
  Tensor<double> gs(1, 1, 1, 3, 1.0);
  Tensor<double> g = sigma_link_backward(gs, raw);
  CHECK_THAT(g.data[0], Catch::Matchers::WithinAbs(0.5, 1e-12));
  CHECK_THAT(g.data[1], Catch::Matchers::WithinAbs(0.0, 1e-12));
  CHECK_THAT(g.data[2], Catch::Matchers::WithinAbs(1.0, 1e-9));
}

// Copyright (c) 2026 nearstore contributors.
// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "nearstore/model.hpp"

using namespace nearstore;

namespace {

std::vector<half> to_half(const std::vector<float>& w) {
  std::vector<half> out(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = narrow(w[i]);
  return out;
}

}  // namespace

TEST_CASE("parameter layout is W1 then W2") {
  const MlpSpec spec{5, 6};
  CHECK(spec.param_count() == 6 * (5 + 1));
  const auto blocks = spec.blocks();
  REQUIRE(blocks.size() == 2);
  CHECK(blocks[0].offset == 0);
  CHECK(blocks[0].len == 30);
  CHECK(blocks[1].offset == 30);
  CHECK(blocks[1].len == 6);
  CHECK(blocks[1].end() == spec.param_count());
}

TEST_CASE("rng draws are deterministic and in range") {
  Rng a(42), b(42), c(43);
  bool all_equal = true;
  bool any_diff_seed = false;
  for (int i = 0; i < 1000; ++i) {
    const double ua = a.uniform();
    const double ub = b.uniform();
    all_equal = all_equal && (ua == ub);
    any_diff_seed = any_diff_seed || (ua != c.uniform());
    CHECK(ua >= 0.0);
    CHECK(ua < 1.0);
  }
  CHECK(all_equal);
  CHECK(any_diff_seed);

  Rng r(7);
  for (int i = 0; i < 1000; ++i) {
    const double v = r.uniform(-3.0, 5.0);
    CHECK(v >= -3.0);
    CHECK(v < 5.0);
  }
}

TEST_CASE("gaussian draws have unit variance and zero mean") {
  Rng r(2024);
  const int n = 20000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double g = r.gaussian();
    sum += g;
    sq += g * g;
  }
  const double mean = sum / n;
  const double var = sq / n - mean * mean;
  CHECK(std::fabs(mean) < 0.05);
  CHECK(var == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("initial parameters are reproducible and fan-bounded") {
  const MlpSpec spec{9, 8};
  Rng r1(5), r2(5);
  const auto p1 = init_params(spec, r1);
  const auto p2 = init_params(spec, r2);
  CHECK(p1 == p2);
  REQUIRE(p1.size() == spec.param_count());
  const double s1 = std::sqrt(6.0 / (9 + 8));
  const double s2 = std::sqrt(6.0 / (8 + 1));
  for (std::size_t i = 0; i < 72; ++i) CHECK(std::fabs(p1[i]) <= s1);
  for (std::size_t i = 72; i < p1.size(); ++i) CHECK(std::fabs(p1[i]) <= s2);
}

TEST_CASE("teacher dataset is deterministic; noise scales with sigma") {
  const MlpSpec spec{6, 4};
  const auto d1 = make_teacher_dataset(spec, 4000, 0.0, 11);
  const auto d2 = make_teacher_dataset(spec, 4000, 0.0, 11);
  CHECK(d1.x == d2.x);
  CHECK(d1.y == d2.y);
  const auto d3 = make_teacher_dataset(spec, 4000, 0.0, 12);
  CHECK(d1.x != d3.x);

  for (const float x : d1.x) {
    CHECK(x >= -1.0f);
    CHECK(x < 1.0f);
  }

  // Same seed, different sigma: inputs identical, targets shifted by
  // sigma-scaled gaussian noise with unit sample variance.
  const auto noisy = make_teacher_dataset(spec, 4000, 0.5, 11);
  CHECK(noisy.x == d1.x);
  double sq = 0.0;
  for (std::size_t s = 0; s < noisy.size; ++s) {
    const double e = (static_cast<double>(noisy.y[s]) - d1.y[s]) / 0.5;
    sq += e * e;
  }
  CHECK(sq / 4000.0 == doctest::Approx(1.0).epsilon(0.1));
}

TEST_CASE("loss matches a hand computation for a two-input net") {
  const MlpSpec spec{2, 1};
  // y_hat = w2 * tanh(w1a*x0 + w1b*x1)
  const std::vector<float> w = {0.5f, -0.25f, 2.0f};
  Dataset d;
  d.input_dim = 2;
  d.size = 2;
  d.x = {1.0f, 0.5f, -1.0f, 0.25f};
  d.y = {1.0f, -0.5f};
  const auto w16 = to_half(w);
  double expect = 0.0;
  for (std::size_t s = 0; s < 2; ++s) {
    const float a = widen(w16[0]) * d.x[2 * s] + widen(w16[1]) * d.x[2 * s + 1];
    const double yh = widen(w16[2]) * std::tanh(a);
    expect += (yh - d.y[s]) * (yh - d.y[s]);
  }
  expect /= 2.0;
  CHECK(mlp_loss(spec, w16, d) == doctest::Approx(expect).epsilon(1e-6));
}

TEST_CASE("analytic gradient agrees with central differences") {
  const MlpSpec spec{5, 6};
  Rng rng(3);
  const auto w = init_params(spec, rng);
  auto w16 = to_half(w);
  const auto data = make_teacher_dataset(spec, 16, 0.1, 21);

  std::vector<float> grad(w.size());
  const double loss = mlp_loss_and_grad(spec, w16, data, grad);
  CHECK(loss == doctest::Approx(mlp_loss(spec, w16, data)));

  for (std::size_t i = 0; i < w16.size(); ++i) {
    const half keep = w16[i];
    const float base = widen(keep);
    const float eps = 0.02f;
    // Perturb through fp16 and measure the realized step so rounding of the
    // probe does not pollute the difference quotient.
    w16[i] = narrow(base + eps);
    const float hi = widen(w16[i]);
    const double lp = mlp_loss(spec, w16, data);
    w16[i] = narrow(base - eps);
    const float lo = widen(w16[i]);
    const double lm = mlp_loss(spec, w16, data);
    w16[i] = keep;
    const double fd = (lp - lm) / (static_cast<double>(hi) - lo);
    CHECK(std::fabs(fd - grad[i]) <=
          5e-3 + 0.02 * std::fabs(static_cast<double>(grad[i])));
  }
}

TEST_CASE("shape mismatches are rejected") {
  const MlpSpec spec{2, 1};
  Dataset d;
  d.input_dim = 2;
  d.size = 1;
  d.x = {0.0f, 0.0f};
  d.y = {0.0f};
  std::vector<half> short_w(2);
  CHECK_THROWS_AS(mlp_loss(spec, short_w, d), std::invalid_argument);
  std::vector<half> w(3);
  std::vector<float> short_g(2);
  CHECK_THROWS_AS(mlp_loss_and_grad(spec, w, d, short_g),
                  std::invalid_argument);
}

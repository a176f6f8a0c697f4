// Copyright (c) 2026 nearstore contributors.
// SPDX-License-Identifier: Apache-2.0
#include "nearstore/model.hpp"

#include <cmath>
#include <stdexcept>

namespace nearstore {

double Rng::uniform() {
  // Top 53 bits give a uniform double in [0, 1).
  return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
  return lo + (hi - lo) * uniform();
}

double Rng::gaussian() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double a = 2.0 * 3.14159265358979323846 * u2;
  spare_ = r * std::sin(a);
  has_spare_ = true;
  return r * std::cos(a);
}

std::vector<FlatSegment> MlpSpec::blocks() const {
  const std::size_t w1 = hidden_dim * input_dim;
  return {FlatSegment{0, w1, Dtype::f16},
          FlatSegment{w1, hidden_dim, Dtype::f16}};
}

std::vector<float> init_params(const MlpSpec& spec, Rng& rng) {
  std::vector<float> p(spec.param_count());
  const std::size_t w1 = spec.hidden_dim * spec.input_dim;
  const double s1 =
      std::sqrt(6.0 / static_cast<double>(spec.input_dim + spec.hidden_dim));
  const double s2 = std::sqrt(6.0 / static_cast<double>(spec.hidden_dim + 1));
  for (std::size_t i = 0; i < w1; ++i) {
    p[i] = static_cast<float>(rng.uniform(-s1, s1));
  }
  for (std::size_t i = w1; i < p.size(); ++i) {
    p[i] = static_cast<float>(rng.uniform(-s2, s2));
  }
  return p;
}

namespace {

// Forward pass for one sample; h (hidden activations) is written.
float forward_one(const MlpSpec& spec, std::span<const float> w,
                  const float* x, float* h) {
  const std::size_t in = spec.input_dim;
  const std::size_t hid = spec.hidden_dim;
  for (std::size_t j = 0; j < hid; ++j) {
    float acc = 0.0f;
    const float* row = w.data() + j * in;
    for (std::size_t i = 0; i < in; ++i) acc += row[i] * x[i];
    h[j] = std::tanh(acc);
  }
  const float* w2 = w.data() + hid * in;
  float y = 0.0f;
  for (std::size_t j = 0; j < hid; ++j) y += w2[j] * h[j];
  return y;
}

std::vector<float> widen_params(std::span<const half> w16) {
  std::vector<float> w(w16.size());
  for (std::size_t i = 0; i < w16.size(); ++i) w[i] = widen(w16[i]);
  return w;
}

}  // namespace

Dataset make_teacher_dataset(const MlpSpec& spec, std::size_t n,
                             double noise_sigma, std::uint64_t seed) {
  Dataset d;
  d.input_dim = spec.input_dim;
  d.size = n;
  d.x.resize(n * spec.input_dim);
  d.y.resize(n);
  Rng rng(seed);
  Rng teacher_rng(seed ^ 0x9e3779b97f4a7c15ull);
  const std::vector<float> teacher = init_params(spec, teacher_rng);
  std::vector<float> h(spec.hidden_dim);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t i = 0; i < spec.input_dim; ++i) {
      d.x[s * spec.input_dim + i] = static_cast<float>(rng.uniform(-1.0, 1.0));
    }
    const float y = forward_one(spec, teacher, d.x.data() + s * spec.input_dim,
                                h.data());
    d.y[s] = y + static_cast<float>(noise_sigma * rng.gaussian());
  }
  return d;
}

double mlp_loss(const MlpSpec& spec, std::span<const half> w16,
                const Dataset& data) {
  if (w16.size() != spec.param_count() || data.input_dim != spec.input_dim) {
    throw std::invalid_argument("mlp_loss: shape mismatch");
  }
  const std::vector<float> w = widen_params(w16);
  std::vector<float> h(spec.hidden_dim);
  double acc = 0.0;
  for (std::size_t s = 0; s < data.size; ++s) {
    const float y = forward_one(spec, w, data.x.data() + s * spec.input_dim,
                                h.data());
    const double e = static_cast<double>(y) - static_cast<double>(data.y[s]);
    acc += e * e;
  }
  return acc / static_cast<double>(data.size);
}

double mlp_loss_and_grad(const MlpSpec& spec, std::span<const half> w16,
                         const Dataset& data, std::span<float> grad_out) {
  if (w16.size() != spec.param_count() || grad_out.size() != w16.size() ||
      data.input_dim != spec.input_dim) {
    throw std::invalid_argument("mlp_loss_and_grad: shape mismatch");
  }
  const std::size_t in = spec.input_dim;
  const std::size_t hid = spec.hidden_dim;
  const std::vector<float> w = widen_params(w16);
  const float* w2 = w.data() + hid * in;
  float* g1 = grad_out.data();
  float* g2 = grad_out.data() + hid * in;
  std::fill(grad_out.begin(), grad_out.end(), 0.0f);

  std::vector<float> h(hid);
  double acc = 0.0;
  const float inv_n = 1.0f / static_cast<float>(data.size);
  for (std::size_t s = 0; s < data.size; ++s) {
    const float* x = data.x.data() + s * in;
    const float y = forward_one(spec, w, x, h.data());
    const float e = y - data.y[s];
    acc += static_cast<double>(e) * static_cast<double>(e);
    const float dy = 2.0f * e * inv_n;
    for (std::size_t j = 0; j < hid; ++j) {
      g2[j] += dy * h[j];
      const float dh = dy * w2[j] * (1.0f - h[j] * h[j]);
      float* grow = g1 + j * in;
      for (std::size_t i = 0; i < in; ++i) grow[i] += dh * x[i];
    }
  }
  return acc / static_cast<double>(data.size);
}

}  // namespace nearstore

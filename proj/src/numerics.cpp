// Copyright (c) 2026 nearstore contributors.
// SPDX-License-Identifier: Apache-2.0
#include "nearstore/numerics.hpp"

#include <cmath>
#include <stdexcept>

namespace nearstore {

void validate_segment(const FlatSegment& seg, std::size_t total_len) {
  if (seg.len == 0) throw std::invalid_argument("FlatSegment: len must be > 0");
  if (seg.offset + seg.len > total_len)
    throw std::invalid_argument("FlatSegment: offset+len exceeds total length");
}

std::string to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::adam: return "adam";
    case OptimizerKind::sgd_momentum: return "sgd_momentum";
    case OptimizerKind::adagrad: return "adagrad";
  }
  throw std::logic_error("unknown OptimizerKind");
}

OptimizerKind optimizer_kind_from_string(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd_momentum") return OptimizerKind::sgd_momentum;
  if (s == "adagrad") return OptimizerKind::adagrad;
  throw std::invalid_argument("unknown optimizer kind: " + s);
}

void OptimizerConfig::validate() const {
  if (!(lr > 0.0f) || !std::isfinite(lr))
    throw std::invalid_argument("OptimizerConfig: lr must be finite and > 0");
  if (kind == OptimizerKind::adam) {
    if (!(beta1 >= 0.0f && beta1 < 1.0f))
      throw std::invalid_argument("OptimizerConfig: beta1 must be in [0,1)");
    if (!(beta2 >= 0.0f && beta2 < 1.0f))
      throw std::invalid_argument("OptimizerConfig: beta2 must be in [0,1)");
  }
  if (kind != OptimizerKind::sgd_momentum) {
    if (!(eps > 0.0f))
      throw std::invalid_argument("OptimizerConfig: eps must be > 0");
  }
  if (kind == OptimizerKind::sgd_momentum) {
    if (!(momentum_coef >= 0.0f && momentum_coef < 1.0f))
      throw std::invalid_argument(
          "OptimizerConfig: momentum_coef must be in [0,1)");
  }
}

OptimizerShard OptimizerShard::zeros(std::size_t len) {
  OptimizerShard s;
  s.params32.assign(len, 0.0f);
  s.momentum.assign(len, 0.0f);
  s.variance.assign(len, 0.0f);
  return s;
}

OptimizerShard OptimizerShard::from_params(std::span<const float> params) {
  OptimizerShard s = zeros(params.size());
  s.params32.assign(params.begin(), params.end());
  return s;
}

void OptimizerShard::validate() const {
  if (momentum.size() != params32.size() || variance.size() != params32.size())
    throw std::logic_error("OptimizerShard: state arrays must share one length");
}

std::vector<float> axpby(float alpha, std::span<const float> a, float beta,
                         std::span<const float> b) {
  if (a.size() != b.size())
    throw std::invalid_argument("axpby: length mismatch");
  std::vector<float> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = alpha * a[i] + beta * b[i];
  return out;
}

bool update_in_place(const OptimizerConfig& cfg, std::uint64_t step_index,
                     float clip_scale, std::span<const float> grad,
                     std::span<float> p32, std::span<float> m,
                     std::span<float> v, std::span<half> p16_out) {
  cfg.validate();
  const std::size_t n = grad.size();
  const bool needs_m = cfg.kind != OptimizerKind::adagrad;
  const bool needs_v = cfg.kind != OptimizerKind::sgd_momentum;
  if (p32.size() != n || (needs_m && m.size() != n) ||
      (needs_v && v.size() != n))
    throw std::invalid_argument("update_in_place: buffer length mismatch");
  if (!p16_out.empty() && p16_out.size() != n)
    throw std::invalid_argument("update_in_place: p16_out length mismatch");
  if (!(clip_scale > 0.0f && clip_scale <= 1.0f))
    throw std::invalid_argument("update_in_place: clip_scale must be in (0,1]");
  if (step_index == 0)
    throw std::invalid_argument("update_in_place: step_index is 1-based");

  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(grad[i])) return false;

  switch (cfg.kind) {
    case OptimizerKind::adam: {
      const float one_minus_b1 = 1.0f - cfg.beta1;
      const float one_minus_b2 = 1.0f - cfg.beta2;
      const float bc1 =
          1.0f - std::pow(cfg.beta1, static_cast<float>(step_index));
      const float bc2 =
          1.0f - std::pow(cfg.beta2, static_cast<float>(step_index));
      for (std::size_t i = 0; i < n; ++i) {
        const float g = clip_scale * grad[i];
        m[i] = cfg.beta1 * m[i] + one_minus_b1 * g;
        v[i] = cfg.beta2 * v[i] + one_minus_b2 * (g * g);
        const float mh = cfg.bias_correction ? m[i] / bc1 : m[i];
        const float vh = cfg.bias_correction ? v[i] / bc2 : v[i];
        p32[i] = p32[i] - cfg.lr * (mh / (std::sqrt(vh) + cfg.eps));
      }
      break;
    }
    case OptimizerKind::sgd_momentum: {
      for (std::size_t i = 0; i < n; ++i) {
        const float g = clip_scale * grad[i];
        m[i] = cfg.momentum_coef * m[i] + g;
        p32[i] = p32[i] - cfg.lr * m[i];
      }
      break;
    }
    case OptimizerKind::adagrad: {
      for (std::size_t i = 0; i < n; ++i) {
        const float g = clip_scale * grad[i];
        v[i] = v[i] + g * g;
        p32[i] = p32[i] - cfg.lr * (g / (std::sqrt(v[i]) + cfg.eps));
      }
      break;
    }
  }

  for (std::size_t i = 0; i < p16_out.size(); ++i) p16_out[i] = narrow(p32[i]);
  return true;
}

UpdateResult apply_update(OptimizerShard& shard, std::span<const float> grad,
                          const OptimizerConfig& cfg, float clip_scale) {
  shard.validate();
  if (grad.size() != shard.len())
    throw std::invalid_argument("apply_update: grad length mismatch");

  UpdateResult res;
  res.params16.resize(shard.len());
  const bool ok =
      update_in_place(cfg, shard.step_count + 1, clip_scale, grad,
                      shard.params32, shard.momentum, shard.variance,
                      res.params16);
  if (!ok) {
    res.skipped = true;
    res.params16.clear();
    return res;
  }
  shard.step_count += 1;
  return res;
}

GradChecker::GradChecker(float loss_scale) : loss_scale_(loss_scale) {
  if (!(loss_scale > 0.0f) || !std::isfinite(loss_scale))
    throw std::invalid_argument("GradChecker: loss_scale must be finite and > 0");
}

void GradChecker::feed(std::span<const half> segment) {
  float seg_acc = 0.0f;
  for (const half h : segment) {
    const float g = widen(h) / loss_scale_;
    if (!std::isfinite(g)) res_.has_nan_or_inf = true;
    seg_acc += g * g;
  }
  res_.global_sq_norm += seg_acc;
}

GradCheckResult check_gradients(std::span<const half> grads, float loss_scale) {
  GradChecker c(loss_scale);
  c.feed(grads);
  return c.result();
}

float clip_scale_from_norm(float global_sq_norm, float max_norm) {
  if (!(max_norm > 0.0f))
    throw std::invalid_argument("clip_scale_from_norm: max_norm must be > 0");
  if (global_sq_norm < 0.0f)
    throw std::invalid_argument("clip_scale_from_norm: negative squared norm");
  const float norm = std::sqrt(global_sq_norm);
  if (norm <= max_norm) return 1.0f;
  return max_norm / norm;
}

void LossScaler::update(bool overflow) {
  if (overflow) {
    scale *= backoff;
    good_steps = 0;
    return;
  }
  if (++good_steps >= growth_interval) {
    scale *= growth;
    good_steps = 0;
  }
}

}  // namespace nearstore

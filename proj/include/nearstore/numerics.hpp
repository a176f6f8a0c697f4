// Copyright (c) 2026 nearstore contributors.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "nearstore/fp16.hpp"

namespace nearstore {

enum class Dtype : std::uint8_t { f16, f32 };

inline std::size_t dtype_bytes(Dtype d) { return d == Dtype::f16 ? 2 : 4; }

// A contiguous run of the flattened parameter space.
struct FlatSegment {
  std::size_t offset = 0;
  std::size_t len = 0;
  Dtype dtype = Dtype::f16;

  std::size_t byte_size() const { return len * dtype_bytes(dtype); }
  std::size_t end() const { return offset + len; }
};

// Throws std::invalid_argument unless 0 < len and offset+len <= total_len.
void validate_segment(const FlatSegment& seg, std::size_t total_len);

enum class OptimizerKind : std::uint8_t { adam, sgd_momentum, adagrad };

std::string to_string(OptimizerKind k);
OptimizerKind optimizer_kind_from_string(const std::string& s);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float momentum_coef = 0.0f;   // sgd_momentum only
  bool bias_correction = true;  // adam only

  void validate() const;  // throws std::invalid_argument on bad hyperparameters
};

// fp32 master state for one shard of the flat parameter space. The three
// arrays always share one length regardless of optimizer kind; kinds that
// need fewer states simply leave the unused array at zero.
struct OptimizerShard {
  std::vector<float> params32;
  std::vector<float> momentum;
  std::vector<float> variance;
  std::uint64_t step_count = 0;

  static OptimizerShard zeros(std::size_t len);
  static OptimizerShard from_params(std::span<const float> params);

  std::size_t len() const { return params32.size(); }
  std::size_t byte_size() const { return 3 * sizeof(float) * len(); }
  void validate() const;  // throws std::logic_error if array lengths diverge
};

// out[i] = alpha * a[i] + beta * b[i], computed in fp32 with no contraction.
std::vector<float> axpby(float alpha, std::span<const float> a, float beta,
                         std::span<const float> b);

struct UpdateResult {
  bool skipped = false;          // grad contained NaN/Inf; state untouched
  std::vector<half> params16;    // narrowed updated parameters (empty if skipped)
};

// Single optimizer step over raw buffers. `step_index` is 1-based (the value
// bias correction sees). Returns false and leaves all outputs untouched if
// grad contains NaN/Inf. p16_out may be empty to skip narrowing.
bool update_in_place(const OptimizerConfig& cfg, std::uint64_t step_index,
                     float clip_scale, std::span<const float> grad,
                     std::span<float> p32, std::span<float> m,
                     std::span<float> v, std::span<half> p16_out);

// Shard-level step: applies update_in_place and bumps step_count on success.
// Pre: grad.size() == shard.len(); grad already unscaled; clip_scale in (0,1].
UpdateResult apply_update(OptimizerShard& shard, std::span<const float> grad,
                          const OptimizerConfig& cfg, float clip_scale);

struct GradCheckResult {
  bool has_nan_or_inf = false;
  float global_sq_norm = 0.0f;  // fp32 accumulation, sequential per segment
};

// Streaming NaN/Inf + squared-norm scan over fp16 gradient segments. Each
// element is widened and divided by loss_scale in fp32 before inspection.
// Accumulation order: sequential within a segment, then segment-order sum.
class GradChecker {
 public:
  explicit GradChecker(float loss_scale);

  void feed(std::span<const half> segment);
  GradCheckResult result() const { return res_; }
  float loss_scale() const { return loss_scale_; }

 private:
  float loss_scale_;
  GradCheckResult res_;
};

GradCheckResult check_gradients(std::span<const half> grads, float loss_scale);

// min(1, max_norm / sqrt(global_sq_norm)); max_norm must be > 0.
float clip_scale_from_norm(float global_sq_norm, float max_norm);

// Dynamic loss scaling: halve on overflow, double after `growth_interval`
// consecutive good steps.
struct LossScaler {
  float scale = 1024.0f;
  float backoff = 0.5f;
  float growth = 2.0f;
  int growth_interval = 100;
  int good_steps = 0;

  void update(bool overflow);
};

}  // namespace nearstore

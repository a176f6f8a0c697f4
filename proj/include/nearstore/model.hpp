// Copyright (c) 2026 nearstore contributors.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "nearstore/fp16.hpp"
#include "nearstore/numerics.hpp"

namespace nearstore {

// Deterministic RNG with hand-rolled uniform/gaussian mappings so frozen
// test values do not depend on libstdc++ distribution internals.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }
  double uniform();                       // [0, 1)
  double uniform(double lo, double hi);   // [lo, hi)
  double gaussian();                      // standard normal, Box-Muller

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Two-layer MLP without biases: input_dim -> hidden_dim (tanh) -> 1.
// Flat parameter order: W1 row-major (hidden x input), then W2 (1 x hidden).
struct MlpSpec {
  std::size_t input_dim = 255;
  std::size_t hidden_dim = 256;

  std::size_t param_count() const { return hidden_dim * (input_dim + 1); }
  // Offload blocks, one per layer, in flat order.
  std::vector<FlatSegment> blocks() const;
};

struct Dataset {
  std::size_t input_dim = 0;
  std::size_t size = 0;
  std::vector<float> x;  // size * input_dim, row-major
  std::vector<float> y;  // size
};

// Scaled-uniform initial master parameters (fan-based symmetric range).
std::vector<float> init_params(const MlpSpec& spec, Rng& rng);

// Inputs uniform in [-1, 1); targets from a same-architecture fp32 teacher
// plus gaussian noise of the given sigma.
Dataset make_teacher_dataset(const MlpSpec& spec, std::size_t n,
                             double noise_sigma, std::uint64_t seed);

// Mean-squared-error loss of fp16 weights over the batch; fp32 arithmetic.
double mlp_loss(const MlpSpec& spec, std::span<const half> w16,
                const Dataset& data);

// Loss plus dense fp32 gradient (same flat order as the parameters).
double mlp_loss_and_grad(const MlpSpec& spec, std::span<const half> w16,
                         const Dataset& data, std::span<float> grad_out);

}  // namespace nearstore

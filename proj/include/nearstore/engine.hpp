// Copyright (c) 2026 nearstore contributors.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <vector>

#include "nearstore/fabric.hpp"
#include "nearstore/model.hpp"
#include "nearstore/numerics.hpp"
#include "nearstore/transfer_handler.hpp"

namespace nearstore {

// Where the optimizer runs and how gradients travel.
//   mem:    in-memory reference, no fabric at all
//   base:   states striped over plain SSDs, host CPU updates
//   su:     per-device segments, device-side update, sequential tasklets
//   su_o:   su plus the overlapped transfer-handler pipeline
//   su_o_c: su_o plus top-k gradient compression on the host edge
enum class Mode : std::uint8_t { mem, base, su, su_o, su_o_c };

std::string to_string(Mode m);
Mode mode_from_string(const std::string& s);

struct Partition {
  std::vector<FlatSegment> segments;  // index = device id
};

// Balanced contiguous split of [0, n): first n % devices segments get one
// extra element. Pure function of (n, devices).
Partition partition_parameters(std::size_t n, std::size_t devices);

struct EngineConfig {
  Mode mode = Mode::mem;
  OptimizerConfig optimizer;
  MlpSpec model{255, 256};
  std::size_t batch_size = 64;
  double noise_sigma = 0.05;
  std::uint64_t seed = 1;
  float max_grad_norm = 1.0f;
  LossScaler scaler;
  double compression_pct = 0.0;  // required iff mode == su_o_c
  bool error_feedback = false;
  std::size_t devices = 1;       // ignored when topology is set
  std::optional<FabricTopology> topology;
  std::uint64_t stripe_size = 1ull << 20;       // base RAID0 stripe
  std::uint64_t chunk_bytes = 8ull << 20;       // base host-update chunking
  std::uint64_t subgroup_budget = 16ull << 20;  // device buffer budget cap
  bool deterministic = false;  // sequential devices, canonical pipeline order
  bool dry = false;            // no payload data: trace and ledger only
  std::filesystem::path data_dir = "nearstore_data";

  std::size_t device_count() const {
    return topology ? topology->device_count() : devices;
  }
  void validate() const;  // throws std::invalid_argument
};

struct IterationReport {
  std::size_t step = 0;  // 1-based position in the run
  double loss = 0.0;
  bool skipped = false;
  float loss_scale_after = 0.0f;
  float grad_sq_norm = 0.0f;  // unscaled, post-gate
  LedgerSnapshot delta;       // this iteration's traffic (empty for mem)
  std::uint64_t sparse_pairs = 0;
  std::uint64_t sparse_payload_bytes = 0;
  std::uint64_t activation_bytes = 0;  // checkpointed to host memory
};

// One training run: owns the model copy, the dataset, the fabric and the
// per-device update machinery for the configured mode.
class Engine {
 public:
  explicit Engine(EngineConfig cfg);
  ~Engine();

  const EngineConfig& config() const { return cfg_; }
  const Partition& partition() const { return partition_; }
  const FabricTopology& topology() const;

  IterationReport train_step();
  std::vector<IterationReport> run(std::size_t steps);

  double eval_loss() const;
  std::span<const half> params16() const { return p16_; }
  // Assembled fp32 master parameters / optimizer state, read back from
  // wherever the mode keeps them (not available dry).
  std::vector<float> read_master() const;
  std::vector<float> read_state(Var which) const;  // momentum or variance

  Trace take_trace();
  DeviceFabric* fabric() { return fabric_.get(); }
  std::uint64_t applied_steps() const { return applied_steps_; }
  float loss_scale() const { return scaler_.scale; }
  const PoolStats& pool_stats(std::uint32_t dev) const;
  const std::vector<Tasklet>& plan(std::uint32_t dev) const;
  const std::vector<PipelineEvent>& last_pipeline_events(std::uint32_t dev) const;

  // Test hook: the next backward produces a non-finite gradient.
  void inject_overflow_once() { inject_overflow_ = true; }

 private:
  struct DeviceState;
  struct SparsePiece;

  void init_mem();
  void init_base();
  void init_su();
  void forward_phase(std::uint64_t& fw_op);
  bool backward_phase(std::uint64_t fw_op, double& loss, float& grad_sq_norm,
                      TraceDeps& gate_deps);
  void update_base(float clip, std::uint64_t step_index,
                   const TraceDeps& gate_deps);
  void update_su(float clip, std::uint64_t step_index,
                 const TraceDeps& gate_deps);
  void offload_dense(std::uint64_t bw_op, TraceDeps& gate_deps);
  void offload_sparse(std::uint64_t bw_op, TraceDeps& gate_deps);
  std::vector<StripePiece> base_pieces(std::size_t region,
                                       std::uint64_t byte_off,
                                       std::uint64_t len) const;

  EngineConfig cfg_;
  std::size_t n_params_ = 0;
  Partition partition_;
  Dataset data_;
  std::vector<half> p16_;

  // mem mode state
  std::vector<float> p32_, m_, v_;

  // shared per-step scratch
  std::vector<float> g32_;        // unscaled fp32 grads (canonical)
  std::vector<half> g16_;         // scaled fp16 grads as the GPU emits them
  std::vector<float> residual_;   // error-feedback carrier (optional)

  std::unique_ptr<DeviceFabric> fabric_;
  std::vector<std::unique_ptr<DeviceState>> dev_;
  std::array<std::uint64_t, 4> base_region_off_{};  // p32, m, v, grads
  std::size_t base_state_regions_ = 0;

  LossScaler scaler_;
  std::uint64_t applied_steps_ = 0;
  std::size_t steps_run_ = 0;
  TraceDeps iter_tail_;
  bool inject_overflow_ = false;
};

}  // namespace nearstore

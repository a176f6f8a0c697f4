// Copyright (c) 2026 nearstore contributors.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <span>
#include <vector>

#include "nearstore/fabric.hpp"
#include "nearstore/numerics.hpp"

namespace nearstore {

// One device-side update subgroup: a contiguous slice of the device's owned
// segment that fits the accelerator buffer budget.
struct Tasklet {
  std::size_t index = 0;
  std::size_t elem_offset = 0;  // relative to the device segment
  std::size_t elem_count = 0;
};

// Device buffer footprint per parameter element (fp32 states + fp16 out).
std::size_t update_footprint_bytes_per_elem(OptimizerKind kind);

// Greedy contiguous split of a segment into subgroups whose footprint fits
// capacity_bytes. Throws std::invalid_argument if even one element does not.
std::vector<Tasklet> plan_subgroups(std::size_t segment_len,
                                    std::size_t capacity_bytes,
                                    OptimizerKind kind);

enum class Var : std::uint8_t { params32, momentum, variance, grad, params16 };

std::string to_string(Var v);

// fp32 state variables a kind loads and writes back (grad is load-only).
std::vector<Var> state_vars(OptimizerKind kind);

// Aggregate alloc/dealloc accounting shared by pools (naive mode allocates
// per tasklet; the pipeline allocates once).
struct PoolStats {
  std::mutex mu;
  std::uint64_t current = 0;
  std::uint64_t peak = 0;
  std::vector<std::uint64_t> samples;  // current after each alloc/dealloc

  void on_alloc(std::uint64_t bytes);
  void on_dealloc(std::uint64_t bytes);
};

// Preallocated device-side buffers for the largest subgroup, with per-buffer
// ownership handoff tokens (at most one owner per buffer at any instant).
class BufferPool {
 public:
  BufferPool(std::size_t max_elems, OptimizerKind kind,
             std::size_t sparse_capacity_bytes, PoolStats* stats = nullptr);
  ~BufferPool();

  BufferPool(const BufferPool&) = delete;
  BufferPool& operator=(const BufferPool&) = delete;

  std::size_t max_elems() const { return max_elems_; }
  std::uint64_t allocated_bytes() const { return allocated_; }
  OptimizerKind kind() const { return kind_; }

  std::span<float> f32(Var v);
  std::span<half> f16();           // params16 output buffer
  std::span<std::byte> sparse();   // compressed-gradient staging

  // Blocks until `tasklet` owns buffer `v`; returns the trace op that last
  // released it (dependency for the next transfer touching the buffer).
  std::uint64_t acquire(Var v, std::size_t tasklet);
  void release(Var v, std::size_t next_tasklet, std::uint64_t last_op);
  void abort();  // wake all waiters with an error
  // Hands every buffer back to tasklet 0 keeping last_op, so the next
  // iteration's first loads still depend on this iteration's writebacks.
  void rearm();
  // Distinct nonzero last-release ops across all buffers (the pipeline's
  // trailing writebacks).
  TraceDeps tail_ops() const;

 private:
  struct Token {
    std::size_t next_user = 0;
    std::uint64_t last_op = 0;
  };
  Token& token(Var v);

  std::size_t max_elems_;
  OptimizerKind kind_;
  std::uint64_t allocated_ = 0;
  PoolStats* stats_ = nullptr;
  std::vector<float> p32_, m_, v_, g_;
  std::vector<half> p16_;
  std::vector<std::byte> sparse_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  bool aborted_ = false;
  Token tokens_[5];
};

struct PipelineAborted : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Engine-provided transfer and compute hooks. All return trace op ids.
struct PipelineIo {
  std::function<std::uint64_t(const Tasklet&, Var, BufferPool&,
                              const TraceDeps&)>
      load;
  // State writeback; low_priority marks the deferred ones.
  std::function<std::uint64_t(const Tasklet&, Var, BufferPool&,
                              const TraceDeps&, bool low_priority)>
      store;
  // Urgent write of updated fp32 params to the host-visible staging region.
  std::function<std::uint64_t(const Tasklet&, BufferPool&, const TraceDeps&)>
      stage;
  // Device-side update over the pool buffers; deps are the loads.
  std::function<std::uint64_t(const Tasklet&, BufferPool&, const TraceDeps&)>
      update;
  // Called once the staging write is issued (host consumes updated params).
  std::function<void(const Tasklet&, std::uint64_t)> on_staged;  // optional
};

// Functional event log entry (monotone logical sequence, shared clock).
struct PipelineEvent {
  std::size_t tasklet = 0;
  std::string name;  // load.<var> / update / params_writeback / signal / state_writeback.<var>
  std::uint64_t seq = 0;
  std::uint64_t op_id = 0;  // trace op, 0 for pure markers
};

struct PipelineResult {
  std::vector<PipelineEvent> events;
  std::size_t completed = 0;
  TraceDeps tails;  // trailing ops nothing in the pipeline depends on
};

struct PipelineOptions {
  bool threaded = true;  // two workers; false = canonical sequential order
};

// Two-worker overlapped pipeline over a preallocated pool: per tasklet,
// load -> update -> urgent params writeback (staging + fp32 state) -> signal,
// with momentum/variance writebacks deferred at low priority so the next
// subgroup's loads proceed under them.
PipelineResult run_pipeline(std::span<const Tasklet> tasklets,
                            BufferPool& pool, const PipelineIo& io,
                            const PipelineOptions& opts = {});

// Sequential oracle: per tasklet, allocate -> load all -> update -> write all
// back -> deallocate. Same transfers, no overlap, fresh buffers each time.
PipelineResult naive_pipeline(std::span<const Tasklet> tasklets,
                              OptimizerKind kind, std::size_t max_elems,
                              std::size_t sparse_capacity_bytes,
                              const PipelineIo& io, PoolStats* stats = nullptr);

}  // namespace nearstore

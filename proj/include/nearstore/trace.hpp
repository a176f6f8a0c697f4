// Copyright (c) 2026 nearstore contributors.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <mutex>
#include <string>
#include <vector>

namespace nearstore {

enum class Phase : std::uint8_t { init, forward, backward, update };

std::string to_string(Phase p);

// One logged transfer or compute from a functional run. Transfers carry real
// byte counts; compute ops carry the work size their throughput divides.
enum class OpKind : std::uint8_t {
  host_read,     // device -> host over the shared edge (bytes)
  host_write,    // host -> device over the shared edge (bytes)
  p2p_read,      // device-internal read into the accelerator (bytes)
  p2p_write,     // accelerator -> device-internal write (bytes)
  gpu_forward,   // work = parameter elements touched
  gpu_backward,  // work = parameter elements touched
  gpu_compress,  // work = dense fp16 bytes scanned
  cpu_update,    // work = state+gradient bytes streamed through the host CPU
  accel_update,  // work = fp32 parameter bytes updated on the device
  accel_decomp,  // work = dense fp32 bytes scattered on the device
};

bool is_transfer(OpKind k);
std::string to_string(OpKind k);

struct TraceOp {
  std::uint64_t id = 0;
  OpKind kind = OpKind::host_read;
  // Devices touched: one entry for p2p/accel ops, the stripe set for striped
  // host-edge transfers, empty for host-local compute (gpu/cpu).
  std::vector<std::uint32_t> devices;
  std::uint64_t bytes = 0;  // payload bytes, or work units for compute ops
  Phase phase = Phase::update;
  std::int64_t tasklet = -1;
  bool low_priority = false;
  std::vector<std::uint64_t> deps;  // ids that must complete first
};

using Trace = std::vector<TraceOp>;

// Thread-safe append-only recorder with monotonically increasing ids.
class TraceRecorder {
 public:
  std::uint64_t append(TraceOp op) {
    std::lock_guard<std::mutex> lk(mu_);
    op.id = next_id_++;
    ops_.push_back(std::move(op));
    return ops_.back().id;
  }

  Trace take() {
    std::lock_guard<std::mutex> lk(mu_);
    Trace out = std::move(ops_);
    ops_.clear();
    return out;
  }

  std::size_t size() const {
    std::lock_guard<std::mutex> lk(mu_);
    return ops_.size();
  }

 private:
  mutable std::mutex mu_;
  std::uint64_t next_id_ = 1;
  Trace ops_;
};

}  // namespace nearstore

// Copyright (c) 2026 nearstore contributors.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nearstore/trace.hpp"

namespace nearstore {

enum class DeviceKind : std::uint8_t { ssd, csd };

std::string to_string(DeviceKind k);
DeviceKind device_kind_from_string(const std::string& s);

struct DeviceDesc {
  DeviceKind kind = DeviceKind::csd;
  double read_bw = 3.2e9;            // device port, bytes/s
  double write_bw = 3.0e9;           // device port, bytes/s
  double internal_link_bw = 3.2e9;   // accelerator <-> flash path, bytes/s
  double accel_update_bw = 7.0e9;    // fp32 parameter bytes updated per second
  double accel_decomp_bw = 3.5e9;    // dense fp32 bytes scattered per second
  std::uint64_t accel_mem_capacity = 4ull << 30;
};

// Optional shared-switch grouping: host-edge transfers touching a group's
// devices are additionally capped by the group's uplink.
struct ExpansionGroup {
  double uplink_bw = 12.8e9;
  std::vector<std::uint32_t> devices;
};

// Discrete-event calibration constants (declared, not enforced functionally).
struct SimParams {
  double per_op_latency = 50e-6;     // kernel/IO invocation overhead, seconds
  double fw_s_per_param = 1.5e-10;   // forward compute per parameter element
  double bw_s_per_param = 3.0e-10;   // backward compute per parameter element
  double cpu_update_bw = 25.6e9;     // host updater, state+grad bytes/s
  double gpu_compress_bw = 25.6e9;   // top-k selection, dense fp16 bytes/s
};

struct FabricTopology {
  double host_link_bw = 12.8e9;  // effective shared edge, bytes/s
  std::vector<DeviceDesc> devices;
  std::vector<ExpansionGroup> expansion;
  SimParams sim;

  std::size_t device_count() const { return devices.size(); }
  void validate() const;  // throws std::invalid_argument
};

FabricTopology default_topology(std::size_t n_devices,
                                DeviceKind kind = DeviceKind::csd);

struct Extent {
  std::uint64_t offset = 0;
  std::uint64_t len = 0;

  std::uint64_t end() const { return offset + len; }
};

struct DirBytes {
  std::uint64_t read = 0;
  std::uint64_t write = 0;
};

constexpr std::size_t kPhaseCount = 4;

// Monotone byte counters for one device, split by phase and edge.
struct DeviceCounts {
  std::array<DirBytes, kPhaseCount> host;      // shared host edge
  std::array<DirBytes, kPhaseCount> internal;  // device-internal p2p
  // Kept elements written as sparse index/value pairs (for the pair-based
  // volume accounting reported beside actual bytes).
  std::array<std::uint64_t, kPhaseCount> sparse_pairs{};
};

struct LedgerSnapshot {
  std::vector<DeviceCounts> devices;

  DirBytes host_phase(Phase p) const;
  DirBytes host_total() const;
  DirBytes internal_phase(Phase p) const;
  DirBytes internal_total() const;
  std::uint64_t sparse_pairs_total() const;

  // this - rhs, elementwise; rhs must have the same device count.
  LedgerSnapshot delta_since(const LedgerSnapshot& rhs) const;
};

class TrafficLedger {
 public:
  explicit TrafficLedger(std::size_t device_count);

  void add_host(std::uint32_t dev, Phase p, bool is_read, std::uint64_t bytes);
  void add_internal(std::uint32_t dev, Phase p, bool is_read,
                    std::uint64_t bytes);
  void add_sparse_pairs(std::uint32_t dev, Phase p, std::uint64_t pairs);

  LedgerSnapshot snapshot() const;

 private:
  mutable std::mutex mu_;
  LedgerSnapshot counts_;
};

struct StripePiece {
  std::uint32_t device = 0;
  Extent extent;  // device-local byte extent
};

// Round-robin striping of a logical byte extent over n devices. Pieces come
// back in logical-address order; adjacent stripes on one device coalesce.
std::vector<StripePiece> raid0_map(Extent logical, std::uint64_t stripe_size,
                                   std::size_t n_devices);

// Named byte extent inside one device's backing file.
struct ExtentRecord {
  Extent extent;
  std::string dtype = "bytes";
  std::map<std::string, std::uint64_t> meta;  // e.g. block_len/k for sparse
};

// One device's backing file plus its extent directory. The directory is
// persisted as a JSON sidecar manifest next to the backing file.
class ShardStore {
 public:
  // Creates (or truncates) the backing file unless dry is set.
  ShardStore(std::filesystem::path backing_file, std::uint64_t capacity,
             bool dry);

  // Reopens from an existing manifest + backing file.
  static std::unique_ptr<ShardStore> open_existing(
      std::filesystem::path backing_file);

  Extent allocate(const std::string& name, std::uint64_t bytes,
                  const std::string& dtype);
  const ExtentRecord& record(const std::string& name) const;
  bool has(const std::string& name) const;
  void set_meta(const std::string& name, const std::string& key,
                std::uint64_t value);

  void read(Extent e, std::span<std::byte> out);
  void write(Extent e, std::span<const std::byte> data);

  void save_manifest() const;
  std::uint64_t capacity() const { return capacity_; }
  std::uint64_t allocated() const { return cursor_; }
  bool dry() const { return dry_; }
  const std::filesystem::path& path() const { return path_; }

 private:
  ShardStore() = default;
  void check_extent(Extent e) const;

  std::filesystem::path path_;
  std::uint64_t capacity_ = 0;
  std::uint64_t cursor_ = 0;
  bool dry_ = false;
  std::map<std::string, ExtentRecord> dir_;
  mutable std::mutex io_mu_;
  mutable std::fstream file_;
};

// Transfer deps handed to the fabric for trace wiring.
using TraceDeps = std::vector<std::uint64_t>;

// The functional device layer: performs real file IO (unless dry), attributes
// every transfer to the ledger exactly once, and logs trace ops. Bandwidth is
// never enforced here; timing lives in the simulator.
class DeviceFabric {
 public:
  DeviceFabric(FabricTopology topology, std::filesystem::path dir, bool dry,
               std::uint64_t device_capacity);

  const FabricTopology& topology() const { return topo_; }
  ShardStore& store(std::uint32_t dev);
  TrafficLedger& ledger() { return ledger_; }
  const TrafficLedger& ledger() const { return ledger_; }
  TraceRecorder& recorder() { return recorder_; }

  void set_phase(Phase p);
  Phase phase() const;

  // Host-edge transfers (ledgered on the host edge).
  std::uint64_t host_read(std::uint32_t dev, Extent e, std::span<std::byte> out,
                          const TraceDeps& deps = {}, std::int64_t tasklet = -1);
  std::uint64_t host_write(std::uint32_t dev, Extent e,
                           std::span<const std::byte> data,
                           const TraceDeps& deps = {},
                           std::int64_t tasklet = -1);
  // Sparse-gradient host write: ledgers actual payload bytes plus the kept
  // pair count for the alternative accounting.
  std::uint64_t host_write_sparse(std::uint32_t dev, Extent e,
                                  std::span<const std::byte> payload,
                                  std::uint64_t pairs,
                                  const TraceDeps& deps = {});

  // Striped host-edge transfer: one logical op over a raid0 piece list; the
  // flat buffer maps to pieces in logical-address order.
  std::uint64_t host_read_striped(const std::vector<StripePiece>& pieces,
                                  std::span<std::byte> out,
                                  const TraceDeps& deps = {});
  std::uint64_t host_write_striped(const std::vector<StripePiece>& pieces,
                                   std::span<const std::byte> data,
                                   const TraceDeps& deps = {});

  // Device-internal transfers; throw UnsupportedOperation on plain SSDs.
  std::uint64_t p2p_read(std::uint32_t dev, Extent e, std::span<std::byte> out,
                         const TraceDeps& deps = {}, std::int64_t tasklet = -1,
                         bool low_priority = false);
  std::uint64_t p2p_write(std::uint32_t dev, Extent e,
                          std::span<const std::byte> data,
                          const TraceDeps& deps = {}, std::int64_t tasklet = -1,
                          bool low_priority = false);

  // Compute op logging (no ledger effect).
  std::uint64_t record_compute(OpKind kind, std::optional<std::uint32_t> dev,
                               std::uint64_t work, const TraceDeps& deps = {},
                               std::int64_t tasklet = -1);

  // Un-ledgered raw read for tests and debugging only.
  void peek(std::uint32_t dev, Extent e, std::span<std::byte> out);

 private:
  DeviceDesc& desc(std::uint32_t dev);

  FabricTopology topo_;
  std::vector<std::unique_ptr<ShardStore>> stores_;
  TrafficLedger ledger_;
  TraceRecorder recorder_;
  mutable std::mutex phase_mu_;
  Phase phase_ = Phase::update;
};

struct UnsupportedOperation : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// RAII phase attribution marker.
class PhaseScope {
 public:
  PhaseScope(DeviceFabric& f, Phase p) : f_(f), prev_(f.phase()) {
    f_.set_phase(p);
  }
  ~PhaseScope() { f_.set_phase(prev_); }
  PhaseScope(const PhaseScope&) = delete;
  PhaseScope& operator=(const PhaseScope&) = delete;

 private:
  DeviceFabric& f_;
  Phase prev_;
};

}  // namespace nearstore

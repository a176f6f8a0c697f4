// Copyright (c) 2026 nearstore contributors.
// SPDX-License-Identifier: Apache-2.0
#include "nearstore/fabric.hpp"

#include <algorithm>
#include <stdexcept>

#include "json.hpp"

namespace nearstore {

namespace {
std::size_t phase_idx(Phase p) { return static_cast<std::size_t>(p); }
}  // namespace

std::string to_string(DeviceKind k) {
  return k == DeviceKind::ssd ? "ssd" : "csd";
}

DeviceKind device_kind_from_string(const std::string& s) {
  if (s == "ssd") return DeviceKind::ssd;
  if (s == "csd") return DeviceKind::csd;
  throw std::invalid_argument("unknown device kind: " + s);
}

void FabricTopology::validate() const {
  if (devices.empty())
    throw std::invalid_argument("FabricTopology: at least one device required");
  if (!(host_link_bw > 0))
    throw std::invalid_argument("FabricTopology: host_link_bw must be > 0");
  for (const auto& d : devices) {
    if (!(d.read_bw > 0) || !(d.write_bw > 0) || !(d.internal_link_bw > 0) ||
        !(d.accel_update_bw > 0) || !(d.accel_decomp_bw > 0))
      throw std::invalid_argument("FabricTopology: device bandwidths must be > 0");
    if (d.accel_mem_capacity == 0)
      throw std::invalid_argument(
          "FabricTopology: accel_mem_capacity must be > 0");
  }
  for (const auto& g : expansion) {
    if (!(g.uplink_bw > 0))
      throw std::invalid_argument("FabricTopology: uplink_bw must be > 0");
    for (const auto dev : g.devices)
      if (dev >= devices.size())
        throw std::invalid_argument("FabricTopology: expansion device out of range");
  }
  if (!(sim.per_op_latency >= 0) || !(sim.fw_s_per_param > 0) ||
      !(sim.bw_s_per_param > 0) || !(sim.cpu_update_bw > 0) ||
      !(sim.gpu_compress_bw > 0))
    throw std::invalid_argument("FabricTopology: bad sim calibration");
}

FabricTopology default_topology(std::size_t n_devices, DeviceKind kind) {
  FabricTopology t;
  t.devices.assign(n_devices, DeviceDesc{});
  for (auto& d : t.devices) d.kind = kind;
  return t;
}

DirBytes LedgerSnapshot::host_phase(Phase p) const {
  DirBytes out;
  for (const auto& d : devices) {
    out.read += d.host[phase_idx(p)].read;
    out.write += d.host[phase_idx(p)].write;
  }
  return out;
}

DirBytes LedgerSnapshot::host_total() const {
  DirBytes out;
  for (std::size_t p = 0; p < kPhaseCount; ++p) {
    const auto ph = host_phase(static_cast<Phase>(p));
    out.read += ph.read;
    out.write += ph.write;
  }
  return out;
}

DirBytes LedgerSnapshot::internal_phase(Phase p) const {
  DirBytes out;
  for (const auto& d : devices) {
    out.read += d.internal[phase_idx(p)].read;
    out.write += d.internal[phase_idx(p)].write;
  }
  return out;
}

DirBytes LedgerSnapshot::internal_total() const {
  DirBytes out;
  for (std::size_t p = 0; p < kPhaseCount; ++p) {
    const auto ph = internal_phase(static_cast<Phase>(p));
    out.read += ph.read;
    out.write += ph.write;
  }
  return out;
}

std::uint64_t LedgerSnapshot::sparse_pairs_total() const {
  std::uint64_t out = 0;
  for (const auto& d : devices)
    for (std::size_t p = 0; p < kPhaseCount; ++p) out += d.sparse_pairs[p];
  return out;
}

LedgerSnapshot LedgerSnapshot::delta_since(const LedgerSnapshot& rhs) const {
  if (rhs.devices.size() != devices.size())
    throw std::invalid_argument("LedgerSnapshot: device count mismatch");
  LedgerSnapshot out = *this;
  for (std::size_t i = 0; i < devices.size(); ++i) {
    for (std::size_t p = 0; p < kPhaseCount; ++p) {
      out.devices[i].host[p].read -= rhs.devices[i].host[p].read;
      out.devices[i].host[p].write -= rhs.devices[i].host[p].write;
      out.devices[i].internal[p].read -= rhs.devices[i].internal[p].read;
      out.devices[i].internal[p].write -= rhs.devices[i].internal[p].write;
      out.devices[i].sparse_pairs[p] -= rhs.devices[i].sparse_pairs[p];
    }
  }
  return out;
}

TrafficLedger::TrafficLedger(std::size_t device_count) {
  counts_.devices.resize(device_count);
}

void TrafficLedger::add_host(std::uint32_t dev, Phase p, bool is_read,
                             std::uint64_t bytes) {
  std::lock_guard<std::mutex> lk(mu_);
  auto& c = counts_.devices.at(dev).host[phase_idx(p)];
  (is_read ? c.read : c.write) += bytes;
}

void TrafficLedger::add_internal(std::uint32_t dev, Phase p, bool is_read,
                                 std::uint64_t bytes) {
  std::lock_guard<std::mutex> lk(mu_);
  auto& c = counts_.devices.at(dev).internal[phase_idx(p)];
  (is_read ? c.read : c.write) += bytes;
}

void TrafficLedger::add_sparse_pairs(std::uint32_t dev, Phase p,
                                     std::uint64_t pairs) {
  std::lock_guard<std::mutex> lk(mu_);
  counts_.devices.at(dev).sparse_pairs[phase_idx(p)] += pairs;
}

LedgerSnapshot TrafficLedger::snapshot() const {
  std::lock_guard<std::mutex> lk(mu_);
  return counts_;
}

std::vector<StripePiece> raid0_map(Extent logical, std::uint64_t stripe_size,
                                   std::size_t n_devices) {
  if (stripe_size == 0)
    throw std::invalid_argument("raid0_map: stripe_size must be > 0");
  if (n_devices == 0)
    throw std::invalid_argument("raid0_map: need at least one device");
  std::vector<StripePiece> out;
  std::uint64_t a = logical.offset;
  const std::uint64_t end = logical.end();
  while (a < end) {
    const std::uint64_t stripe = a / stripe_size;
    const std::uint64_t within = a % stripe_size;
    const std::uint64_t take = std::min(stripe_size - within, end - a);
    const auto dev = static_cast<std::uint32_t>(stripe % n_devices);
    const std::uint64_t local = (stripe / n_devices) * stripe_size + within;
    if (!out.empty() && out.back().device == dev &&
        out.back().extent.end() == local) {
      out.back().extent.len += take;
    } else {
      out.push_back({dev, Extent{local, take}});
    }
    a += take;
  }
  return out;
}

ShardStore::ShardStore(std::filesystem::path backing_file,
                       std::uint64_t capacity, bool dry)
    : path_(std::move(backing_file)), capacity_(capacity), dry_(dry) {
  if (dry_) return;
  std::filesystem::create_directories(path_.parent_path());
  {
    std::ofstream touch(path_, std::ios::binary | std::ios::trunc);
    if (!touch) throw std::runtime_error("ShardStore: cannot create " +
                                         path_.string());
  }
  std::filesystem::resize_file(path_, capacity_);
  file_.open(path_, std::ios::binary | std::ios::in | std::ios::out);
  if (!file_)
    throw std::runtime_error("ShardStore: cannot open " + path_.string());
}

std::unique_ptr<ShardStore> ShardStore::open_existing(
    std::filesystem::path backing_file) {
  auto manifest_path = backing_file;
  manifest_path += ".manifest.json";
  std::ifstream in(manifest_path);
  if (!in)
    throw std::runtime_error("ShardStore: missing manifest " +
                             manifest_path.string());
  nlohmann::json j;
  in >> j;

  std::unique_ptr<ShardStore> s(new ShardStore());
  s->path_ = std::move(backing_file);
  s->capacity_ = j.at("capacity").get<std::uint64_t>();
  s->cursor_ = j.at("allocated").get<std::uint64_t>();
  s->dry_ = false;
  for (const auto& e : j.at("extents")) {
    ExtentRecord rec;
    rec.extent.offset = e.at("offset").get<std::uint64_t>();
    rec.extent.len = e.at("len").get<std::uint64_t>();
    rec.dtype = e.at("dtype").get<std::string>();
    if (e.contains("meta"))
      for (const auto& [k, v] : e.at("meta").items())
        rec.meta[k] = v.get<std::uint64_t>();
    s->dir_[e.at("name").get<std::string>()] = std::move(rec);
  }
  s->file_.open(s->path_, std::ios::binary | std::ios::in | std::ios::out);
  if (!s->file_)
    throw std::runtime_error("ShardStore: cannot open " + s->path_.string());
  return s;
}

Extent ShardStore::allocate(const std::string& name, std::uint64_t bytes,
                            const std::string& dtype) {
  if (dir_.count(name))
    throw std::invalid_argument("ShardStore: extent exists: " + name);
  if (cursor_ + bytes > capacity_)
    throw std::out_of_range("ShardStore: capacity exceeded allocating " + name);
  ExtentRecord rec;
  rec.extent = Extent{cursor_, bytes};
  rec.dtype = dtype;
  cursor_ += bytes;
  dir_[name] = rec;
  return rec.extent;
}

const ExtentRecord& ShardStore::record(const std::string& name) const {
  auto it = dir_.find(name);
  if (it == dir_.end())
    throw std::invalid_argument("ShardStore: unknown extent: " + name);
  return it->second;
}

bool ShardStore::has(const std::string& name) const { return dir_.count(name); }

void ShardStore::set_meta(const std::string& name, const std::string& key,
                          std::uint64_t value) {
  auto it = dir_.find(name);
  if (it == dir_.end())
    throw std::invalid_argument("ShardStore: unknown extent: " + name);
  it->second.meta[key] = value;
}

void ShardStore::check_extent(Extent e) const {
  if (e.end() > capacity_ || e.end() < e.offset)
    throw std::out_of_range("ShardStore: extent outside backing file");
}

void ShardStore::read(Extent e, std::span<std::byte> out) {
  check_extent(e);
  // Dry stores accept empty buffers: only extents and counters matter.
  if (out.size() != e.len && !(dry_ && out.empty()))
    throw std::invalid_argument("ShardStore: read buffer size mismatch");
  if (dry_) return;
  std::lock_guard<std::mutex> lk(io_mu_);
  file_.seekg(static_cast<std::streamoff>(e.offset));
  file_.read(reinterpret_cast<char*>(out.data()),
             static_cast<std::streamsize>(e.len));
  if (!file_) throw std::runtime_error("ShardStore: read failed");
}

void ShardStore::write(Extent e, std::span<const std::byte> data) {
  check_extent(e);
  if (data.size() != e.len && !(dry_ && data.empty()))
    throw std::invalid_argument("ShardStore: write buffer size mismatch");
  if (dry_) return;
  std::lock_guard<std::mutex> lk(io_mu_);
  file_.seekp(static_cast<std::streamoff>(e.offset));
  file_.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(e.len));
  file_.flush();
  if (!file_) throw std::runtime_error("ShardStore: write failed");
}

void ShardStore::save_manifest() const {
  if (dry_) return;
  nlohmann::json j;
  j["capacity"] = capacity_;
  j["allocated"] = cursor_;
  j["extents"] = nlohmann::json::array();
  for (const auto& [name, rec] : dir_) {
    nlohmann::json e;
    e["name"] = name;
    e["offset"] = rec.extent.offset;
    e["len"] = rec.extent.len;
    e["dtype"] = rec.dtype;
    if (!rec.meta.empty()) {
      nlohmann::json m;
      for (const auto& [k, v] : rec.meta) m[k] = v;
      e["meta"] = m;
    }
    j["extents"].push_back(std::move(e));
  }
  auto manifest_path = path_;
  manifest_path += ".manifest.json";
  std::ofstream out(manifest_path);
  out << j.dump(2) << "\n";
}

DeviceFabric::DeviceFabric(FabricTopology topology, std::filesystem::path dir,
                           bool dry, std::uint64_t device_capacity)
    : topo_(std::move(topology)), ledger_(topo_.device_count()) {
  topo_.validate();
  if (!dry) std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < topo_.device_count(); ++i) {
    auto file = dir / ("dev" + std::to_string(i) + ".bin");
    stores_.push_back(
        std::make_unique<ShardStore>(std::move(file), device_capacity, dry));
  }
}

ShardStore& DeviceFabric::store(std::uint32_t dev) {
  if (dev >= stores_.size())
    throw std::invalid_argument("DeviceFabric: device index out of range");
  return *stores_[dev];
}

DeviceDesc& DeviceFabric::desc(std::uint32_t dev) {
  if (dev >= topo_.devices.size())
    throw std::invalid_argument("DeviceFabric: device index out of range");
  return topo_.devices[dev];
}

void DeviceFabric::set_phase(Phase p) {
  std::lock_guard<std::mutex> lk(phase_mu_);
  phase_ = p;
}

Phase DeviceFabric::phase() const {
  std::lock_guard<std::mutex> lk(phase_mu_);
  return phase_;
}

std::uint64_t DeviceFabric::host_read(std::uint32_t dev, Extent e,
                                      std::span<std::byte> out,
                                      const TraceDeps& deps,
                                      std::int64_t tasklet) {
  const Phase p = phase();
  store(dev).read(e, out);
  ledger_.add_host(dev, p, /*is_read=*/true, e.len);
  return recorder_.append(
      {0, OpKind::host_read, {dev}, e.len, p, tasklet, false, deps});
}

std::uint64_t DeviceFabric::host_write(std::uint32_t dev, Extent e,
                                       std::span<const std::byte> data,
                                       const TraceDeps& deps,
                                       std::int64_t tasklet) {
  const Phase p = phase();
  store(dev).write(e, data);
  ledger_.add_host(dev, p, /*is_read=*/false, e.len);
  return recorder_.append(
      {0, OpKind::host_write, {dev}, e.len, p, tasklet, false, deps});
}

std::uint64_t DeviceFabric::host_write_sparse(std::uint32_t dev, Extent e,
                                              std::span<const std::byte> payload,
                                              std::uint64_t pairs,
                                              const TraceDeps& deps) {
  const std::uint64_t id = host_write(dev, e, payload, deps);
  ledger_.add_sparse_pairs(dev, phase(), pairs);
  return id;
}

std::uint64_t DeviceFabric::host_read_striped(
    const std::vector<StripePiece>& pieces, std::span<std::byte> out,
    const TraceDeps& deps) {
  const Phase p = phase();
  std::uint64_t total = 0;
  std::vector<std::uint32_t> devs;
  for (const auto& piece : pieces) {
    const auto chunk = out.empty()
                           ? std::span<std::byte>{}
                           : out.subspan(total, piece.extent.len);
    store(piece.device).read(piece.extent, chunk);
    ledger_.add_host(piece.device, p, /*is_read=*/true, piece.extent.len);
    total += piece.extent.len;
    if (std::find(devs.begin(), devs.end(), piece.device) == devs.end())
      devs.push_back(piece.device);
  }
  if (total != out.size() && !out.empty())
    throw std::invalid_argument("host_read_striped: buffer size mismatch");
  return recorder_.append(
      {0, OpKind::host_read, std::move(devs), total, p, -1, false, deps});
}

std::uint64_t DeviceFabric::host_write_striped(
    const std::vector<StripePiece>& pieces, std::span<const std::byte> data,
    const TraceDeps& deps) {
  const Phase p = phase();
  std::uint64_t total = 0;
  std::vector<std::uint32_t> devs;
  for (const auto& piece : pieces) {
    const auto chunk = data.empty()
                           ? std::span<const std::byte>{}
                           : data.subspan(total, piece.extent.len);
    store(piece.device).write(piece.extent, chunk);
    ledger_.add_host(piece.device, p, /*is_read=*/false, piece.extent.len);
    total += piece.extent.len;
    if (std::find(devs.begin(), devs.end(), piece.device) == devs.end())
      devs.push_back(piece.device);
  }
  if (total != data.size() && !data.empty())
    throw std::invalid_argument("host_write_striped: buffer size mismatch");
  return recorder_.append(
      {0, OpKind::host_write, std::move(devs), total, p, -1, false, deps});
}

std::uint64_t DeviceFabric::p2p_read(std::uint32_t dev, Extent e,
                                     std::span<std::byte> out,
                                     const TraceDeps& deps,
                                     std::int64_t tasklet, bool low_priority) {
  if (desc(dev).kind != DeviceKind::csd)
    throw UnsupportedOperation("p2p_read: device " + std::to_string(dev) +
                               " has no internal accelerator path");
  const Phase p = phase();
  store(dev).read(e, out);
  ledger_.add_internal(dev, p, /*is_read=*/true, e.len);
  return recorder_.append(
      {0, OpKind::p2p_read, {dev}, e.len, p, tasklet, low_priority, deps});
}

std::uint64_t DeviceFabric::p2p_write(std::uint32_t dev, Extent e,
                                      std::span<const std::byte> data,
                                      const TraceDeps& deps,
                                      std::int64_t tasklet, bool low_priority) {
  if (desc(dev).kind != DeviceKind::csd)
    throw UnsupportedOperation("p2p_write: device " + std::to_string(dev) +
                               " has no internal accelerator path");
  const Phase p = phase();
  store(dev).write(e, data);
  ledger_.add_internal(dev, p, /*is_read=*/false, e.len);
  return recorder_.append(
      {0, OpKind::p2p_write, {dev}, e.len, p, tasklet, low_priority, deps});
}

std::uint64_t DeviceFabric::record_compute(OpKind kind,
                                           std::optional<std::uint32_t> dev,
                                           std::uint64_t work,
                                           const TraceDeps& deps,
                                           std::int64_t tasklet) {
  if (is_transfer(kind))
    throw std::invalid_argument("record_compute: expects a compute kind");
  std::vector<std::uint32_t> devs;
  if (dev) devs.push_back(*dev);
  return recorder_.append(
      {0, kind, std::move(devs), work, phase(), tasklet, false, deps});
}

void DeviceFabric::peek(std::uint32_t dev, Extent e, std::span<std::byte> out) {
  store(dev).read(e, out);
}

}  // namespace nearstore

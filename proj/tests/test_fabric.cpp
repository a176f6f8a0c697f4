// Copyright (c) 2026 nearstore contributors.
// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <vector>

#include "nearstore/fabric.hpp"
#include "nearstore/model.hpp"

using namespace nearstore;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path p;
  explicit TempDir(const char* tag)
      : p(fs::temp_directory_path() / (std::string("nearstore_fabric_") + tag)) {
    fs::remove_all(p);
    fs::create_directories(p);
  }
  ~TempDir() { fs::remove_all(p); }
};

std::vector<std::byte> pattern_bytes(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::byte> out(n);
  for (auto& b : out) b = static_cast<std::byte>(rng.next_u64() & 0xFF);
  return out;
}

}  // namespace

TEST_CASE("round-robin striping examples") {
  {
    const auto pieces = raid0_map(Extent{0, 16}, 4, 2);
    REQUIRE(pieces.size() == 4);
    CHECK(pieces[0].device == 0);
    CHECK(pieces[0].extent.offset == 0);
    CHECK(pieces[0].extent.len == 4);
    CHECK(pieces[1].device == 1);
    CHECK(pieces[1].extent.offset == 0);
    CHECK(pieces[2].device == 0);
    CHECK(pieces[2].extent.offset == 4);
    CHECK(pieces[3].device == 1);
    CHECK(pieces[3].extent.offset == 4);
  }
  {
    // Single device: every stripe is adjacent, so the map coalesces to one
    // piece equal to the logical extent.
    const auto pieces = raid0_map(Extent{0, 16}, 4, 1);
    REQUIRE(pieces.size() == 1);
    CHECK(pieces[0].device == 0);
    CHECK(pieces[0].extent.offset == 0);
    CHECK(pieces[0].extent.len == 16);
  }
  {
    // Unaligned head and short tail.
    const auto pieces = raid0_map(Extent{6, 7}, 4, 2);
    REQUIRE(pieces.size() == 3);
    CHECK(pieces[0].device == 1);
    CHECK(pieces[0].extent.offset == 2);
    CHECK(pieces[0].extent.len == 2);
    CHECK(pieces[1].device == 0);
    CHECK(pieces[1].extent.offset == 4);
    CHECK(pieces[1].extent.len == 4);
    CHECK(pieces[2].device == 1);
    CHECK(pieces[2].extent.offset == 4);
    CHECK(pieces[2].extent.len == 1);
  }
  CHECK_THROWS_AS(raid0_map(Extent{0, 8}, 0, 2), std::invalid_argument);
  CHECK_THROWS_AS(raid0_map(Extent{0, 8}, 4, 0), std::invalid_argument);
}

TEST_CASE("striping covers every logical byte exactly once") {
  Rng rng(77);
  for (int trial = 0; trial < 60; ++trial) {
    const std::uint64_t stripe = 1 + rng.next_u64() % 16;
    const std::size_t n = 1 + rng.next_u64() % 5;
    const Extent logical{rng.next_u64() % 64, 1 + rng.next_u64() % 256};
    const auto pieces = raid0_map(logical, stripe, n);

    std::uint64_t covered = 0;
    std::uint64_t logical_addr = logical.offset;
    for (const auto& piece : pieces) {
      CHECK(piece.device < n);
      for (std::uint64_t j = 0; j < piece.extent.len; ++j) {
        const std::uint64_t s = logical_addr / stripe;
        CHECK(piece.device == s % n);
        CHECK(piece.extent.offset + j ==
              (s / n) * stripe + logical_addr % stripe);
        ++logical_addr;
      }
      covered += piece.extent.len;
    }
    CHECK(covered == logical.len);
  }
}

TEST_CASE("ledger accumulates per device, phase and direction") {
  TrafficLedger ledger(2);
  ledger.add_host(0, Phase::update, true, 100);
  ledger.add_host(0, Phase::update, true, 50);
  ledger.add_host(1, Phase::backward, false, 7);
  ledger.add_internal(1, Phase::update, false, 9);
  ledger.add_sparse_pairs(1, Phase::backward, 3);

  const auto snap = ledger.snapshot();
  CHECK(snap.host_phase(Phase::update).read == 150);
  CHECK(snap.host_phase(Phase::update).write == 0);
  CHECK(snap.host_phase(Phase::backward).write == 7);
  CHECK(snap.internal_total().write == 9);
  CHECK(snap.internal_total().read == 0);
  CHECK(snap.sparse_pairs_total() == 3);

  // Totals conserve the per-phase split.
  std::uint64_t read_sum = 0;
  for (int p = 0; p < 4; ++p)
    read_sum += snap.host_phase(static_cast<Phase>(p)).read;
  CHECK(read_sum == snap.host_total().read);

  ledger.add_host(0, Phase::update, true, 25);
  const auto after = ledger.snapshot().delta_since(snap);
  CHECK(after.host_total().read == 25);
  CHECK(after.host_total().write == 0);
  CHECK(after.sparse_pairs_total() == 0);

  TrafficLedger three(3);
  CHECK_THROWS_AS(three.snapshot().delta_since(snap), std::invalid_argument);
}

TEST_CASE("shard store persists extents and bytes across reopen") {
  TempDir tmp("persist");
  const fs::path file = tmp.p / "dev0.bin";
  const auto data = pattern_bytes(512, 99);
  Extent e;
  {
    ShardStore store(file, 4096, false);
    e = store.allocate("weights", 512, "f32");
    store.set_meta("weights", "block_len", 128);
    store.write(e, data);
    CHECK(store.allocated() == 512);
    store.save_manifest();
  }
  auto re = ShardStore::open_existing(file);
  CHECK(re->capacity() == 4096);
  CHECK(re->allocated() == 512);
  REQUIRE(re->has("weights"));
  const auto& rec = re->record("weights");
  CHECK(rec.extent.offset == e.offset);
  CHECK(rec.extent.len == 512);
  CHECK(rec.dtype == "f32");
  CHECK(rec.meta.at("block_len") == 128);
  std::vector<std::byte> back(512);
  re->read(rec.extent, back);
  CHECK(back == data);

  // Allocation picks up after the persisted cursor.
  const Extent more = re->allocate("tail", 100, "bytes");
  CHECK(more.offset == 512);
}

TEST_CASE("shard store rejects bad names, capacity and extents") {
  TempDir tmp("errors");
  ShardStore store(tmp.p / "dev0.bin", 256, false);
  store.allocate("a", 128, "bytes");
  CHECK_THROWS_AS(store.allocate("a", 1, "bytes"), std::invalid_argument);
  CHECK_THROWS_AS(store.allocate("b", 129, "bytes"), std::out_of_range);
  CHECK_THROWS_AS(store.record("missing"), std::invalid_argument);
  CHECK_THROWS_AS(store.set_meta("missing", "k", 1), std::invalid_argument);

  std::vector<std::byte> buf(16);
  CHECK_THROWS_AS(store.read(Extent{250, 16}, buf), std::out_of_range);
  CHECK_THROWS_AS(store.write(Extent{250, 16}, buf), std::out_of_range);
  CHECK_THROWS_AS(store.read(Extent{0, 8}, buf), std::invalid_argument);
  CHECK_THROWS_AS(store.write(Extent{0, 8}, buf), std::invalid_argument);
  CHECK_THROWS_AS(ShardStore::open_existing(tmp.p / "nope.bin"),
                  std::runtime_error);
}

TEST_CASE("dry stores move no bytes but keep the directory") {
  TempDir tmp("dry");
  const fs::path file = tmp.p / "devdry.bin";
  ShardStore store(file, 1 << 20, true);
  CHECK_FALSE(fs::exists(file));
  const Extent e = store.allocate("x", 4096, "f16");
  // Empty spans stand in for payloads in dry mode.
  store.write(e, {});
  std::vector<std::byte> buf;
  store.read(e, buf);
  // Sized buffers still must match the extent.
  std::vector<std::byte> bad(17);
  CHECK_THROWS_AS(store.write(Extent{0, 16}, bad), std::invalid_argument);
  store.save_manifest();
  CHECK_FALSE(fs::exists(fs::path(file.string() + ".manifest.json")));
}

TEST_CASE("fabric transfers hit the ledger once and log trace ops") {
  TempDir tmp("fabric");
  DeviceFabric fab(default_topology(2), tmp.p, false, 1 << 16);
  auto& s0 = fab.store(0);
  const Extent e = s0.allocate("buf", 256, "bytes");
  const auto data = pattern_bytes(256, 5);

  fab.set_phase(Phase::backward);
  const auto wid = fab.host_write(0, e, data);
  std::vector<std::byte> back(256);
  fab.set_phase(Phase::update);
  const auto rid = fab.host_read(0, e, back, {wid});
  CHECK(back == data);

  const auto snap = fab.ledger().snapshot();
  CHECK(snap.host_phase(Phase::backward).write == 256);
  CHECK(snap.host_phase(Phase::update).read == 256);
  CHECK(snap.host_total().read == 256);
  CHECK(snap.internal_total().read == 0);

  // peek is un-ledgered.
  std::vector<std::byte> peeked(256);
  fab.peek(0, e, peeked);
  CHECK(peeked == data);
  CHECK(fab.ledger().snapshot().host_total().read == 256);

  const Trace trace = fab.recorder().take();
  REQUIRE(trace.size() == 2);
  CHECK(trace[0].id == wid);
  CHECK(trace[0].kind == OpKind::host_write);
  CHECK(trace[0].devices == std::vector<std::uint32_t>{0});
  CHECK(trace[0].bytes == 256);
  CHECK(trace[0].phase == Phase::backward);
  CHECK(trace[1].id == rid);
  CHECK(trace[1].deps == std::vector<std::uint64_t>{wid});
  CHECK(rid > wid);
}

TEST_CASE("internal transfers need an accelerator-capable device") {
  TempDir tmp("ssd");
  DeviceFabric fab(default_topology(1, DeviceKind::ssd), tmp.p, false, 4096);
  const Extent e = fab.store(0).allocate("x", 64, "bytes");
  const auto data = pattern_bytes(64, 1);
  std::vector<std::byte> buf(64);
  CHECK_THROWS_AS(fab.p2p_write(0, e, data), UnsupportedOperation);
  CHECK_THROWS_AS(fab.p2p_read(0, e, buf), UnsupportedOperation);

  TempDir tmp2("csd");
  DeviceFabric csd(default_topology(1), tmp2.p, false, 4096);
  const Extent e2 = csd.store(0).allocate("x", 64, "bytes");
  csd.p2p_write(0, e2, data, {}, 3, true);
  csd.p2p_read(0, e2, buf, {}, 3);
  CHECK(buf == data);
  const auto snap = csd.ledger().snapshot();
  CHECK(snap.internal_total().write == 64);
  CHECK(snap.internal_total().read == 64);
  CHECK(snap.host_total().read == 0);
  const Trace trace = csd.recorder().take();
  REQUIRE(trace.size() == 2);
  CHECK(trace[0].low_priority);
  CHECK_FALSE(trace[1].low_priority);
  CHECK(trace[0].tasklet == 3);
}

TEST_CASE("striped transfers reassemble and attribute per piece") {
  TempDir tmp("striped");
  DeviceFabric fab(default_topology(2), tmp.p, false, 1 << 16);
  for (std::uint32_t d = 0; d < 2; ++d) fab.store(d).allocate("v", 512, "bytes");

  const auto pieces = raid0_map(Extent{0, 1000}, 64, 2);
  const auto data = pattern_bytes(1000, 8);
  fab.set_phase(Phase::init);
  const auto wid = fab.host_write_striped(pieces, data);
  std::vector<std::byte> back(1000);
  fab.host_read_striped(pieces, back, {wid});
  CHECK(back == data);

  const auto snap = fab.ledger().snapshot();
  CHECK(snap.host_phase(Phase::init).write == 1000);
  CHECK(snap.host_phase(Phase::init).read == 1000);
  // 1000 bytes over 64-byte stripes: device 0 holds stripes 0,2,..,14 plus
  // the 40-byte tail of stripe 15 lands on device 1.
  CHECK(snap.devices[0].host[0].write == 512);
  CHECK(snap.devices[1].host[0].write == 488);

  const Trace trace = fab.recorder().take();
  REQUIRE(trace.size() == 2);
  CHECK(trace[0].bytes == 1000);
  CHECK(trace[0].devices == std::vector<std::uint32_t>{0, 1});
  CHECK(trace[1].deps == std::vector<std::uint64_t>{wid});
}

TEST_CASE("sparse writes ledger payload bytes plus kept pairs") {
  TempDir tmp("sparse");
  DeviceFabric fab(default_topology(1), tmp.p, false, 4096);
  const Extent e = fab.store(0).allocate("sg", 60, "sparse_f16");
  const auto payload = pattern_bytes(60, 4);  // 10 pairs * 6 bytes
  fab.set_phase(Phase::backward);
  fab.host_write_sparse(0, e, payload, 10);
  const auto snap = fab.ledger().snapshot();
  CHECK(snap.host_phase(Phase::backward).write == 60);
  CHECK(snap.sparse_pairs_total() == 10);
  CHECK(snap.devices[0].sparse_pairs[static_cast<std::size_t>(
            Phase::backward)] == 10);
}

TEST_CASE("compute records carry work units and reject transfer kinds") {
  TempDir tmp("compute");
  DeviceFabric fab(default_topology(1), tmp.p, true, 4096);
  const auto a = fab.record_compute(OpKind::gpu_forward, std::nullopt, 1234);
  const auto b = fab.record_compute(OpKind::accel_update, 0, 64, {a}, 2);
  CHECK_THROWS_AS(fab.record_compute(OpKind::host_read, 0, 1),
                  std::invalid_argument);
  const Trace trace = fab.recorder().take();
  REQUIRE(trace.size() == 2);
  CHECK(trace[0].devices.empty());
  CHECK(trace[0].bytes == 1234);
  CHECK(trace[1].devices == std::vector<std::uint32_t>{0});
  CHECK(trace[1].deps == std::vector<std::uint64_t>{a});
  CHECK(trace[1].tasklet == 2);
  CHECK(b > a);
}

TEST_CASE("dry fabric counts traffic without touching disk") {
  TempDir tmp("dryfab");
  fs::remove_all(tmp.p);  // fabric must not recreate it in dry mode
  DeviceFabric fab(default_topology(2), tmp.p, true, 1 << 20);
  const Extent e = fab.store(0).allocate("x", 4096, "f32");
  fab.set_phase(Phase::update);
  fab.host_write(0, e, {});
  fab.host_read(0, e, {});
  CHECK_FALSE(fs::exists(tmp.p));
  const auto snap = fab.ledger().snapshot();
  CHECK(snap.host_phase(Phase::update).write == 4096);
  CHECK(snap.host_phase(Phase::update).read == 4096);
  CHECK(fab.recorder().size() == 2);
}

TEST_CASE("phase scope restores the previous attribution") {
  TempDir tmp("scope");
  DeviceFabric fab(default_topology(1), tmp.p, true, 4096);
  fab.set_phase(Phase::forward);
  {
    PhaseScope scope(fab, Phase::update);
    CHECK(fab.phase() == Phase::update);
    {
      PhaseScope inner(fab, Phase::backward);
      CHECK(fab.phase() == Phase::backward);
    }
    CHECK(fab.phase() == Phase::update);
  }
  CHECK(fab.phase() == Phase::forward);
}

TEST_CASE("topology validation rejects bad shapes") {
  CHECK_THROWS_AS(default_topology(0).validate(), std::invalid_argument);
  auto t = default_topology(2);
  t.host_link_bw = 0;
  CHECK_THROWS_AS(t.validate(), std::invalid_argument);
  t = default_topology(2);
  t.devices[1].read_bw = -1;
  CHECK_THROWS_AS(t.validate(), std::invalid_argument);
  t = default_topology(2);
  t.expansion.push_back(ExpansionGroup{1e9, {5}});
  CHECK_THROWS_AS(t.validate(), std::invalid_argument);
  t = default_topology(2);
  t.expansion.push_back(ExpansionGroup{1e9, {0, 1}});
  t.validate();
  CHECK(to_string(DeviceKind::ssd) == "ssd");
  CHECK(device_kind_from_string("csd") == DeviceKind::csd);
  CHECK_THROWS_AS(device_kind_from_string("tape"), std::invalid_argument);
}

// Copyright (c) 2026 nearstore contributors.
// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <string>
#include <vector>

#include "nearstore/compression.hpp"
#include "nearstore/engine.hpp"

using namespace nearstore;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path p;
  explicit TempDir(const char* tag)
      : p(fs::temp_directory_path() / (std::string("nearstore_engine_") + tag)) {
    fs::remove_all(p);
    fs::create_directories(p);
  }
  ~TempDir() { fs::remove_all(p); }
};

EngineConfig small_config(Mode mode, const fs::path& dir,
                          OptimizerKind kind = OptimizerKind::adam) {
  EngineConfig cfg;
  cfg.mode = mode;
  cfg.optimizer.kind = kind;
  cfg.optimizer.lr = 0.01f;
  cfg.optimizer.momentum_coef = 0.9f;
  cfg.model = MlpSpec{15, 16};  // 256 parameters
  cfg.batch_size = 8;
  cfg.noise_sigma = 0.05;
  cfg.seed = 7;
  cfg.devices = 2;
  cfg.deterministic = true;
  cfg.data_dir = dir;
  return cfg;
}

bool same_halves(std::span<const half> a, std::span<const half> b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].bits != b[i].bits) return false;
  return true;
}

bool same_op(const TraceOp& a, const TraceOp& b) {
  return a.id == b.id && a.kind == b.kind && a.devices == b.devices &&
         a.bytes == b.bytes && a.phase == b.phase && a.tasklet == b.tasklet &&
         a.low_priority == b.low_priority && a.deps == b.deps;
}

// Kept-pair oracle: every update subgroup intersected with every layer block
// contributes an independently rounded top-k count.
std::uint64_t expected_pairs(const Engine& e, double pct) {
  const auto blocks = e.config().model.blocks();
  std::uint64_t pairs = 0;
  for (std::uint32_t d = 0; d < e.config().device_count(); ++d) {
    const FlatSegment seg = e.partition().segments[d];
    for (const Tasklet& t : e.plan(d)) {
      const std::size_t lo = seg.offset + t.elem_offset;
      const std::size_t hi = lo + t.elem_count;
      for (const auto& b : blocks) {
        const std::size_t s = std::max(lo, b.offset);
        const std::size_t en = std::min(hi, b.end());
        if (en > s) pairs += topk_count_for_ratio(en - s, pct);
      }
    }
  }
  return pairs;
}

}  // namespace

TEST_CASE("parameters split into balanced contiguous segments") {
  const auto p = partition_parameters(10, 3);
  REQUIRE(p.segments.size() == 3);
  CHECK(p.segments[0].offset == 0);
  CHECK(p.segments[0].len == 4);
  CHECK(p.segments[1].offset == 4);
  CHECK(p.segments[1].len == 3);
  CHECK(p.segments[2].offset == 7);
  CHECK(p.segments[2].len == 3);

  // Coverage and balance for arbitrary shapes; a pure function of (n, d).
  for (const std::size_t n : {1ul, 7ul, 256ul, 4097ul}) {
    for (const std::size_t d : {1ul, 2ul, 3ul, 10ul}) {
      const auto a = partition_parameters(n, d);
      const auto b = partition_parameters(n, d);
      REQUIRE(a.segments.size() == d);
      std::size_t off = 0, mn = n, mx = 0;
      for (std::size_t i = 0; i < d; ++i) {
        CHECK(a.segments[i].offset == off);
        CHECK(a.segments[i].offset == b.segments[i].offset);
        CHECK(a.segments[i].len == b.segments[i].len);
        off += a.segments[i].len;
        mn = std::min(mn, a.segments[i].len);
        mx = std::max(mx, a.segments[i].len);
      }
      CHECK(off == n);
      CHECK(mx - mn <= 1);
    }
  }
  // The split depends only on the flat count, not the layer shapes:
  // 16x(15+1) and 8x(31+1) both flatten to 256 parameters.
  REQUIRE(MlpSpec{15, 16}.param_count() == MlpSpec{31, 8}.param_count());
  const auto wide = partition_parameters(MlpSpec{15, 16}.param_count(), 3);
  const auto tall = partition_parameters(MlpSpec{31, 8}.param_count(), 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(wide.segments[i].offset == tall.segments[i].offset);
    CHECK(wide.segments[i].len == tall.segments[i].len);
  }
  CHECK_THROWS_AS(partition_parameters(4, 0), std::invalid_argument);
}

TEST_CASE("mode names round-trip") {
  for (const Mode m :
       {Mode::mem, Mode::base, Mode::su, Mode::su_o, Mode::su_o_c}) {
    CHECK(mode_from_string(to_string(m)) == m);
  }
  CHECK_THROWS_AS(mode_from_string("turbo"), std::invalid_argument);
}

TEST_CASE("config validation pins the mode-dependent knobs") {
  TempDir tmp("cfg");
  auto cfg = small_config(Mode::su_o_c, tmp.p);
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);  // pct missing
  cfg.compression_pct = 301.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.compression_pct = 10.0;
  cfg.validate();

  auto base = small_config(Mode::base, tmp.p);
  base.compression_pct = 10.0;
  CHECK_THROWS_AS(base.validate(), std::invalid_argument);
  base.compression_pct = 0.0;
  base.error_feedback = true;
  CHECK_THROWS_AS(base.validate(), std::invalid_argument);
  base.error_feedback = false;
  base.validate();

  auto su = small_config(Mode::su, tmp.p);
  su.topology = default_topology(2, DeviceKind::ssd);
  CHECK_THROWS_AS(su.validate(), std::invalid_argument);  // needs csd
  su.topology = default_topology(2, DeviceKind::csd);
  su.validate();

  auto bad = small_config(Mode::mem, tmp.p);
  bad.model = MlpSpec{0, 4};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = small_config(Mode::mem, tmp.p);
  bad.max_grad_norm = 0.0f;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = small_config(Mode::mem, tmp.p);
  bad.scaler.scale = 0.0f;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = small_config(Mode::mem, tmp.p);
  bad.devices = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = small_config(Mode::base, tmp.p);
  bad.stripe_size = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("storage-backed modes reproduce the in-memory reference bitwise") {
  TempDir tmp("equiv");
  for (const OptimizerKind kind :
       {OptimizerKind::adam, OptimizerKind::sgd_momentum,
        OptimizerKind::adagrad}) {
    Engine ref(small_config(Mode::mem, tmp.p / "mem", kind));
    const auto ref_reports = ref.run(5);
    const auto ref_master = ref.read_master();

    int tag = 0;
    for (const Mode mode : {Mode::base, Mode::su, Mode::su_o}) {
      Engine eng(small_config(
          mode, tmp.p / (to_string(mode) + std::to_string(tag++)), kind));
      const auto reports = eng.run(5);
      for (std::size_t i = 0; i < 5; ++i) {
        CHECK(reports[i].loss == ref_reports[i].loss);
        CHECK(reports[i].grad_sq_norm == ref_reports[i].grad_sq_norm);
        CHECK_FALSE(reports[i].skipped);
      }
      CHECK(same_halves(eng.params16(), ref.params16()));
      CHECK(eng.read_master() == ref_master);
      if (kind != OptimizerKind::adagrad)
        CHECK(eng.read_state(Var::momentum) == ref.read_state(Var::momentum));
      if (kind != OptimizerKind::sgd_momentum)
        CHECK(eng.read_state(Var::variance) == ref.read_state(Var::variance));
      CHECK(eng.eval_loss() == ref.eval_loss());
    }
  }
}

TEST_CASE("keeping every pair makes compression a bitwise no-op") {
  TempDir tmp("lossless");
  auto su_cfg = small_config(Mode::su, tmp.p / "su");
  su_cfg.scaler.scale = 1.0f;  // unit scale: the fp16 wire round-trips exactly
  Engine su(su_cfg);
  su.run(5);

  auto c_cfg = small_config(Mode::su_o_c, tmp.p / "c");
  c_cfg.scaler.scale = 1.0f;
  c_cfg.compression_pct = 300.0;
  Engine comp(c_cfg);
  comp.run(5);

  CHECK(same_halves(comp.params16(), su.params16()));
  CHECK(comp.read_master() == su.read_master());
  CHECK(comp.read_state(Var::momentum) == su.read_state(Var::momentum));

  // Error feedback has nothing to carry when nothing is dropped.
  auto ef_cfg = c_cfg;
  ef_cfg.data_dir = tmp.p / "ef";
  ef_cfg.error_feedback = true;
  Engine ef(ef_cfg);
  ef.run(5);
  CHECK(same_halves(ef.params16(), comp.params16()));
}

TEST_CASE("error feedback re-injects dropped coordinates") {
  TempDir tmp("ef2");
  auto cfg = small_config(Mode::su_o_c, tmp.p / "off");
  cfg.compression_pct = 2.0;
  Engine plain(cfg);
  plain.run(4);

  cfg.data_dir = tmp.p / "on";
  cfg.error_feedback = true;
  Engine fed(cfg);
  fed.run(4);
  CHECK_FALSE(same_halves(fed.params16(), plain.params16()));
}

TEST_CASE("per-iteration traffic follows the volume model") {
  // 4096 parameters: M = 2N fp16 gradient bytes = 8192.
  const MlpSpec model{63, 64};
  const std::uint64_t N = model.param_count();
  const std::uint64_t M = 2 * N;
  TempDir tmp("traffic");

  auto tune = [&](EngineConfig cfg, const char* sub) {
    cfg.model = model;
    cfg.batch_size = 4;
    cfg.stripe_size = 4096;       // several stripes per region
    cfg.chunk_bytes = 8192;       // two update chunks
    cfg.subgroup_budget = 16384;  // several tasklets per device
    cfg.data_dir = tmp.p / sub;
    return cfg;
  };

  SUBCASE("host-update baseline moves eight gradient volumes each way") {
    Engine eng(tune(small_config(Mode::base, tmp.p), "base"));
    eng.take_trace();
    for (int s = 0; s < 3; ++s) {
      const auto rep = eng.train_step();
      REQUIRE_FALSE(rep.skipped);
      CHECK(rep.delta.host_total().read == 8 * M);
      CHECK(rep.delta.host_total().write == 8 * M);
      CHECK(rep.delta.host_phase(Phase::backward).write == 2 * M);
      CHECK(rep.delta.host_phase(Phase::update).read == 8 * M);
      CHECK(rep.delta.host_phase(Phase::update).write == 6 * M);
      CHECK(rep.delta.internal_total().read == 0);
      CHECK(rep.delta.internal_total().write == 0);
      CHECK(rep.activation_bytes == 4 * 64 * sizeof(float));
    }
  }

  SUBCASE("device-side update cuts the host edge to one volume each way") {
    for (const Mode mode : {Mode::su, Mode::su_o}) {
      Engine eng(tune(small_config(mode, tmp.p), to_string(mode).c_str()));
      for (int s = 0; s < 3; ++s) {
        const auto rep = eng.train_step();
        REQUIRE_FALSE(rep.skipped);
        CHECK(rep.delta.host_phase(Phase::backward).write == 2 * M);
        CHECK(rep.delta.host_phase(Phase::update).read == 2 * M);
        CHECK(rep.delta.host_total().read == 2 * M);
        CHECK(rep.delta.host_total().write == 2 * M);
        CHECK(rep.delta.internal_total().read == 8 * M);
        CHECK(rep.delta.internal_total().write == 8 * M);
        CHECK(rep.sparse_pairs == 0);
      }
    }
  }

  SUBCASE("compression shrinks the gradient offload to six bytes per pair") {
    auto cfg = tune(small_config(Mode::su_o_c, tmp.p), "comp");
    cfg.compression_pct = 2.0;
    Engine eng(cfg);
    const std::uint64_t pairs = expected_pairs(eng, 2.0);
    CHECK(pairs > 0);
    for (int s = 0; s < 3; ++s) {
      const auto rep = eng.train_step();
      REQUIRE_FALSE(rep.skipped);
      CHECK(rep.sparse_pairs == pairs);
      CHECK(rep.sparse_payload_bytes == 6 * pairs);
      CHECK(rep.delta.host_phase(Phase::backward).write == 6 * pairs);
      CHECK(rep.delta.host_phase(Phase::update).read == 2 * M);
      CHECK(rep.delta.internal_total().write == 8 * M);
      CHECK(rep.delta.internal_total().read == 6 * M + 6 * pairs);
      // Far below the dense offload.
      CHECK(rep.sparse_payload_bytes < 2 * M / 10);
    }
  }
}

TEST_CASE("an overflowing gradient skips the step and halves the scale") {
  TempDir tmp("overflow");
  for (const Mode mode : {Mode::mem, Mode::su_o}) {
    auto cfg = small_config(mode, tmp.p / to_string(mode));
    Engine eng(cfg);
    eng.run(2);
    const std::vector<half> p_before(eng.params16().begin(),
                                     eng.params16().end());
    const auto master_before = eng.read_master();
    const auto steps_before = eng.applied_steps();
    const float scale_before = eng.loss_scale();

    eng.inject_overflow_once();
    const auto rep = eng.train_step();
    CHECK(rep.skipped);
    CHECK(rep.loss_scale_after == scale_before * 0.5f);
    CHECK(eng.loss_scale() == scale_before * 0.5f);
    CHECK(eng.applied_steps() == steps_before);
    CHECK(same_halves(eng.params16(), p_before));
    CHECK(eng.read_master() == master_before);

    const auto next = eng.train_step();
    CHECK_FALSE(next.skipped);
    CHECK(eng.applied_steps() == steps_before + 1);
    CHECK_FALSE(same_halves(eng.params16(), p_before));
  }
}

TEST_CASE("dry runs emit the exact functional trace") {
  TempDir tmp("dry");
  int tag = 0;
  for (const Mode mode : {Mode::base, Mode::su, Mode::su_o, Mode::su_o_c}) {
    auto cfg = small_config(mode, tmp.p / ("f" + std::to_string(tag)));
    if (mode == Mode::su_o_c) cfg.compression_pct = 10.0;
    auto dry_cfg = cfg;
    dry_cfg.dry = true;
    dry_cfg.data_dir = tmp.p / ("d" + std::to_string(tag++));

    Engine wet(cfg);
    Engine dry(dry_cfg);
    // Init layout, then three iterations, compared op for op.
    for (int round = 0; round < 4; ++round) {
      if (round > 0) {
        wet.train_step();
        dry.train_step();
      }
      const Trace a = wet.take_trace();
      const Trace b = dry.take_trace();
      REQUIRE(a.size() == b.size());
      for (std::size_t i = 0; i < a.size(); ++i) {
        CAPTURE(to_string(mode));
        CAPTURE(round);
        CAPTURE(i);
        CHECK(same_op(a[i], b[i]));
      }
    }
    // Dry engines still account traffic but refuse data readbacks.
    CHECK_THROWS_AS(dry.eval_loss(), std::logic_error);
    CHECK_THROWS_AS(dry.read_master(), std::logic_error);
  }
}

TEST_CASE("the threaded pipeline matches the canonical order bitwise") {
  TempDir tmp("threads");
  auto cfg = small_config(Mode::su_o, tmp.p / "det");
  cfg.devices = 3;
  cfg.subgroup_budget = 1024;  // enough subgroups to overlap
  Engine det(cfg);
  det.run(5);

  cfg.deterministic = false;
  cfg.data_dir = tmp.p / "thr";
  Engine thr(cfg);
  thr.run(5);

  CHECK(same_halves(thr.params16(), det.params16()));
  CHECK(thr.read_master() == det.read_master());
  CHECK(thr.read_state(Var::variance) == det.read_state(Var::variance));
}

TEST_CASE("pipeline introspection exposes plans, pools and events") {
  TempDir tmp("events");
  auto cfg = small_config(Mode::su_o, tmp.p / "su_o");
  cfg.subgroup_budget = 1024;
  Engine eng(cfg);
  eng.train_step();
  REQUIRE_FALSE(eng.plan(0).empty());
  CHECK(eng.plan(0)[0].elem_count <= 1024 / 18);
  const auto& events = eng.last_pipeline_events(0);
  bool has_update = false, has_alloc = false;
  for (const auto& e : events) {
    has_update = has_update || e.name == "update";
    has_alloc = has_alloc || e.name == "alloc";
  }
  CHECK(has_update);
  CHECK_FALSE(has_alloc);  // pooled pipeline never reallocates
  CHECK(eng.pool_stats(0).peak > 0);

  auto naive_cfg = small_config(Mode::su, tmp.p / "su");
  naive_cfg.subgroup_budget = 1024;
  Engine naive(naive_cfg);
  naive.train_step();
  bool naive_alloc = false;
  for (const auto& e : naive.last_pipeline_events(0))
    naive_alloc = naive_alloc || e.name == "alloc";
  CHECK(naive_alloc);
}

TEST_CASE("state readback rejects mode and kind mismatches") {
  TempDir tmp("readback");
  Engine mem(small_config(Mode::mem, tmp.p / "mem"));
  CHECK_THROWS_AS(mem.read_state(Var::grad), std::invalid_argument);
  CHECK_THROWS_AS(mem.topology(), std::logic_error);

  Engine ada(small_config(Mode::su, tmp.p / "ada", OptimizerKind::adagrad));
  CHECK_THROWS_AS(ada.read_state(Var::momentum), std::invalid_argument);
  CHECK(ada.read_state(Var::variance).size() == 256);

  Engine sgd(small_config(Mode::base, tmp.p / "sgd",
                          OptimizerKind::sgd_momentum));
  CHECK_THROWS_AS(sgd.read_state(Var::variance), std::invalid_argument);
  CHECK(sgd.read_state(Var::momentum).size() == 256);
}

TEST_CASE("training reduces the evaluation loss") {
  TempDir tmp("learn");
  auto cfg = small_config(Mode::mem, tmp.p);
  cfg.batch_size = 32;
  Engine eng(cfg);
  const double before = eng.eval_loss();
  eng.run(80);
  CHECK(eng.eval_loss() < before);
}

// Copyright (c) 2026 nearstore contributors.
// SPDX-License-Identifier: Apache-2.0
#include "nearstore/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <vector>

#include "nearstore/compression.hpp"
#include "nearstore/engine.hpp"
#include "nearstore/model.hpp"

namespace nearstore {

namespace {

// Independent one-element reference updater (same float-op order the spec of
// each rule dictates; no vectors, no shared helpers).
struct ScalarState {
  float p = 0.0f, m = 0.0f, v = 0.0f;
};

void scalar_step(const OptimizerConfig& cfg, std::uint64_t t, float clip,
                 float grad, ScalarState& s) {
  const float g = clip * grad;
  switch (cfg.kind) {
    case OptimizerKind::adam: {
      s.m = cfg.beta1 * s.m + (1.0f - cfg.beta1) * g;
      s.v = cfg.beta2 * s.v + (1.0f - cfg.beta2) * (g * g);
      float mh = s.m;
      float vh = s.v;
      if (cfg.bias_correction) {
        mh = s.m / (1.0f - std::pow(cfg.beta1, static_cast<float>(t)));
        vh = s.v / (1.0f - std::pow(cfg.beta2, static_cast<float>(t)));
      }
      s.p = s.p - cfg.lr * (mh / (std::sqrt(vh) + cfg.eps));
      break;
    }
    case OptimizerKind::sgd_momentum:
      s.m = cfg.momentum_coef * s.m + g;
      s.p = s.p - cfg.lr * s.m;
      break;
    case OptimizerKind::adagrad:
      s.v = s.v + g * g;
      s.p = s.p - cfg.lr * (g / (std::sqrt(s.v) + cfg.eps));
      break;
  }
}

bool bits_equal(float a, float b) {
  std::uint32_t ua, ub;
  std::memcpy(&ua, &a, 4);
  std::memcpy(&ub, &b, 4);
  return ua == ub;
}

std::string at_step(const char* what, std::size_t step) {
  std::ostringstream ss;
  ss << what << " diverged at step " << step;
  return ss.str();
}

CheckResult pass(std::string name, std::string detail) {
  return CheckResult{std::move(name), true, std::move(detail)};
}

CheckResult fail(std::string name, std::string detail) {
  return CheckResult{std::move(name), false, std::move(detail)};
}

}  // namespace

CheckResult check_updater_oracle(std::uint64_t seed) {
  const char* name = "updater_oracle";
  Rng rng(seed);
  const OptimizerKind kinds[] = {OptimizerKind::adam,
                                 OptimizerKind::sgd_momentum,
                                 OptimizerKind::adagrad};
  for (const OptimizerKind kind : kinds) {
    OptimizerConfig cfg;
    cfg.kind = kind;
    cfg.momentum_coef = 0.9f;
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t n = 1 + rng.next_u64() % 17;
      const std::uint64_t t = 1 + rng.next_u64() % 50;
      const float clip = static_cast<float>(rng.uniform(0.05, 1.0));
      std::vector<float> p(n), m(n), v(n), g(n);
      std::vector<ScalarState> ref(n);
      for (std::size_t i = 0; i < n; ++i) {
        p[i] = static_cast<float>(rng.uniform(-2.0, 2.0));
        m[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
        v[i] = static_cast<float>(rng.uniform(0.0, 1.0));
        g[i] = static_cast<float>(rng.uniform(-3.0, 3.0));
        ref[i] = ScalarState{p[i], m[i], v[i]};
      }
      if (!update_in_place(cfg, t, clip, g, p, m, v, {})) {
        return fail(name, "finite gradients were rejected");
      }
      for (std::size_t i = 0; i < n; ++i) {
        scalar_step(cfg, t, clip, g[i], ref[i]);
        const bool m_ok =
            kind == OptimizerKind::adagrad || bits_equal(m[i], ref[i].m);
        const bool v_ok =
            kind == OptimizerKind::sgd_momentum || bits_equal(v[i], ref[i].v);
        if (!bits_equal(p[i], ref[i].p) || !m_ok || !v_ok) {
          std::ostringstream ss;
          ss << to_string(kind) << " trial " << trial << " elem " << i
             << " mismatches the scalar reference";
          return fail(name, ss.str());
        }
      }
    }
  }
  return pass(name, "600 random steps bit-equal to the scalar reference");
}

CheckResult check_sparse_roundtrip(std::uint64_t seed) {
  const char* name = "sparse_roundtrip";
  Rng rng(seed);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.next_u64() % 64;
    std::vector<half> dense(n);
    for (std::size_t i = 0; i < n; ++i) {
      dense[i] = narrow(static_cast<float>(rng.uniform(-4.0, 4.0)));
    }
    for (std::size_t k = 1; k <= n; k += 1 + n / 7) {
      // Brute-force oracle: rank by (|value| desc, index asc), keep k.
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) {
                         return std::fabs(widen(dense[a])) >
                                std::fabs(widen(dense[b]));
                       });
      std::vector<float> expect(n, 0.0f);
      for (std::size_t j = 0; j < k; ++j) {
        expect[order[j]] = widen(dense[order[j]]);
      }

      const SparseGradient sg = compress_topk(dense, k);
      const std::vector<float> got = decompress_scatter(sg, 64);
      const std::vector<float> got1 = decompress_scatter(sg, 1);
      const std::vector<float> got7 = decompress_scatter(sg, 7);
      if (got != expect || got1 != got || got7 != got) {
        std::ostringstream ss;
        ss << "trial " << trial << " n=" << n << " k=" << k
           << " disagrees with the sort oracle or chunk invariance";
        return fail(name, ss.str());
      }
      if (sg.payload_bytes() != 6 * k) {
        return fail(name, "wire size is not 6 bytes per kept pair");
      }
    }
  }
  return pass(name, "100 random vectors match the sort oracle at every k");
}

CheckResult check_mode_equivalence(const std::filesystem::path& scratch) {
  const char* name = "mode_equivalence";
  const Mode modes[] = {Mode::mem, Mode::base, Mode::su, Mode::su_o};
  std::vector<std::unique_ptr<Engine>> engines;
  for (const Mode mode : modes) {
    EngineConfig cfg;
    cfg.mode = mode;
    cfg.model = MlpSpec{15, 16};  // 256 params
    cfg.devices = mode == Mode::mem ? 1 : 2;
    cfg.deterministic = true;
    cfg.seed = 7;
    cfg.data_dir = scratch / ("equiv_" + to_string(mode));
    std::filesystem::remove_all(cfg.data_dir);
    engines.push_back(std::make_unique<Engine>(std::move(cfg)));
  }
  for (std::size_t step = 1; step <= 5; ++step) {
    for (auto& e : engines) e->train_step();
    const auto ref = engines[0]->params16();
    for (std::size_t i = 1; i < engines.size(); ++i) {
      const auto got = engines[i]->params16();
      if (!std::equal(ref.begin(), ref.end(), got.begin(), got.end(),
                      [](half a, half b) { return a.bits == b.bits; })) {
        return fail(name, at_step("fp16 params", step));
      }
    }
  }
  const auto master = engines[0]->read_master();
  for (std::size_t i = 1; i < engines.size(); ++i) {
    const auto got = engines[i]->read_master();
    if (!std::equal(master.begin(), master.end(), got.begin(), got.end(),
                    bits_equal)) {
      return fail(name, "fp32 master params diverged after 5 steps");
    }
  }
  return pass(name, "mem/base/su/su_o bit-equal over 5 steps");
}

CheckResult check_ledger_signatures(const std::filesystem::path& scratch) {
  const char* name = "ledger_signatures";
  const MlpSpec model{63, 64};  // N = 4096
  const std::uint64_t M = 2ull * model.param_count();

  auto run_one = [&](Mode mode, double pct) {
    EngineConfig cfg;
    cfg.mode = mode;
    cfg.model = model;
    cfg.devices = 2;
    cfg.deterministic = true;
    cfg.compression_pct = pct;
    cfg.data_dir = scratch / ("ledger_" + to_string(mode));
    std::filesystem::remove_all(cfg.data_dir);
    Engine engine(cfg);
    return engine.train_step();
  };

  {
    const IterationReport r = run_one(Mode::base, 0.0);
    if (r.delta.host_total().read != 8 * M ||
        r.delta.host_total().write != 8 * M) {
      return fail(name, "base iteration host bytes are not 8M/8M");
    }
  }
  for (const Mode mode : {Mode::su, Mode::su_o}) {
    const IterationReport r = run_one(mode, 0.0);
    if (r.delta.host_total().read != 2 * M ||
        r.delta.host_total().write != 2 * M) {
      return fail(name,
                  to_string(mode) + " iteration host bytes are not 2M/2M");
    }
    if (r.delta.internal_total().read < 6 * M ||
        r.delta.internal_total().write < 6 * M) {
      return fail(name, to_string(mode) + " internal bytes below 6M/6M");
    }
  }
  {
    const double pct = 2.0;
    const IterationReport r = run_one(Mode::su_o_c, pct);
    if (r.delta.host_total().read != 2 * M) {
      return fail(name, "su_o_c host read is not 2M");
    }
    // Expected pair count from the published layout rules alone.
    std::uint64_t pairs = 0;
    const Partition part = partition_parameters(model.param_count(), 2);
    for (const FlatSegment& seg : part.segments) {
      for (const FlatSegment& b : model.blocks()) {
        const std::size_t lo = std::max(seg.offset, b.offset);
        const std::size_t hi = std::min(seg.end(), b.end());
        if (lo < hi) pairs += topk_count_for_ratio(hi - lo, pct);
      }
    }
    if (r.sparse_pairs != pairs ||
        r.delta.host_phase(Phase::backward).write != 6 * pairs) {
      return fail(name, "su_o_c gradient bytes are not 6 per kept pair");
    }
  }
  return pass(name, "per-iteration byte signatures hold for every mode");
}

CheckResult check_store_persistence(const std::filesystem::path& scratch,
                                    bool corrupt) {
  const char* name = "store_persistence";
  const auto dir = scratch / "persist";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const auto file = dir / "dev0.bin";

  Rng rng(99);
  std::vector<std::byte> payload(512);
  for (auto& b : payload) {
    b = static_cast<std::byte>(rng.next_u64() & 0xff);
  }
  Extent e;
  {
    ShardStore store(file, 4096, false);
    e = store.allocate("pattern", payload.size(), "bytes");
    store.write(e, payload);
    store.save_manifest();
  }
  if (corrupt) {
    std::fstream f(file, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(static_cast<std::streamoff>(e.offset + 7));
    char flipped = static_cast<char>(~std::to_integer<int>(payload[7]));
    f.write(&flipped, 1);
  }
  const auto reopened = ShardStore::open_existing(file);
  if (!reopened->has("pattern")) {
    return fail(name, "manifest lost the extent record");
  }
  std::vector<std::byte> back(payload.size());
  reopened->read(reopened->record("pattern").extent, back);
  if (back != payload) {
    return fail(name, "backing bytes differ from what was persisted");
  }
  return pass(name, "extents and bytes round-trip through reopen");
}

std::vector<CheckResult> run_conformance_checks(
    const std::filesystem::path& scratch) {
  std::vector<CheckResult> out;
  out.push_back(check_updater_oracle());
  out.push_back(check_sparse_roundtrip());
  out.push_back(check_mode_equivalence(scratch));
  out.push_back(check_ledger_signatures(scratch));
  out.push_back(check_store_persistence(scratch));
  return out;
}

}  // namespace nearstore

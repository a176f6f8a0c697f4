// Copyright (c) 2026 nearstore contributors.
// SPDX-License-Identifier: Apache-2.0
#include "nearstore/engine.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <mutex>
#include <stdexcept>
#include <thread>

#include "nearstore/compression.hpp"

namespace nearstore {

namespace {

std::span<const std::byte> cbytes(std::span<const float> s) {
  return std::as_bytes(s);
}
std::span<std::byte> wbytes(std::span<float> s) {
  return std::as_writable_bytes(s);
}

Extent sub_extent(const Extent& e, std::uint64_t off, std::uint64_t len) {
  if (off + len > e.len) throw std::logic_error("sub_extent: out of range");
  return Extent{e.offset + off, len};
}

// Pool buffers of unused state kinds are empty; never slice those.
std::span<float> pool_slice(BufferPool& pool, Var v, std::size_t count) {
  auto s = pool.f32(v);
  return s.empty() ? s : s.subspan(0, count);
}

constexpr std::size_t kDecompChunk = 64;

}  // namespace

std::string to_string(Mode m) {
  switch (m) {
    case Mode::mem: return "mem";
    case Mode::base: return "base";
    case Mode::su: return "su";
    case Mode::su_o: return "su_o";
    case Mode::su_o_c: return "su_o_c";
  }
  return "?";
}

Mode mode_from_string(const std::string& s) {
  if (s == "mem") return Mode::mem;
  if (s == "base") return Mode::base;
  if (s == "su") return Mode::su;
  if (s == "su_o") return Mode::su_o;
  if (s == "su_o_c") return Mode::su_o_c;
  throw std::invalid_argument("unknown mode: " + s);
}

Partition partition_parameters(std::size_t n, std::size_t devices) {
  if (devices == 0) {
    throw std::invalid_argument("partition_parameters: need at least 1 device");
  }
  Partition p;
  const std::size_t base = n / devices;
  const std::size_t rem = n % devices;
  std::size_t off = 0;
  for (std::size_t d = 0; d < devices; ++d) {
    const std::size_t len = base + (d < rem ? 1 : 0);
    p.segments.push_back(FlatSegment{off, len, Dtype::f32});
    off += len;
  }
  return p;
}

void EngineConfig::validate() const {
  optimizer.validate();
  if (model.input_dim == 0 || model.hidden_dim == 0) {
    throw std::invalid_argument("EngineConfig: empty model");
  }
  if (!dry && batch_size == 0) {
    throw std::invalid_argument("EngineConfig: batch_size must be >= 1");
  }
  if (device_count() == 0) {
    throw std::invalid_argument("EngineConfig: need at least 1 device");
  }
  if (mode == Mode::su_o_c) {
    // 300 keeps every pair (k = len): the lossless reference point.
    if (!(compression_pct > 0.0 && compression_pct <= 300.0)) {
      throw std::invalid_argument(
          "EngineConfig: compression_pct in (0,300] required for su_o_c");
    }
  } else if (compression_pct != 0.0) {
    throw std::invalid_argument(
        "EngineConfig: compression_pct only applies to su_o_c");
  }
  if (error_feedback && mode != Mode::su_o_c) {
    throw std::invalid_argument(
        "EngineConfig: error_feedback only applies to su_o_c");
  }
  if (stripe_size == 0 || chunk_bytes < sizeof(float)) {
    throw std::invalid_argument("EngineConfig: bad stripe/chunk size");
  }
  if (!(max_grad_norm > 0.0f)) {
    throw std::invalid_argument("EngineConfig: max_grad_norm must be > 0");
  }
  if (!(scaler.scale > 0.0f)) {
    throw std::invalid_argument("EngineConfig: loss scale must be > 0");
  }
  if (topology) topology->validate();
  if (mode != Mode::mem && mode != Mode::base && topology) {
    for (const auto& d : topology->devices) {
      if (d.kind != DeviceKind::csd) {
        throw std::invalid_argument(
            "EngineConfig: device-side update modes need csd devices");
      }
    }
  }
}

// Sparse piece: one (tasklet, block) intersection on one device. Sizes and
// extents depend only on lengths, never on data.
struct Engine::SparsePiece {
  std::size_t tasklet = 0;
  std::size_t block = 0;
  std::size_t seg_off = 0;  // elements, relative to the device segment
  std::size_t len = 0;
  std::size_t k = 0;
  Extent extent;            // device byte extent of the payload
  std::size_t buf_off = 0;  // byte offset in the pool's sparse buffer
};

struct Engine::DeviceState {
  FlatSegment seg;
  Extent p32, m, v, staging, grads;
  std::vector<Tasklet> plan;
  std::vector<SparsePiece> pieces;
  PoolStats stats;  // declared before the pool, which reports into it on teardown
  std::unique_ptr<BufferPool> pool;  // persistent for su_o / su_o_c
  std::size_t max_elems = 0;
  std::size_t sparse_cap = 0;  // pool sparse buffer bytes
  std::vector<PipelineEvent> last_events;
  std::mutex host_mu;
  TraceDeps staged_reads;
};

Engine::Engine(EngineConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  n_params_ = cfg_.model.param_count();
  partition_ = partition_parameters(n_params_, cfg_.device_count());
  scaler_ = cfg_.scaler;

  if (!cfg_.dry) {
    data_ = make_teacher_dataset(cfg_.model, cfg_.batch_size, cfg_.noise_sigma,
                                 cfg_.seed + 17);
    Rng rng(cfg_.seed);
    p32_ = init_params(cfg_.model, rng);
    p16_.resize(n_params_);
    for (std::size_t i = 0; i < n_params_; ++i) p16_[i] = narrow(p32_[i]);
    g32_.resize(n_params_);
    g16_.resize(n_params_);
    if (cfg_.error_feedback) residual_.assign(n_params_, 0.0f);
  }

  switch (cfg_.mode) {
    case Mode::mem: init_mem(); break;
    case Mode::base: init_base(); break;
    default: init_su(); break;
  }
}

Engine::~Engine() = default;

const FabricTopology& Engine::topology() const {
  if (!fabric_) {
    throw std::logic_error("Engine::topology: in-memory mode has no fabric");
  }
  return fabric_->topology();
}

void Engine::init_mem() {
  if (cfg_.dry) return;
  m_.assign(n_params_, 0.0f);
  v_.assign(n_params_, 0.0f);
}

std::vector<StripePiece> Engine::base_pieces(std::size_t region,
                                             std::uint64_t byte_off,
                                             std::uint64_t len) const {
  const Extent logical{base_region_off_[region] + byte_off, len};
  return raid0_map(logical, cfg_.stripe_size, partition_.segments.size());
}

void Engine::init_base() {
  const std::size_t ndev = cfg_.device_count();
  FabricTopology topo = cfg_.topology
                            ? *cfg_.topology
                            : default_topology(ndev, DeviceKind::ssd);
  const auto svars = state_vars(cfg_.optimizer.kind);
  base_state_regions_ = svars.size();
  const std::uint64_t region_bytes = 4ull * n_params_;
  for (std::size_t r = 0; r <= svars.size(); ++r) {
    const std::size_t slot = r < svars.size() ? r : 3;
    base_region_off_[slot] = r * region_bytes;
  }
  const std::uint64_t total = (svars.size() + 1) * region_bytes;
  const std::uint64_t stripes =
      (total + cfg_.stripe_size - 1) / cfg_.stripe_size;
  const std::uint64_t per_dev =
      ((stripes + ndev - 1) / ndev) * cfg_.stripe_size;
  fabric_ = std::make_unique<DeviceFabric>(topo, cfg_.data_dir, cfg_.dry,
                                           per_dev + cfg_.stripe_size);
  for (std::uint32_t d = 0; d < ndev; ++d) {
    fabric_->store(d).allocate("volume", per_dev, "bytes");
  }

  PhaseScope ps(*fabric_, Phase::init);
  std::vector<float> zeros;
  if (!cfg_.dry) zeros.assign(n_params_, 0.0f);
  iter_tail_.clear();
  for (std::size_t r = 0; r < svars.size(); ++r) {
    std::span<const float> src;
    if (!cfg_.dry) src = (svars[r] == Var::params32) ? p32_ : zeros;
    iter_tail_.push_back(fabric_->host_write_striped(
        base_pieces(r, 0, region_bytes), cbytes(src), {}));
  }
  if (!cfg_.dry) p32_.clear();  // states now live on the volume
  for (std::uint32_t d = 0; d < ndev; ++d) fabric_->store(d).save_manifest();
}

void Engine::init_su() {
  const std::size_t ndev = cfg_.device_count();
  FabricTopology topo =
      cfg_.topology ? *cfg_.topology : default_topology(ndev, DeviceKind::csd);
  const auto svars = state_vars(cfg_.optimizer.kind);
  const auto blocks = cfg_.model.blocks();

  std::uint64_t max_cap = 0;
  dev_.clear();
  for (std::uint32_t d = 0; d < ndev; ++d) {
    auto ds = std::make_unique<DeviceState>();
    ds->seg = partition_.segments[d];
    const std::uint64_t seg_bytes = 4ull * ds->seg.len;
    const std::uint64_t budget =
        std::min<std::uint64_t>(cfg_.subgroup_budget,
                                topo.devices[d].accel_mem_capacity);
    ds->plan = plan_subgroups(ds->seg.len, budget, cfg_.optimizer.kind);
    for (const Tasklet& t : ds->plan) {
      ds->max_elems = std::max(ds->max_elems, t.elem_count);
    }

    // Content-independent sparse layout: one piece per (tasklet, block)
    // intersection, pair count from the ratio formula.
    std::uint64_t sparse_total = 0;
    if (cfg_.mode == Mode::su_o_c) {
      for (const Tasklet& t : ds->plan) {
        const std::size_t t_lo = ds->seg.offset + t.elem_offset;
        const std::size_t t_hi = t_lo + t.elem_count;
        std::size_t tasklet_bytes = 0;
        for (std::size_t b = 0; b < blocks.size(); ++b) {
          const std::size_t lo = std::max(t_lo, blocks[b].offset);
          const std::size_t hi = std::min(t_hi, blocks[b].end());
          if (lo >= hi) continue;
          SparsePiece piece;
          piece.tasklet = t.index;
          piece.block = b;
          piece.seg_off = lo - ds->seg.offset;
          piece.len = hi - lo;
          piece.k = topk_count_for_ratio(piece.len, cfg_.compression_pct);
          piece.buf_off = tasklet_bytes;
          piece.extent = Extent{sparse_total, 6 * piece.k};  // offset fixed later
          tasklet_bytes += 6 * piece.k;
          sparse_total += 6 * piece.k;
          ds->pieces.push_back(piece);
        }
        ds->sparse_cap = std::max(ds->sparse_cap, tasklet_bytes);
      }
    }

    const std::uint64_t cap = seg_bytes * (svars.size() + 2) + sparse_total +
                              4096;
    max_cap = std::max(max_cap, cap);
    dev_.push_back(std::move(ds));
  }

  fabric_ = std::make_unique<DeviceFabric>(topo, cfg_.data_dir, cfg_.dry,
                                           max_cap);

  PhaseScope ps(*fabric_, Phase::init);
  iter_tail_.clear();
  for (std::uint32_t d = 0; d < ndev; ++d) {
    DeviceState& ds = *dev_[d];
    auto& store = fabric_->store(d);
    const std::uint64_t seg_bytes = 4ull * ds.seg.len;
    ds.p32 = store.allocate("params32", seg_bytes, "f32");
    if (cfg_.optimizer.kind != OptimizerKind::adagrad) {
      ds.m = store.allocate("momentum", seg_bytes, "f32");
    }
    if (cfg_.optimizer.kind != OptimizerKind::sgd_momentum) {
      ds.v = store.allocate("variance", seg_bytes, "f32");
    }
    ds.staging = store.allocate("staging", seg_bytes, "f32");
    ds.grads = store.allocate("grads32", seg_bytes, "f32");
    if (cfg_.mode == Mode::su_o_c) {
      std::uint64_t sparse_total = 0;
      for (const SparsePiece& piece : ds.pieces) {
        sparse_total += piece.extent.len;
      }
      const Extent sp = store.allocate("sparse", std::max<std::uint64_t>(
                                                     sparse_total, 1), "bytes");
      store.set_meta("sparse", "pieces", ds.pieces.size());
      for (SparsePiece& piece : ds.pieces) {
        piece.extent.offset += sp.offset;
      }
    }
    if (cfg_.mode != Mode::su) {
      ds.pool = std::make_unique<BufferPool>(ds.max_elems, cfg_.optimizer.kind,
                                             ds.sparse_cap, &ds.stats);
    }

    std::vector<float> zeros;
    if (!cfg_.dry) zeros.assign(ds.seg.len, 0.0f);
    std::span<const float> pinit;
    if (!cfg_.dry) {
      pinit = std::span<const float>(p32_).subspan(ds.seg.offset, ds.seg.len);
    }
    iter_tail_.push_back(fabric_->host_write(d, ds.p32, cbytes(pinit)));
    if (ds.m.len) {
      iter_tail_.push_back(fabric_->host_write(d, ds.m, cbytes(zeros)));
    }
    if (ds.v.len) {
      iter_tail_.push_back(fabric_->host_write(d, ds.v, cbytes(zeros)));
    }
    store.save_manifest();
  }
  if (!cfg_.dry) p32_.clear();
}

void Engine::forward_phase(std::uint64_t& fw_op) {
  fw_op = 0;
  if (!fabric_) return;
  PhaseScope ps(*fabric_, Phase::forward);
  fw_op = fabric_->record_compute(OpKind::gpu_forward, std::nullopt, n_params_,
                                  iter_tail_);
}

void Engine::offload_dense(std::uint64_t bw_op, TraceDeps& gate_deps) {
  const auto blocks = cfg_.model.blocks();
  if (cfg_.mode == Mode::base) {
    std::uint64_t prev = bw_op;
    for (const FlatSegment& b : blocks) {
      std::span<const float> src;
      if (!cfg_.dry) {
        src = std::span<const float>(g32_).subspan(b.offset, b.len);
      }
      const auto pieces =
          base_pieces(3, 4ull * b.offset, 4ull * b.len);
      const std::uint64_t id = fabric_->host_write_striped(
          pieces, cbytes(src), prev ? TraceDeps{prev} : TraceDeps{});
      gate_deps.push_back(id);
      prev = id;
    }
    return;
  }
  // Device-owned dense fp32 gradients, block writes split at segment bounds.
  std::vector<std::uint64_t> prev(dev_.size(), bw_op);
  for (const FlatSegment& b : blocks) {
    for (std::uint32_t d = 0; d < dev_.size(); ++d) {
      DeviceState& ds = *dev_[d];
      const std::size_t lo = std::max(b.offset, ds.seg.offset);
      const std::size_t hi = std::min(b.end(), ds.seg.end());
      if (lo >= hi) continue;
      std::span<const float> src;
      if (!cfg_.dry) src = std::span<const float>(g32_).subspan(lo, hi - lo);
      const Extent e =
          sub_extent(ds.grads, 4ull * (lo - ds.seg.offset), 4ull * (hi - lo));
      const std::uint64_t id = fabric_->host_write(
          d, e, cbytes(src), prev[d] ? TraceDeps{prev[d]} : TraceDeps{});
      gate_deps.push_back(id);
      prev[d] = id;
    }
  }
}

void Engine::offload_sparse(std::uint64_t bw_op, TraceDeps& gate_deps) {
  const auto blocks = cfg_.model.blocks();
  std::vector<std::uint64_t> comp(blocks.size(), 0);
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    comp[b] = fabric_->record_compute(
        OpKind::gpu_compress, std::nullopt, 2ull * blocks[b].len,
        bw_op ? TraceDeps{bw_op} : TraceDeps{});
  }
  for (std::uint32_t d = 0; d < dev_.size(); ++d) {
    DeviceState& ds = *dev_[d];
    std::uint64_t prev = 0;
    for (const SparsePiece& piece : ds.pieces) {
      std::vector<std::byte> payload;
      if (!cfg_.dry) {
        const std::size_t g0 = ds.seg.offset + piece.seg_off;
        std::vector<half> dense(piece.len);
        if (cfg_.error_feedback) {
          for (std::size_t i = 0; i < piece.len; ++i) {
            residual_[g0 + i] += g32_[g0 + i];
            dense[i] = narrow(residual_[g0 + i]);
          }
        } else {
          for (std::size_t i = 0; i < piece.len; ++i) {
            dense[i] = narrow(g32_[g0 + i]);
          }
        }
        const SparseGradient sg = compress_topk(dense, piece.k);
        if (cfg_.error_feedback) {
          const std::vector<float> kept = decompress_scatter(sg, kDecompChunk);
          for (std::size_t i = 0; i < piece.len; ++i) {
            residual_[g0 + i] -= kept[i];
          }
        }
        payload.resize(sg.payload_bytes());
        encode_sparse_payload(sg, payload);
      }
      TraceDeps deps{comp[piece.block]};
      if (prev) deps.push_back(prev);
      const std::uint64_t id = fabric_->host_write_sparse(
          d, piece.extent, payload, piece.k, deps);
      gate_deps.push_back(id);
      prev = id;
    }
  }
}

bool Engine::backward_phase(std::uint64_t fw_op, double& loss,
                            float& grad_sq_norm, TraceDeps& gate_deps) {
  loss = 0.0;
  grad_sq_norm = 0.0f;
  GradCheckResult res;

  std::uint64_t bw_op = 0;
  std::optional<PhaseScope> ps;
  if (fabric_) {
    ps.emplace(*fabric_, Phase::backward);
    bw_op = fabric_->record_compute(OpKind::gpu_backward, std::nullopt,
                                    n_params_,
                                    fw_op ? TraceDeps{fw_op} : TraceDeps{});
  }

  if (!cfg_.dry) {
    loss = mlp_loss_and_grad(cfg_.model, p16_, data_, g32_);
    if (inject_overflow_) {
      g32_[0] = std::numeric_limits<float>::infinity();
      inject_overflow_ = false;
    }
    const float s = scaler_.scale;
    for (std::size_t i = 0; i < n_params_; ++i) {
      g16_[i] = narrow(g32_[i] * s);
    }
    // The canonical unscaled gradient every mode consumes: exactly what the
    // scaled fp16 gradient represents.
    for (std::size_t i = 0; i < n_params_; ++i) {
      g32_[i] = widen(g16_[i]) / s;
    }
    GradChecker chk(s);
    for (const FlatSegment& b : cfg_.model.blocks()) {
      chk.feed(std::span<const half>(g16_).subspan(b.offset, b.len));
    }
    res = chk.result();
  }
  grad_sq_norm = res.global_sq_norm;

  if (fabric_) {
    if (cfg_.mode == Mode::su_o_c) {
      offload_sparse(bw_op, gate_deps);
    } else if (cfg_.mode != Mode::mem) {
      offload_dense(bw_op, gate_deps);
    }
  }
  if (bw_op && gate_deps.empty()) gate_deps.push_back(bw_op);
  return res.has_nan_or_inf;
}

void Engine::update_base(float clip, std::uint64_t step_index,
                         const TraceDeps& gate_deps) {
  const auto svars = state_vars(cfg_.optimizer.kind);
  const std::size_t regions = svars.size();
  const std::size_t chunk_elems =
      std::max<std::size_t>(1, cfg_.chunk_bytes / sizeof(float));
  const std::size_t total_chunks =
      (n_params_ + chunk_elems - 1) / chunk_elems;

  struct ChunkBufs {
    std::vector<std::vector<float>> state;
    std::vector<float> grad;
    std::size_t off = 0, len = 0;
    std::uint64_t cpu_op = 0;
  };
  ChunkBufs bufs[2];
  for (auto& b : bufs) b.state.resize(regions);

  // Serialized IO stream r0 r1 w0 r2 w1 ... with the host updater hanging off
  // each chunk's reads; lookahead of one chunk (double buffering).
  std::uint64_t prev_io = 0;
  const TraceDeps first_deps = gate_deps;  // this step's gradient writes

  auto emit_writes = [&](ChunkBufs& b) {
    for (std::size_t r = 0; r < regions; ++r) {
      TraceDeps deps;
      if (prev_io) deps.push_back(prev_io);
      if (b.cpu_op) deps.push_back(b.cpu_op);
      std::span<const float> src;
      if (!cfg_.dry) src = b.state[r];
      prev_io = fabric_->host_write_striped(
          base_pieces(r, 4ull * b.off, 4ull * b.len), cbytes(src), deps);
    }
  };

  std::uint64_t last_cpu = 0;
  for (std::size_t j = 0; j < total_chunks; ++j) {
    ChunkBufs& cur = bufs[j % 2];
    cur.off = j * chunk_elems;
    cur.len = std::min(chunk_elems, n_params_ - cur.off);

    TraceDeps read_ids;
    auto read_region = [&](std::size_t region, std::span<float> dst) {
      TraceDeps deps = prev_io ? TraceDeps{prev_io} : first_deps;
      prev_io = fabric_->host_read_striped(
          base_pieces(region, 4ull * cur.off, 4ull * cur.len), wbytes(dst),
          deps);
      read_ids.push_back(prev_io);
    };
    for (std::size_t r = 0; r < regions; ++r) {
      if (!cfg_.dry) cur.state[r].resize(cur.len);
      read_region(r, cfg_.dry ? std::span<float>{} : std::span<float>(cur.state[r]));
    }
    if (!cfg_.dry) cur.grad.resize(cur.len);
    read_region(3, cfg_.dry ? std::span<float>{} : std::span<float>(cur.grad));

    cur.cpu_op = fabric_->record_compute(
        OpKind::cpu_update, std::nullopt,
        4ull * (2 * regions + 1) * cur.len, read_ids);
    last_cpu = cur.cpu_op;

    if (!cfg_.dry) {
      auto state_span = [&](Var v) -> std::span<float> {
        for (std::size_t r = 0; r < regions; ++r) {
          if (svars[r] == v) return cur.state[r];
        }
        return {};
      };
      const bool ok = update_in_place(
          cfg_.optimizer, step_index, clip, cur.grad,
          state_span(Var::params32), state_span(Var::momentum),
          state_span(Var::variance),
          std::span<half>(p16_).subspan(cur.off, cur.len));
      if (!ok) throw std::logic_error("update_base: gate missed a bad grad");
    }
    if (j > 0) emit_writes(bufs[(j - 1) % 2]);
  }
  emit_writes(bufs[(total_chunks - 1) % 2]);

  iter_tail_.clear();
  iter_tail_.push_back(prev_io);
  if (last_cpu) iter_tail_.push_back(last_cpu);
}

void Engine::update_su(float clip, std::uint64_t step_index,
                       const TraceDeps& gate_deps) {
  std::mutex tail_mu;
  TraceDeps tails;

  auto run_device = [&](std::uint32_t d) {
    DeviceState& ds = *dev_[d];
    {
      std::lock_guard<std::mutex> lk(ds.host_mu);
      ds.staged_reads.clear();
    }

    auto var_extent = [&](Var v) -> const Extent& {
      switch (v) {
        case Var::params32: return ds.p32;
        case Var::momentum: return ds.m;
        case Var::variance: return ds.v;
        default: break;
      }
      throw std::logic_error("update_su: no extent for var");
    };

    PipelineIo io;
    io.load = [&, d](const Tasklet& t, Var var, BufferPool& pool,
                     const TraceDeps& token_deps) -> std::uint64_t {
      TraceDeps deps = token_deps;
      deps.insert(deps.end(), gate_deps.begin(), gate_deps.end());
      if (var == Var::grad) {
        if (cfg_.mode == Mode::su_o_c) {
          std::uint64_t last = 0;
          for (const SparsePiece& piece : ds.pieces) {
            if (piece.tasklet != t.index) continue;
            std::span<std::byte> dst;
            if (!cfg_.dry) {
              dst = pool.sparse().subspan(piece.buf_off, piece.extent.len);
            }
            const TraceDeps pd = last ? TraceDeps{last} : deps;
            last = fabric_->p2p_read(d, piece.extent, dst, pd,
                                     static_cast<std::int64_t>(t.index));
          }
          return last;
        }
        const Extent e = sub_extent(ds.grads, 4ull * t.elem_offset,
                                    4ull * t.elem_count);
        std::span<float> dst;
        if (!cfg_.dry) dst = pool_slice(pool, Var::grad, t.elem_count);
        return fabric_->p2p_read(d, e, wbytes(dst), deps,
                                 static_cast<std::int64_t>(t.index));
      }
      const Extent e = sub_extent(var_extent(var), 4ull * t.elem_offset,
                                  4ull * t.elem_count);
      std::span<float> dst;
      if (!cfg_.dry) dst = pool_slice(pool, var, t.elem_count);
      return fabric_->p2p_read(d, e, wbytes(dst), deps,
                               static_cast<std::int64_t>(t.index));
    };

    io.store = [&, d](const Tasklet& t, Var var, BufferPool& pool,
                      const TraceDeps& deps, bool low) -> std::uint64_t {
      const Extent e = sub_extent(var_extent(var), 4ull * t.elem_offset,
                                  4ull * t.elem_count);
      std::span<const float> src;
      if (!cfg_.dry) src = pool_slice(pool, var, t.elem_count);
      return fabric_->p2p_write(d, e, cbytes(src), deps,
                                static_cast<std::int64_t>(t.index), low);
    };

    io.stage = [&, d](const Tasklet& t, BufferPool& pool,
                      const TraceDeps& deps) -> std::uint64_t {
      const Extent e = sub_extent(ds.staging, 4ull * t.elem_offset,
                                  4ull * t.elem_count);
      std::span<const float> src;
      if (!cfg_.dry) src = pool_slice(pool, Var::params32, t.elem_count);
      return fabric_->p2p_write(d, e, cbytes(src), deps,
                                static_cast<std::int64_t>(t.index), false);
    };

    io.on_staged = [&, d](const Tasklet& t, std::uint64_t op) {
      const Extent e = sub_extent(ds.staging, 4ull * t.elem_offset,
                                  4ull * t.elem_count);
      std::vector<float> host;
      if (!cfg_.dry) host.resize(t.elem_count);
      const std::uint64_t id = fabric_->host_read(
          d, e, wbytes(host), TraceDeps{op},
          static_cast<std::int64_t>(t.index));
      if (!cfg_.dry) {
        const std::size_t base = ds.seg.offset + t.elem_offset;
        for (std::size_t i = 0; i < t.elem_count; ++i) {
          p16_[base + i] = narrow(host[i]);
        }
      }
      std::lock_guard<std::mutex> lk(ds.host_mu);
      ds.staged_reads.push_back(id);
    };

    io.update = [&, d](const Tasklet& t, BufferPool& pool,
                       const TraceDeps& deps) -> std::uint64_t {
      TraceDeps udeps = deps;
      if (cfg_.mode == Mode::su_o_c) {
        const std::uint64_t dec = fabric_->record_compute(
            OpKind::accel_decomp, d, 4ull * t.elem_count, deps,
            static_cast<std::int64_t>(t.index));
        udeps = TraceDeps{dec};
        if (!cfg_.dry) {
          auto grad = pool_slice(pool, Var::grad, t.elem_count);
          for (const SparsePiece& piece : ds.pieces) {
            if (piece.tasklet != t.index) continue;
            const auto payload =
                pool.sparse().subspan(piece.buf_off, piece.extent.len);
            const SparseGradient sg =
                decode_sparse_payload(payload, piece.len, piece.k);
            const std::vector<float> dense =
                decompress_scatter(sg, kDecompChunk);
            std::copy(dense.begin(), dense.end(),
                      grad.begin() + (piece.seg_off - t.elem_offset));
          }
        }
      }
      if (!cfg_.dry) {
        const bool ok = update_in_place(
            cfg_.optimizer, step_index, clip,
            pool_slice(pool, Var::grad, t.elem_count),
            pool_slice(pool, Var::params32, t.elem_count),
            pool_slice(pool, Var::momentum, t.elem_count),
            pool_slice(pool, Var::variance, t.elem_count),
            pool.f16().subspan(0, t.elem_count));
        if (!ok) throw std::logic_error("update_su: gate missed a bad grad");
      }
      return fabric_->record_compute(OpKind::accel_update, d,
                                     4ull * t.elem_count, udeps,
                                     static_cast<std::int64_t>(t.index));
    };

    PipelineResult res;
    if (cfg_.mode == Mode::su) {
      res = naive_pipeline(ds.plan, cfg_.optimizer.kind, ds.max_elems,
                           ds.sparse_cap, io, &ds.stats);
    } else {
      ds.pool->rearm();
      PipelineOptions opts;
      opts.threaded = !cfg_.deterministic;
      res = run_pipeline(ds.plan, *ds.pool, io, opts);
    }
    ds.last_events = std::move(res.events);

    std::lock_guard<std::mutex> lk(tail_mu);
    tails.insert(tails.end(), res.tails.begin(), res.tails.end());
    std::lock_guard<std::mutex> lk2(ds.host_mu);
    tails.insert(tails.end(), ds.staged_reads.begin(), ds.staged_reads.end());
  };

  if (cfg_.deterministic || dev_.size() == 1) {
    for (std::uint32_t d = 0; d < dev_.size(); ++d) run_device(d);
  } else {
    std::vector<std::thread> threads;
    threads.reserve(dev_.size());
    for (std::uint32_t d = 0; d < dev_.size(); ++d) {
      threads.emplace_back(run_device, d);
    }
    for (auto& th : threads) th.join();
  }
  iter_tail_ = std::move(tails);
}

IterationReport Engine::train_step() {
  ++steps_run_;
  IterationReport rep;
  rep.step = steps_run_;
  const LedgerSnapshot before =
      fabric_ ? fabric_->ledger().snapshot() : LedgerSnapshot{};

  std::uint64_t fw_op = 0;
  forward_phase(fw_op);
  rep.activation_bytes =
      cfg_.batch_size * cfg_.model.hidden_dim * sizeof(float);

  double loss = 0.0;
  float norm = 0.0f;
  TraceDeps gate_deps;
  const bool overflow = backward_phase(fw_op, loss, norm, gate_deps);
  rep.loss = loss;
  rep.grad_sq_norm = norm;

  if (overflow) {
    scaler_.update(true);
    rep.skipped = true;
    iter_tail_ = gate_deps;
  } else {
    const std::uint64_t step_index = applied_steps_ + 1;
    const float clip =
        cfg_.dry ? 1.0f : clip_scale_from_norm(norm, cfg_.max_grad_norm);
    if (!fabric_) {
      const bool ok = update_in_place(cfg_.optimizer, step_index, clip, g32_,
                                      p32_, m_, v_, p16_);
      if (!ok) throw std::logic_error("train_step: gate missed a bad grad");
    } else {
      PhaseScope ps(*fabric_, Phase::update);
      if (cfg_.mode == Mode::base) {
        update_base(clip, step_index, gate_deps);
      } else {
        update_su(clip, step_index, gate_deps);
      }
    }
    ++applied_steps_;
    scaler_.update(false);
  }

  rep.loss_scale_after = scaler_.scale;
  if (fabric_) {
    const LedgerSnapshot after = fabric_->ledger().snapshot();
    rep.delta = after.delta_since(before);
    rep.sparse_pairs = rep.delta.sparse_pairs_total();
    rep.sparse_payload_bytes =
        cfg_.mode == Mode::su_o_c ? rep.delta.host_phase(Phase::backward).write
                                  : 0;
  }
  return rep;
}

std::vector<IterationReport> Engine::run(std::size_t steps) {
  std::vector<IterationReport> out;
  out.reserve(steps);
  for (std::size_t i = 0; i < steps; ++i) out.push_back(train_step());
  return out;
}

double Engine::eval_loss() const {
  if (cfg_.dry) throw std::logic_error("eval_loss: no data in dry mode");
  return mlp_loss(cfg_.model, p16_, data_);
}

std::vector<float> Engine::read_master() const {
  return const_cast<Engine*>(this)->read_state(Var::params32);
}

std::vector<float> Engine::read_state(Var which) const {
  if (cfg_.dry) throw std::logic_error("read_state: no data in dry mode");
  auto* self = const_cast<Engine*>(this);
  if (cfg_.mode == Mode::mem) {
    switch (which) {
      case Var::params32: return p32_;
      case Var::momentum: return m_;
      case Var::variance: return v_;
      default: throw std::invalid_argument("read_state: not a state var");
    }
  }
  std::vector<float> out(n_params_);
  if (cfg_.mode == Mode::base) {
    const auto svars = state_vars(cfg_.optimizer.kind);
    std::size_t region = svars.size();
    for (std::size_t r = 0; r < svars.size(); ++r) {
      if (svars[r] == which) region = r;
    }
    if (region == svars.size()) {
      throw std::invalid_argument("read_state: optimizer lacks that state");
    }
    const auto pieces = base_pieces(region, 0, 4ull * n_params_);
    std::uint64_t off = 0;
    for (const StripePiece& piece : pieces) {
      self->fabric_->peek(piece.device, piece.extent,
                          wbytes(std::span<float>(out))
                              .subspan(off, piece.extent.len));
      off += piece.extent.len;
    }
    return out;
  }
  for (std::uint32_t d = 0; d < dev_.size(); ++d) {
    const DeviceState& ds = *dev_[d];
    const Extent* e = nullptr;
    switch (which) {
      case Var::params32: e = &ds.p32; break;
      case Var::momentum: e = &ds.m; break;
      case Var::variance: e = &ds.v; break;
      default: throw std::invalid_argument("read_state: not a state var");
    }
    if (e->len == 0) {
      throw std::invalid_argument("read_state: optimizer lacks that state");
    }
    self->fabric_->peek(d, *e,
                        wbytes(std::span<float>(out).subspan(ds.seg.offset,
                                                             ds.seg.len)));
  }
  return out;
}

Trace Engine::take_trace() {
  return fabric_ ? fabric_->recorder().take() : Trace{};
}

const PoolStats& Engine::pool_stats(std::uint32_t dev) const {
  return dev_.at(dev)->stats;
}

const std::vector<Tasklet>& Engine::plan(std::uint32_t dev) const {
  return dev_.at(dev)->plan;
}

const std::vector<PipelineEvent>& Engine::last_pipeline_events(
    std::uint32_t dev) const {
  return dev_.at(dev)->last_events;
}

}  // namespace nearstore

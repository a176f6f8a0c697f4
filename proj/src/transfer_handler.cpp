// Copyright (c) 2026 nearstore contributors.
// SPDX-License-Identifier: Apache-2.0
#include "nearstore/transfer_handler.hpp"

#include <algorithm>
#include <stdexcept>
#include <thread>

namespace nearstore {

std::size_t update_footprint_bytes_per_elem(OptimizerKind kind) {
  // fp32 buffers: params + grad + one or two state tensors; fp16 params out.
  const std::size_t f32_bufs = (kind == OptimizerKind::adam) ? 4 : 3;
  return f32_bufs * sizeof(float) + sizeof(half);
}

std::vector<Tasklet> plan_subgroups(std::size_t segment_len,
                                    std::size_t capacity_bytes,
                                    OptimizerKind kind) {
  const std::size_t per_elem = update_footprint_bytes_per_elem(kind);
  const std::size_t max_elems = capacity_bytes / per_elem;
  if (max_elems == 0) {
    throw std::invalid_argument(
        "plan_subgroups: capacity below the footprint of one element");
  }
  std::vector<Tasklet> out;
  std::size_t off = 0;
  while (off < segment_len) {
    const std::size_t n = std::min(max_elems, segment_len - off);
    out.push_back(Tasklet{out.size(), off, n});
    off += n;
  }
  return out;
}

std::string to_string(Var v) {
  switch (v) {
    case Var::params32: return "params32";
    case Var::momentum: return "momentum";
    case Var::variance: return "variance";
    case Var::grad: return "grad";
    case Var::params16: return "params16";
  }
  return "?";
}

std::vector<Var> state_vars(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::adam:
      return {Var::params32, Var::momentum, Var::variance};
    case OptimizerKind::sgd_momentum:
      return {Var::params32, Var::momentum};
    case OptimizerKind::adagrad:
      return {Var::params32, Var::variance};
  }
  return {};
}

void PoolStats::on_alloc(std::uint64_t bytes) {
  std::lock_guard<std::mutex> lk(mu);
  current += bytes;
  peak = std::max(peak, current);
  samples.push_back(current);
}

void PoolStats::on_dealloc(std::uint64_t bytes) {
  std::lock_guard<std::mutex> lk(mu);
  current -= bytes;
  samples.push_back(current);
}

BufferPool::BufferPool(std::size_t max_elems, OptimizerKind kind,
                       std::size_t sparse_capacity_bytes, PoolStats* stats)
    : max_elems_(max_elems), kind_(kind), stats_(stats) {
  p32_.resize(max_elems);
  g_.resize(max_elems);
  p16_.resize(max_elems);
  if (kind != OptimizerKind::adagrad) m_.resize(max_elems);
  if (kind != OptimizerKind::sgd_momentum) v_.resize(max_elems);
  sparse_.resize(sparse_capacity_bytes);
  allocated_ = (p32_.size() + g_.size() + m_.size() + v_.size()) * sizeof(float) +
               p16_.size() * sizeof(half) + sparse_.size();
  if (stats_) stats_->on_alloc(allocated_);
}

BufferPool::~BufferPool() {
  if (stats_) stats_->on_dealloc(allocated_);
}

std::span<float> BufferPool::f32(Var v) {
  switch (v) {
    case Var::params32: return p32_;
    case Var::momentum: return m_;
    case Var::variance: return v_;
    case Var::grad: return g_;
    case Var::params16: break;
  }
  throw std::invalid_argument("BufferPool::f32: not an fp32 buffer");
}

std::span<half> BufferPool::f16() { return p16_; }

std::span<std::byte> BufferPool::sparse() { return sparse_; }

BufferPool::Token& BufferPool::token(Var v) {
  return tokens_[static_cast<std::size_t>(v)];
}

std::uint64_t BufferPool::acquire(Var v, std::size_t tasklet) {
  std::unique_lock<std::mutex> lk(mu_);
  Token& t = token(v);
  cv_.wait(lk, [&] { return aborted_ || t.next_user == tasklet; });
  if (aborted_) throw PipelineAborted("buffer pool aborted");
  return t.last_op;
}

void BufferPool::release(Var v, std::size_t next_tasklet,
                         std::uint64_t last_op) {
  {
    std::lock_guard<std::mutex> lk(mu_);
    Token& t = token(v);
    t.next_user = next_tasklet;
    t.last_op = last_op;
  }
  cv_.notify_all();
}

void BufferPool::abort() {
  {
    std::lock_guard<std::mutex> lk(mu_);
    aborted_ = true;
  }
  cv_.notify_all();
}

void BufferPool::rearm() {
  std::lock_guard<std::mutex> lk(mu_);
  for (Token& t : tokens_) t.next_user = 0;
}

TraceDeps BufferPool::tail_ops() const {
  std::lock_guard<std::mutex> lk(mu_);
  TraceDeps out;
  for (const Token& t : tokens_) {
    if (t.last_op && std::find(out.begin(), out.end(), t.last_op) == out.end())
      out.push_back(t.last_op);
  }
  return out;
}

namespace {

struct EventLog {
  std::mutex mu;
  std::uint64_t seq = 0;
  std::vector<PipelineEvent> events;

  void add(std::size_t tasklet, std::string name, std::uint64_t op) {
    std::lock_guard<std::mutex> lk(mu);
    events.push_back(PipelineEvent{tasklet, std::move(name), ++seq, op});
  }
};

TraceDeps dep_of(std::uint64_t op) {
  return op ? TraceDeps{op} : TraceDeps{};
}

// Full per-tasklet body: loads, update, urgent params writeback (staging +
// fp32 state region), signal, then deferred low-priority state writebacks.
void run_tasklet(const Tasklet& t, BufferPool& pool, const PipelineIo& io,
                 EventLog& log) {
  const auto states = state_vars(pool.kind());
  std::vector<Var> load_order{Var::params32, Var::grad};
  for (Var v : states) {
    if (v != Var::params32) load_order.push_back(v);
  }

  TraceDeps load_ids;
  for (Var v : load_order) {
    const std::uint64_t token_dep = pool.acquire(v, t.index);
    const std::uint64_t id = io.load(t, v, pool, dep_of(token_dep));
    log.add(t.index, "load." + to_string(v), id);
    if (id) load_ids.push_back(id);
  }
  const std::uint64_t p16_dep = pool.acquire(Var::params16, t.index);
  TraceDeps upd_deps = load_ids;
  if (p16_dep) upd_deps.push_back(p16_dep);

  const std::uint64_t upd = io.update(t, pool, upd_deps);
  log.add(t.index, "update", upd);

  std::uint64_t stage_id = 0;
  if (io.stage) {
    stage_id = io.stage(t, pool, dep_of(upd));
    log.add(t.index, "stage", stage_id);
    if (io.on_staged) io.on_staged(t, stage_id);
  }
  const std::uint64_t p32_wb = io.store(t, Var::params32, pool, dep_of(upd),
                                        /*low_priority=*/false);
  log.add(t.index, "params_writeback", p32_wb);

  pool.release(Var::params32, t.index + 1, p32_wb);
  pool.release(Var::grad, t.index + 1, upd);
  pool.release(Var::params16, t.index + 1, upd);
  log.add(t.index, "signal", 0);

  for (Var v : states) {
    if (v == Var::params32) continue;
    const std::uint64_t wb =
        io.store(t, v, pool, dep_of(upd), /*low_priority=*/true);
    log.add(t.index, "state_writeback." + to_string(v), wb);
    pool.release(v, t.index + 1, wb);
  }
}

}  // namespace

PipelineResult run_pipeline(std::span<const Tasklet> tasklets,
                            BufferPool& pool, const PipelineIo& io,
                            const PipelineOptions& opts) {
  for (std::size_t i = 0; i < tasklets.size(); ++i) {
    if (tasklets[i].index != i) {
      throw std::invalid_argument("run_pipeline: tasklet indices must be 0..n-1");
    }
  }
  EventLog log;
  std::atomic<std::size_t> completed{0};

  if (!opts.threaded || tasklets.size() < 2) {
    // Canonical order: identical token handoffs, one thread.
    for (const Tasklet& t : tasklets) {
      run_tasklet(t, pool, io, log);
      completed.fetch_add(1);
    }
    return PipelineResult{std::move(log.events), completed.load(),
                          pool.tail_ops()};
  }

  std::mutex err_mu;
  std::exception_ptr first_error;
  auto worker = [&](std::size_t lane) {
    for (std::size_t i = lane; i < tasklets.size(); i += 2) {
      try {
        run_tasklet(tasklets[i], pool, io, log);
        completed.fetch_add(1);
      } catch (const PipelineAborted&) {
        return;
      } catch (...) {
        {
          std::lock_guard<std::mutex> lk(err_mu);
          if (!first_error) first_error = std::current_exception();
        }
        pool.abort();
        return;
      }
    }
  };
  std::thread t0(worker, 0);
  std::thread t1(worker, 1);
  t0.join();
  t1.join();
  if (first_error) std::rethrow_exception(first_error);
  return PipelineResult{std::move(log.events), completed.load(),
                        pool.tail_ops()};
}

PipelineResult naive_pipeline(std::span<const Tasklet> tasklets,
                              OptimizerKind kind, std::size_t max_elems,
                              std::size_t sparse_capacity_bytes,
                              const PipelineIo& io, PoolStats* stats) {
  EventLog log;
  std::size_t completed = 0;
  std::uint64_t prev_op = 0;  // strict chain: no transfer overlaps another
  const auto states = state_vars(kind);

  for (const Tasklet& t : tasklets) {
    BufferPool pool(max_elems, kind, sparse_capacity_bytes, stats);
    log.add(t.index, "alloc", 0);

    std::vector<Var> load_order{Var::params32, Var::grad};
    for (Var v : states) {
      if (v != Var::params32) load_order.push_back(v);
    }
    for (Var v : load_order) {
      const std::uint64_t id = io.load(t, v, pool, dep_of(prev_op));
      log.add(t.index, "load." + to_string(v), id);
      if (id) prev_op = id;
    }
    const std::uint64_t upd = io.update(t, pool, dep_of(prev_op));
    log.add(t.index, "update", upd);
    if (upd) prev_op = upd;

    if (io.stage) {
      const std::uint64_t stage_id = io.stage(t, pool, dep_of(prev_op));
      log.add(t.index, "stage", stage_id);
      if (stage_id) prev_op = stage_id;
      if (io.on_staged) io.on_staged(t, stage_id);
    }
    for (Var v : states) {
      const std::uint64_t wb =
          io.store(t, v, pool, dep_of(prev_op), /*low_priority=*/false);
      log.add(t.index, v == Var::params32 ? "params_writeback"
                                          : "state_writeback." + to_string(v),
              wb);
      if (wb) prev_op = wb;
    }
    log.add(t.index, "dealloc", 0);
    ++completed;
  }
  TraceDeps tails;
  if (prev_op) tails.push_back(prev_op);
  return PipelineResult{std::move(log.events), completed, std::move(tails)};
}

}  // namespace nearstore

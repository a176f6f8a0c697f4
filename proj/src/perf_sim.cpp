// Copyright (c) 2026 nearstore contributors.
// SPDX-License-Identifier: Apache-2.0
#include "nearstore/perf_sim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <queue>
#include <stdexcept>

namespace nearstore {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct SimOp {
  const TraceOp* op = nullptr;
  std::size_t unmet = 0;
  std::vector<std::size_t> children;
  double start = -1.0;
  double end = -1.0;
  // Fluid state (host-edge ops only).
  bool fluid = false;
  double remaining = 0.0;
  double rate = 0.0;
  double cap = 0.0;
  std::vector<std::size_t> groups;
  // FIFO state.
  std::string resource;
  double service = 0.0;
};

struct QueuedArrival {
  double avail = 0.0;
  std::uint64_t op_id = 0;
  std::size_t idx = 0;

  bool operator>(const QueuedArrival& o) const {
    if (avail != o.avail) return avail > o.avail;
    return op_id > o.op_id;
  }
};

struct FifoServer {
  bool busy = false;
  std::size_t current = 0;
  std::priority_queue<QueuedArrival, std::vector<QueuedArrival>,
                      std::greater<QueuedArrival>>
      queue;
};

enum class EvKind { fifo_done, fluid_join, fluid_check };

struct Event {
  double time = 0.0;
  std::uint64_t seq = 0;
  EvKind kind = EvKind::fifo_done;
  std::size_t idx = 0;       // op index for fifo_done/fluid_join
  std::string resource;      // fifo_done
  std::uint64_t version = 0; // fluid_check

  bool operator>(const Event& o) const {
    if (time != o.time) return time > o.time;
    return seq > o.seq;
  }
};

class Simulator {
 public:
  Simulator(const Trace& trace, const FabricTopology& topo)
      : trace_(trace), topo_(topo) {
    topo_.validate();
    build();
  }

  SimReport run() {
    for (std::size_t i = 0; i < ops_.size(); ++i) {
      if (ops_[i].unmet == 0) on_ready(i, 0.0);
    }
    while (!events_.empty()) {
      Event ev = events_.top();
      events_.pop();
      now_ = ev.time;
      switch (ev.kind) {
        case EvKind::fifo_done: {
          FifoServer& srv = servers_[ev.resource];
          srv.busy = false;
          complete(ev.idx);
          kick(ev.resource);
          break;
        }
        case EvKind::fluid_join: {
          advance_fluid();
          SimOp& s = ops_[ev.idx];
          s.remaining = static_cast<double>(s.op->bytes);
          active_.push_back(ev.idx);
          reshare();
          break;
        }
        case EvKind::fluid_check: {
          if (ev.version != fluid_version_) break;
          advance_fluid();
          settle_fluid();
          break;
        }
      }
    }
    if (completed_ != ops_.size()) {
      throw std::logic_error("simulate: dependency cycle or stuck op");
    }
    return finish();
  }

 private:
  void build() {
    ops_.resize(trace_.size());
    for (std::size_t i = 0; i < trace_.size(); ++i) {
      index_[trace_[i].id] = i;
    }
    for (std::size_t i = 0; i < trace_.size(); ++i) {
      const TraceOp& op = trace_[i];
      SimOp& s = ops_[i];
      s.op = &op;
      for (std::uint64_t dep : op.deps) {
        // Deps outside the trace window (e.g. init-phase ops discarded
        // before simulating an iteration) count as already complete.
        auto it = index_.find(dep);
        if (it == index_.end()) continue;
        ops_[it->second].children.push_back(i);
        ++s.unmet;
      }
      classify(s);
    }
  }

  double dir_bw(std::uint32_t dev, bool is_read) const {
    const DeviceDesc& d = topo_.devices.at(dev);
    return is_read ? d.read_bw : d.write_bw;
  }

  void classify(SimOp& s) {
    const TraceOp& op = *s.op;
    const SimParams& p = topo_.sim;
    switch (op.kind) {
      case OpKind::host_read:
      case OpKind::host_write: {
        s.fluid = true;
        const bool rd = op.kind == OpKind::host_read;
        double sum = 0.0;
        for (std::uint32_t d : op.devices) sum += dir_bw(d, rd);
        s.cap = op.devices.empty() ? topo_.host_link_bw : sum;
        for (std::size_t g = 0; g < topo_.expansion.size(); ++g) {
          const auto& grp = topo_.expansion[g].devices;
          const bool touches = std::any_of(
              op.devices.begin(), op.devices.end(), [&](std::uint32_t d) {
                return std::find(grp.begin(), grp.end(), d) != grp.end();
              });
          if (touches) s.groups.push_back(g);
        }
        return;
      }
      case OpKind::p2p_read:
      case OpKind::p2p_write: {
        const std::uint32_t dev = op.devices.at(0);
        const DeviceDesc& d = topo_.devices.at(dev);
        const bool rd = op.kind == OpKind::p2p_read;
        const double bw = std::min(d.internal_link_bw, rd ? d.read_bw : d.write_bw);
        s.resource = "dev" + std::to_string(dev) + (rd ? ".int.read" : ".int.write");
        s.service = static_cast<double>(op.bytes) / bw;
        return;
      }
      case OpKind::accel_update:
      case OpKind::accel_decomp: {
        const std::uint32_t dev = op.devices.at(0);
        const DeviceDesc& d = topo_.devices.at(dev);
        const double bw = op.kind == OpKind::accel_update ? d.accel_update_bw
                                                          : d.accel_decomp_bw;
        s.resource = "dev" + std::to_string(dev) + ".accel";
        s.service = static_cast<double>(op.bytes) / bw;
        return;
      }
      case OpKind::gpu_forward:
        s.resource = "gpu";
        s.service = static_cast<double>(op.bytes) * p.fw_s_per_param;
        return;
      case OpKind::gpu_backward:
        s.resource = "gpu";
        s.service = static_cast<double>(op.bytes) * p.bw_s_per_param;
        return;
      case OpKind::gpu_compress:
        s.resource = "gpu";
        s.service = static_cast<double>(op.bytes) / p.gpu_compress_bw;
        return;
      case OpKind::cpu_update:
        s.resource = "cpu";
        s.service = static_cast<double>(op.bytes) / p.cpu_update_bw;
        return;
    }
    throw std::logic_error("simulate: unhandled op kind");
  }

  void schedule(double time, EvKind kind, std::size_t idx,
                std::string resource = {}, std::uint64_t version = 0) {
    events_.push(Event{time, ++event_seq_, kind, idx, std::move(resource), version});
  }

  void on_ready(std::size_t idx, double t) {
    SimOp& s = ops_[idx];
    s.start = t;
    if (s.fluid) {
      schedule(t + topo_.sim.per_op_latency, EvKind::fluid_join, idx);
    } else {
      FifoServer& srv = servers_[s.resource];
      srv.queue.push(QueuedArrival{t, s.op->id, idx});
      kick(s.resource);
    }
  }

  void kick(const std::string& resource) {
    FifoServer& srv = servers_[resource];
    if (srv.busy || srv.queue.empty()) return;
    const QueuedArrival next = srv.queue.top();
    srv.queue.pop();
    srv.busy = true;
    srv.current = next.idx;
    SimOp& s = ops_[next.idx];
    const double dur = topo_.sim.per_op_latency + s.service;
    busy_[resource] += dur;
    schedule(now_ + dur, EvKind::fifo_done, next.idx, resource);
  }

  void advance_fluid() {
    if (!active_.empty() && now_ > fluid_last_t_) {
      busy_["host"] += now_ - fluid_last_t_;
      for (std::size_t idx : active_) {
        SimOp& s = ops_[idx];
        s.remaining = std::max(0.0, s.remaining - s.rate * (now_ - fluid_last_t_));
      }
    }
    fluid_last_t_ = now_;
  }

  // Progressive-filling max-min allocation under the root link, per-op caps
  // and expansion-group uplinks; then schedule the next completion check.
  void reshare() {
    ++fluid_version_;
    settle_fluid();
  }

  void settle_fluid() {
    // Complete anything that has drained.
    for (std::size_t i = 0; i < active_.size();) {
      SimOp& s = ops_[active_[i]];
      const double tol = std::max(1e-6, 1e-12 * static_cast<double>(s.op->bytes));
      if (s.remaining <= tol) {
        const std::size_t idx = active_[i];
        active_[i] = active_.back();
        active_.pop_back();
        complete(idx);
      } else {
        ++i;
      }
    }
    ++fluid_version_;
    if (active_.empty()) return;

    const std::size_t n = active_.size();
    std::vector<double> r(n, 0.0);
    std::vector<bool> frozen(n, false);
    const double scale = topo_.host_link_bw;
    const double eps = 1e-9 * scale;
    std::size_t left = n;
    while (left > 0) {
      double grow = kInf;
      for (std::size_t i = 0; i < n; ++i) {
        if (!frozen[i]) grow = std::min(grow, ops_[active_[i]].cap - r[i]);
      }
      double used = 0.0;
      for (double v : r) used += v;
      grow = std::min(grow, (topo_.host_link_bw - used) / static_cast<double>(left));
      for (std::size_t g = 0; g < topo_.expansion.size(); ++g) {
        double gu = 0.0;
        std::size_t cnt = 0;
        for (std::size_t i = 0; i < n; ++i) {
          const auto& gs = ops_[active_[i]].groups;
          if (std::find(gs.begin(), gs.end(), g) == gs.end()) continue;
          gu += r[i];
          if (!frozen[i]) ++cnt;
        }
        if (cnt > 0) {
          grow = std::min(grow, (topo_.expansion[g].uplink_bw - gu) /
                                    static_cast<double>(cnt));
        }
      }
      if (grow < 0.0) grow = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (!frozen[i]) r[i] += grow;
      }
      // Freeze ops at their own cap or inside a saturated constraint.
      std::size_t newly = 0;
      auto freeze = [&](std::size_t i) {
        if (!frozen[i]) {
          frozen[i] = true;
          ++newly;
        }
      };
      for (std::size_t i = 0; i < n; ++i) {
        if (!frozen[i] && ops_[active_[i]].cap - r[i] <= eps) freeze(i);
      }
      used = 0.0;
      for (double v : r) used += v;
      if (topo_.host_link_bw - used <= eps) {
        for (std::size_t i = 0; i < n; ++i) freeze(i);
      }
      for (std::size_t g = 0; g < topo_.expansion.size(); ++g) {
        double gu = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const auto& gs = ops_[active_[i]].groups;
          if (std::find(gs.begin(), gs.end(), g) != gs.end()) gu += r[i];
        }
        if (topo_.expansion[g].uplink_bw - gu <= eps) {
          for (std::size_t i = 0; i < n; ++i) {
            const auto& gs = ops_[active_[i]].groups;
            if (std::find(gs.begin(), gs.end(), g) != gs.end()) freeze(i);
          }
        }
      }
      left -= std::min(left, newly);
      if (newly == 0) break;
    }

    double next = kInf;
    for (std::size_t i = 0; i < n; ++i) {
      SimOp& s = ops_[active_[i]];
      s.rate = r[i];
      if (s.rate > 0.0) next = std::min(next, s.remaining / s.rate);
    }
    if (!std::isfinite(next)) {
      throw std::logic_error("simulate: host edge stalled with zero rate");
    }
    schedule(now_ + next, EvKind::fluid_check, 0, {}, fluid_version_);
  }

  void complete(std::size_t idx) {
    SimOp& s = ops_[idx];
    s.end = now_;
    ++completed_;
    for (std::size_t c : s.children) {
      if (--ops_[c].unmet == 0) on_ready(c, now_);
    }
  }

  SimReport finish() {
    SimReport rep;
    rep.phase_begin.fill(kInf);
    rep.phase_end.fill(0.0);
    rep.timeline.reserve(ops_.size());
    for (const SimOp& s : ops_) {
      const TraceOp& op = *s.op;
      TimelineEvent ev;
      ev.op_id = op.id;
      ev.kind = op.kind;
      ev.phase = op.phase;
      ev.resource = s.fluid ? "host" : s.resource;
      ev.start = s.start;
      ev.end = s.end;
      ev.work = op.bytes;
      ev.devices = op.devices;
      ev.tasklet = op.tasklet;
      ev.low_priority = op.low_priority;
      rep.timeline.push_back(std::move(ev));
      rep.makespan = std::max(rep.makespan, s.end);
      const auto p = static_cast<std::size_t>(op.phase);
      rep.phase_begin[p] = std::min(rep.phase_begin[p], s.start);
      rep.phase_end[p] = std::max(rep.phase_end[p], s.end);
    }
    for (std::size_t p = 0; p < kPhaseCount; ++p) {
      if (rep.phase_end[p] > 0.0 || std::isfinite(rep.phase_begin[p])) {
        rep.phase_span[p] = std::max(0.0, rep.phase_end[p] - rep.phase_begin[p]);
      }
      if (!std::isfinite(rep.phase_begin[p])) rep.phase_begin[p] = 0.0;
    }
    std::sort(rep.timeline.begin(), rep.timeline.end(),
              [](const TimelineEvent& a, const TimelineEvent& b) {
                if (a.start != b.start) return a.start < b.start;
                return a.op_id < b.op_id;
              });
    rep.resource_busy = busy_;
    return rep;
  }

  const Trace& trace_;
  FabricTopology topo_;
  std::vector<SimOp> ops_;
  std::unordered_map<std::uint64_t, std::size_t> index_;
  std::map<std::string, FifoServer> servers_;
  std::map<std::string, double> busy_;
  std::priority_queue<Event, std::vector<Event>, std::greater<Event>> events_;
  std::vector<std::size_t> active_;
  double now_ = 0.0;
  double fluid_last_t_ = 0.0;
  std::uint64_t fluid_version_ = 0;
  std::uint64_t event_seq_ = 0;
  std::size_t completed_ = 0;
};

}  // namespace

const TimelineEvent* SimReport::find(std::uint64_t op_id) const {
  for (const TimelineEvent& ev : timeline) {
    if (ev.op_id == op_id) return &ev;
  }
  return nullptr;
}

SimReport simulate(const Trace& trace, const FabricTopology& topo) {
  return Simulator(trace, topo).run();
}

}  // namespace nearstore

// Copyright (c) 2026 nearstore contributors.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "nearstore/fabric.hpp"
#include "nearstore/trace.hpp"

namespace nearstore {

// One simulated op occupancy. `start` is when setup latency begins; the
// transfer itself runs from start + per_op_latency to end.
struct TimelineEvent {
  std::uint64_t op_id = 0;
  OpKind kind = OpKind::host_read;
  Phase phase = Phase::init;
  std::string resource;
  double start = 0.0;
  double end = 0.0;
  std::uint64_t work = 0;
  std::vector<std::uint32_t> devices;
  std::int64_t tasklet = -1;
  bool low_priority = false;
};

struct SimReport {
  double makespan = 0.0;
  // Span (first start to last end) of each phase's ops; 0 if the phase is empty.
  std::array<double, kPhaseCount> phase_span{};
  std::array<double, kPhaseCount> phase_begin{};
  std::array<double, kPhaseCount> phase_end{};
  std::vector<TimelineEvent> timeline;
  // Total service time per resource (setup latency included).
  std::map<std::string, double> resource_busy;

  const TimelineEvent* find(std::uint64_t op_id) const;
};

// Replays a recorded trace against the topology's capacity model.
//
// Host-edge transfers share the root link with max-min fairness; each op is
// additionally capped by the summed directional bandwidth of the devices it
// stripes over and by any expansion-group uplink it crosses. Device-internal
// transfers, accelerator work, GPU work and host CPU work each queue FIFO on
// their resource (internal links are full duplex: independent read and write
// servers). Dependencies gate readiness; priority is whatever order ops were
// enqueued in, with no preemption.
SimReport simulate(const Trace& trace, const FabricTopology& topo);

}  // namespace nearstore

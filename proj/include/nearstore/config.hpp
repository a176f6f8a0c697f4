// Copyright (c) 2026 nearstore contributors.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nearstore/engine.hpp"
#include "nearstore/perf_sim.hpp"

namespace nearstore {

// One CLI-level experiment: an engine configuration plus run length and
// report destinations.
struct ExperimentConfig {
  EngineConfig engine;
  std::size_t steps = 10;
  bool simulate = false;  // also replay the step trace through the simulator
  std::filesystem::path out_dir = "out";
};

// JSON loaders. Unknown keys are errors (typos must not silently pass).
// Both throw std::invalid_argument on malformed content and
// std::runtime_error when a file cannot be read.
FabricTopology topology_from_json(const std::string& text);
FabricTopology load_topology(const std::filesystem::path& file);

// `base_dir` resolves a relative "topology" file reference.
ExperimentConfig experiment_from_json(const std::string& text,
                                      const std::filesystem::path& base_dir);
ExperimentConfig load_experiment(const std::filesystem::path& file);

struct ExperimentResult {
  std::vector<IterationReport> steps;
  Trace trace;  // training-step ops only; init-phase ops are discarded
  std::optional<SimReport> sim;
  double final_loss = 0.0;  // 0 in dry runs
  // Last step's per-device transfer-handler event logs (su_o / su_o_c).
  std::vector<std::vector<PipelineEvent>> pipeline_events;
};

// Builds the engine, runs `steps` iterations and collects the trace
// (simulated when requested and the mode has a fabric).
ExperimentResult run_experiment(const ExperimentConfig& cfg);

// CSV emitters. Doubles are printed with %.17g so identical runs produce
// byte-identical files.
void write_iterations_csv(const std::filesystem::path& file,
                          std::span<const IterationReport> steps);
void write_summary_csv(const std::filesystem::path& file,
                       const ExperimentConfig& cfg,
                       const ExperimentResult& result);
void write_timeline_csv(const std::filesystem::path& file,
                        const SimReport& sim);
void write_breakdown_csv(const std::filesystem::path& file,
                         const SimReport& sim);
// Columns: tasklet, event, logical_time, bytes (bytes looked up from the
// trace; pure markers carry 0).
void write_pipeline_events_csv(const std::filesystem::path& file,
                               std::span<const PipelineEvent> events,
                               const Trace& trace);

}  // namespace nearstore

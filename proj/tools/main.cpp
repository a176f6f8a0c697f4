// Copyright (c) 2026 nearstore contributors.
// SPDX-License-Identifier: Apache-2.0
//
// nearstore CLI: train (run one experiment and emit CSV reports), sweep
// (grid over device count / mode / compression ratio, simulated timings),
// verify (conformance checks).
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nearstore/config.hpp"
#include "nearstore/verify.hpp"

namespace {

using namespace nearstore;

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double phase_seconds(const SimReport& sim, Phase p) {
  return sim.phase_span[static_cast<std::size_t>(p)];
}

int cmd_train(const ExperimentConfig& cfg) {
  cfg.engine.validate();
  const ExperimentResult result = run_experiment(cfg);

  std::filesystem::create_directories(cfg.out_dir);
  std::vector<std::filesystem::path> written;
  const auto steps_csv = cfg.out_dir / "steps.csv";
  write_iterations_csv(steps_csv, result.steps);
  written.push_back(steps_csv);
  const auto summary_csv = cfg.out_dir / "summary.csv";
  write_summary_csv(summary_csv, cfg, result);
  written.push_back(summary_csv);
  if (result.sim) {
    const auto timeline_csv = cfg.out_dir / "timeline.csv";
    write_timeline_csv(timeline_csv, *result.sim);
    written.push_back(timeline_csv);
    const auto breakdown_csv = cfg.out_dir / "breakdown.csv";
    write_breakdown_csv(breakdown_csv, *result.sim);
    written.push_back(breakdown_csv);
  }
  for (std::size_t d = 0; d < result.pipeline_events.size(); ++d) {
    const auto f =
        cfg.out_dir / ("pipeline_events_dev" + std::to_string(d) + ".csv");
    write_pipeline_events_csv(f, result.pipeline_events[d], result.trace);
    written.push_back(f);
  }

  DirBytes host{}, internal{};
  for (const IterationReport& r : result.steps) {
    host.read += r.delta.host_total().read;
    host.write += r.delta.host_total().write;
    internal.read += r.delta.internal_total().read;
    internal.write += r.delta.internal_total().write;
  }
  std::cout << "mode=" << to_string(cfg.engine.mode)
            << " devices=" << cfg.engine.device_count()
            << " steps=" << result.steps.size();
  if (!cfg.engine.dry) {
    std::cout << " final_loss=" << fmt_double(result.final_loss);
  }
  std::cout << "\nhost_edge_bytes read=" << host.read
            << " write=" << host.write
            << "\ninternal_bytes read=" << internal.read
            << " write=" << internal.write << "\n";
  if (result.sim) {
    std::cout << "simulated_iteration_s="
              << fmt_double(result.sim->makespan / std::max<std::size_t>(
                                                       1, result.steps.size()))
              << " (total " << fmt_double(result.sim->makespan) << ")\n";
  }
  for (const auto& f : written) std::cout << "wrote " << f.string() << "\n";
  return 0;
}

struct SweepSpec {
  std::vector<std::string> modes{"base", "su", "su_o", "su_o_c"};
  std::vector<std::size_t> devices{1, 2, 4, 6, 8, 10};
  std::vector<double> ratios{2.0, 10.0};
  ExperimentConfig base;  // model/optimizer/budget template
};

int cmd_sweep(const SweepSpec& spec) {
  struct Row {
    std::string mode;
    double pct;
    std::size_t devices;
    SimReport sim;
  };
  std::vector<Row> rows;
  for (const std::string& mode_name : spec.modes) {
    const Mode mode = mode_from_string(mode_name);
    std::vector<double> ratios{0.0};
    if (mode == Mode::su_o_c) ratios = spec.ratios;
    for (const double pct : ratios) {
      for (const std::size_t ndev : spec.devices) {
        ExperimentConfig cfg = spec.base;
        cfg.engine.mode = mode;
        cfg.engine.devices = ndev;
        cfg.engine.compression_pct = pct;
        cfg.engine.dry = true;
        cfg.engine.deterministic = true;
        cfg.steps = 1;
        cfg.simulate = true;
        const ExperimentResult r = run_experiment(cfg);
        rows.push_back(Row{mode_name, pct, ndev, *r.sim});
        std::cout << "ran mode=" << mode_name << " pct=" << pct
                  << " devices=" << ndev
                  << " iteration_s=" << fmt_double(r.sim->makespan) << "\n";
      }
    }
  }

  std::filesystem::create_directories(spec.base.out_dir);
  const auto file = spec.base.out_dir / "sweep.csv";
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << "mode,compression_pct,devices,iteration_s,forward_s,backward_s,"
         "update_s,update_fraction,speedup\n";
  // Speedup normalizes each (mode, ratio) series to its smallest device
  // count entry.
  std::map<std::pair<std::string, double>, double> ref;
  for (const Row& r : rows) {
    ref.emplace(std::make_pair(r.mode, r.pct), r.sim.makespan);
  }
  for (const Row& r : rows) {
    const double t = r.sim.makespan;
    const double up = phase_seconds(r.sim, Phase::update);
    out << r.mode << ',' << fmt_double(r.pct) << ',' << r.devices << ','
        << fmt_double(t) << ','
        << fmt_double(phase_seconds(r.sim, Phase::forward)) << ','
        << fmt_double(phase_seconds(r.sim, Phase::backward)) << ','
        << fmt_double(up) << ',' << fmt_double(t > 0 ? up / t : 0.0) << ','
        << fmt_double(ref.at(std::make_pair(r.mode, r.pct)) / t) << '\n';
  }
  std::cout << "wrote " << file.string() << "\n";
  return 0;
}

int cmd_verify(const std::filesystem::path& scratch) {
  const auto results = run_conformance_checks(scratch);
  std::size_t width = 0;
  for (const CheckResult& r : results) width = std::max(width, r.name.size());
  bool all = true;
  for (const CheckResult& r : results) {
    all = all && r.passed;
    std::cout << (r.passed ? "[PASS] " : "[FAIL] ") << r.name
              << std::string(width - r.name.size() + 2, ' ') << r.detail
              << "\n";
  }
  std::cout << (all ? "conformance: all checks passed\n"
                    : "conformance: FAILURES above\n");
  return all ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"storage-offloaded optimizer training testbed"};
  app.require_subcommand(1);

  // --- train ---
  auto* train = app.add_subcommand("train", "run one experiment, emit CSVs");
  std::string config_file, mode = "mem", optimizer, topology_file;
  std::string out_dir, data_dir;
  std::size_t devices = 0, steps = 0, batch = 0, input_dim = 0, hidden_dim = 0;
  std::uint64_t seed = 0, stripe = 0, chunk = 0, budget = 0;
  double lr = 0, sigma = 0, pct = 0;
  float max_norm = 0, loss_scale = 0;
  bool error_feedback = false, deterministic = false, dry = false,
       simulate = false;
  train->add_option("--config", config_file, "experiment JSON file")
      ->check(CLI::ExistingFile);
  train->add_option("--mode", mode, "mem|base|su|su_o|su_o_c");
  train->add_option("--optimizer", optimizer, "adam|sgd_momentum|adagrad");
  train->add_option("--lr", lr, "learning rate");
  train->add_option("--devices", devices, "device count");
  train->add_option("--steps", steps, "training steps");
  train->add_option("--seed", seed, "RNG seed");
  train->add_option("--batch-size", batch, "samples per batch");
  train->add_option("--input-dim", input_dim, "model input width");
  train->add_option("--hidden-dim", hidden_dim, "model hidden width");
  train->add_option("--noise-sigma", sigma, "teacher label noise");
  train->add_option("--max-grad-norm", max_norm, "clipping threshold");
  train->add_option("--loss-scale", loss_scale, "initial loss scale");
  train->add_option("--compression-pct", pct,
                    "top-k wire ratio, required for su_o_c");
  train->add_flag("--error-feedback", error_feedback,
                  "accumulate dropped gradient residuals");
  train->add_flag("--deterministic", deterministic,
                  "single-threaded canonical order");
  train->add_flag("--dry", dry, "trace and ledger only, no payload data");
  train->add_flag("--simulate", simulate, "replay the trace in the simulator");
  train->add_option("--topology", topology_file, "topology JSON file")
      ->check(CLI::ExistingFile);
  train->add_option("--out", out_dir, "report directory")
      ->envname("NEARSTORE_OUT");
  train->add_option("--data-dir", data_dir, "backing file directory");
  train->add_option("--stripe-size", stripe, "RAID0 stripe bytes");
  train->add_option("--chunk-bytes", chunk, "host update chunk bytes");
  train->add_option("--subgroup-budget", budget, "device buffer budget bytes");

  // --- sweep ---
  auto* sweep = app.add_subcommand(
      "sweep", "device-count grid per mode, simulated timings");
  SweepSpec sweep_spec;
  sweep_spec.base.engine.model = MlpSpec{1023, 32768};
  sweep_spec.base.engine.optimizer.kind = OptimizerKind::adam;
  sweep_spec.base.out_dir = "out";
  std::string sweep_out;
  sweep->add_option("--modes", sweep_spec.modes, "modes to sweep");
  sweep->add_option("--devices", sweep_spec.devices, "device counts");
  sweep->add_option("--ratios", sweep_spec.ratios,
                    "compression percentages for su_o_c");
  std::size_t sweep_input = 0, sweep_hidden = 0;
  std::uint64_t sweep_budget = 0, sweep_chunk = 0;
  sweep->add_option("--input-dim", sweep_input, "model input width");
  sweep->add_option("--hidden-dim", sweep_hidden, "model hidden width");
  sweep->add_option("--subgroup-budget", sweep_budget,
                    "device buffer budget bytes");
  sweep->add_option("--chunk-bytes", sweep_chunk, "host update chunk bytes");
  sweep->add_option("--out", sweep_out, "report directory")
      ->envname("NEARSTORE_OUT");

  // --- verify ---
  auto* verify = app.add_subcommand("verify", "run conformance checks");
  std::string scratch = "nearstore_verify";
  verify->add_option("--scratch", scratch, "scratch directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      ExperimentConfig cfg;
      if (train->count("--config")) cfg = load_experiment(config_file);
      if (train->count("--compression-pct") && !(pct > 0.0 && pct <= 100.0)) {
        throw std::invalid_argument(
            "train: --compression-pct must be in (0,100]");
      }
      EngineConfig& e = cfg.engine;
      if (train->count("--mode")) e.mode = mode_from_string(mode);
      if (train->count("--optimizer")) {
        e.optimizer.kind = optimizer_kind_from_string(optimizer);
      }
      if (train->count("--lr")) e.optimizer.lr = static_cast<float>(lr);
      if (train->count("--devices")) e.devices = devices;
      if (train->count("--steps")) cfg.steps = steps;
      if (train->count("--seed")) e.seed = seed;
      if (train->count("--batch-size")) e.batch_size = batch;
      if (train->count("--input-dim")) e.model.input_dim = input_dim;
      if (train->count("--hidden-dim")) e.model.hidden_dim = hidden_dim;
      if (train->count("--noise-sigma")) e.noise_sigma = sigma;
      if (train->count("--max-grad-norm")) e.max_grad_norm = max_norm;
      if (train->count("--loss-scale")) e.scaler.scale = loss_scale;
      if (train->count("--compression-pct")) e.compression_pct = pct;
      if (error_feedback) e.error_feedback = true;
      if (deterministic) e.deterministic = true;
      if (dry) e.dry = true;
      if (simulate) cfg.simulate = true;
      if (train->count("--topology")) e.topology = load_topology(topology_file);
      if (train->count("--out")) cfg.out_dir = out_dir;
      if (train->count("--data-dir")) e.data_dir = data_dir;
      if (train->count("--stripe-size")) e.stripe_size = stripe;
      if (train->count("--chunk-bytes")) e.chunk_bytes = chunk;
      if (train->count("--subgroup-budget")) e.subgroup_budget = budget;
      return cmd_train(cfg);
    }
    if (sweep->parsed()) {
      if (sweep->count("--input-dim")) {
        sweep_spec.base.engine.model.input_dim = sweep_input;
      }
      if (sweep->count("--hidden-dim")) {
        sweep_spec.base.engine.model.hidden_dim = sweep_hidden;
      }
      if (sweep->count("--subgroup-budget")) {
        sweep_spec.base.engine.subgroup_budget = sweep_budget;
      }
      if (sweep->count("--chunk-bytes")) {
        sweep_spec.base.engine.chunk_bytes = sweep_chunk;
      }
      if (sweep->count("--out")) sweep_spec.base.out_dir = sweep_out;
      return cmd_sweep(sweep_spec);
    }
    return cmd_verify(scratch);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

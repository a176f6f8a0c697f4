// Copyright (c) 2026 nearstore contributors.
// SPDX-License-Identifier: Apache-2.0
#include "nearstore/config.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace nearstore {

namespace {

using nlohmann::json;

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string read_file(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + file.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json parse(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("bad JSON: ") + e.what());
  }
}

void check_keys(const json& j, const std::set<std::string>& allowed,
                const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + ": expected object");
  for (const auto& item : j.items()) {
    if (!allowed.count(item.key())) {
      throw std::invalid_argument(where + ": unknown key '" + item.key() +
                                  "'");
    }
  }
}

DeviceDesc device_from_json(const json& j) {
  check_keys(j,
             {"kind", "read_bw", "write_bw", "internal_link_bw",
              "accel_update_bw", "accel_decomp_bw", "accel_mem_capacity"},
             "device");
  DeviceDesc d;
  if (j.contains("kind")) {
    d.kind = device_kind_from_string(j.at("kind").get<std::string>());
  }
  d.read_bw = j.value("read_bw", d.read_bw);
  d.write_bw = j.value("write_bw", d.write_bw);
  d.internal_link_bw = j.value("internal_link_bw", d.internal_link_bw);
  d.accel_update_bw = j.value("accel_update_bw", d.accel_update_bw);
  d.accel_decomp_bw = j.value("accel_decomp_bw", d.accel_decomp_bw);
  d.accel_mem_capacity = j.value("accel_mem_capacity", d.accel_mem_capacity);
  return d;
}

FabricTopology topology_from(const json& j) {
  check_keys(j, {"host_link_bw", "devices", "device", "expansion", "sim"},
             "topology");
  FabricTopology t;
  t.host_link_bw = j.value("host_link_bw", t.host_link_bw);
  if (j.contains("sim")) {
    const json& s = j.at("sim");
    check_keys(s,
               {"per_op_latency", "fw_s_per_param", "bw_s_per_param",
                "cpu_update_bw", "gpu_compress_bw"},
               "sim");
    t.sim.per_op_latency = s.value("per_op_latency", t.sim.per_op_latency);
    t.sim.fw_s_per_param = s.value("fw_s_per_param", t.sim.fw_s_per_param);
    t.sim.bw_s_per_param = s.value("bw_s_per_param", t.sim.bw_s_per_param);
    t.sim.cpu_update_bw = s.value("cpu_update_bw", t.sim.cpu_update_bw);
    t.sim.gpu_compress_bw = s.value("gpu_compress_bw", t.sim.gpu_compress_bw);
  }
  if (!j.contains("devices")) {
    throw std::invalid_argument("topology: missing 'devices'");
  }
  const json& devs = j.at("devices");
  if (devs.is_number_unsigned() || devs.is_number_integer()) {
    DeviceDesc tmpl;
    if (j.contains("device")) tmpl = device_from_json(j.at("device"));
    t.devices.assign(devs.get<std::size_t>(), tmpl);
  } else if (devs.is_array()) {
    for (const json& d : devs) t.devices.push_back(device_from_json(d));
  } else {
    throw std::invalid_argument("topology: 'devices' must be count or list");
  }
  if (j.contains("expansion")) {
    for (const json& g : j.at("expansion")) {
      check_keys(g, {"uplink_bw", "devices"}, "expansion group");
      ExpansionGroup grp;
      grp.uplink_bw = g.value("uplink_bw", grp.uplink_bw);
      for (const json& d : g.at("devices")) {
        grp.devices.push_back(d.get<std::uint32_t>());
      }
      t.expansion.push_back(std::move(grp));
    }
  }
  t.validate();
  return t;
}

}  // namespace

FabricTopology topology_from_json(const std::string& text) {
  return topology_from(parse(text));
}

FabricTopology load_topology(const std::filesystem::path& file) {
  return topology_from_json(read_file(file));
}

ExperimentConfig experiment_from_json(const std::string& text,
                                      const std::filesystem::path& base_dir) {
  const json j = parse(text);
  check_keys(j,
             {"mode", "optimizer", "model", "batch_size", "noise_sigma",
              "seed", "max_grad_norm", "loss_scale", "growth_interval",
              "compression_pct", "error_feedback", "devices", "topology",
              "stripe_size", "chunk_bytes", "subgroup_budget", "deterministic",
              "dry", "data_dir", "steps", "simulate", "out_dir"},
             "experiment");
  ExperimentConfig cfg;
  EngineConfig& e = cfg.engine;
  if (j.contains("mode")) {
    e.mode = mode_from_string(j.at("mode").get<std::string>());
  }
  if (j.contains("optimizer")) {
    const json& o = j.at("optimizer");
    check_keys(o,
               {"kind", "lr", "beta1", "beta2", "eps", "momentum_coef",
                "bias_correction"},
               "optimizer");
    if (o.contains("kind")) {
      e.optimizer.kind =
          optimizer_kind_from_string(o.at("kind").get<std::string>());
    }
    e.optimizer.lr = o.value("lr", e.optimizer.lr);
    e.optimizer.beta1 = o.value("beta1", e.optimizer.beta1);
    e.optimizer.beta2 = o.value("beta2", e.optimizer.beta2);
    e.optimizer.eps = o.value("eps", e.optimizer.eps);
    e.optimizer.momentum_coef =
        o.value("momentum_coef", e.optimizer.momentum_coef);
    e.optimizer.bias_correction =
        o.value("bias_correction", e.optimizer.bias_correction);
  }
  if (j.contains("model")) {
    const json& m = j.at("model");
    check_keys(m, {"input_dim", "hidden_dim"}, "model");
    e.model.input_dim = m.value("input_dim", e.model.input_dim);
    e.model.hidden_dim = m.value("hidden_dim", e.model.hidden_dim);
  }
  e.batch_size = j.value("batch_size", e.batch_size);
  e.noise_sigma = j.value("noise_sigma", e.noise_sigma);
  e.seed = j.value("seed", e.seed);
  e.max_grad_norm = j.value("max_grad_norm", e.max_grad_norm);
  e.scaler.scale = j.value("loss_scale", e.scaler.scale);
  e.scaler.growth_interval =
      j.value("growth_interval", e.scaler.growth_interval);
  e.compression_pct = j.value("compression_pct", e.compression_pct);
  if (e.compression_pct < 0.0 || e.compression_pct > 100.0) {
    throw std::invalid_argument(
        "experiment: compression_pct must be in (0,100]");
  }
  e.error_feedback = j.value("error_feedback", e.error_feedback);
  e.devices = j.value("devices", e.devices);
  if (j.contains("topology")) {
    std::filesystem::path tf = j.at("topology").get<std::string>();
    if (tf.is_relative()) tf = base_dir / tf;
    e.topology = load_topology(tf);
  }
  e.stripe_size = j.value("stripe_size", e.stripe_size);
  e.chunk_bytes = j.value("chunk_bytes", e.chunk_bytes);
  e.subgroup_budget = j.value("subgroup_budget", e.subgroup_budget);
  e.deterministic = j.value("deterministic", e.deterministic);
  e.dry = j.value("dry", e.dry);
  if (j.contains("data_dir")) {
    e.data_dir = j.at("data_dir").get<std::string>();
  }
  cfg.steps = j.value("steps", cfg.steps);
  cfg.simulate = j.value("simulate", cfg.simulate);
  if (j.contains("out_dir")) {
    cfg.out_dir = j.at("out_dir").get<std::string>();
  }
  return cfg;
}

ExperimentConfig load_experiment(const std::filesystem::path& file) {
  return experiment_from_json(read_file(file), file.parent_path());
}

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  Engine engine(cfg.engine);
  engine.take_trace();  // drop init-phase ops
  ExperimentResult result;
  result.steps = engine.run(cfg.steps);
  result.trace = engine.take_trace();
  if (cfg.simulate && engine.fabric()) {
    result.sim = simulate(result.trace, engine.topology());
  }
  if (!cfg.engine.dry && cfg.steps > 0) result.final_loss = engine.eval_loss();
  if (cfg.engine.mode == Mode::su_o || cfg.engine.mode == Mode::su_o_c) {
    for (std::uint32_t d = 0; d < cfg.engine.device_count(); ++d) {
      result.pipeline_events.push_back(engine.last_pipeline_events(d));
    }
  }
  return result;
}

namespace {

std::ofstream open_csv(const std::filesystem::path& file) {
  if (file.has_parent_path()) {
    std::filesystem::create_directories(file.parent_path());
  }
  std::ofstream out(file, std::ios::binary);  // fixed newlines everywhere
  if (!out) throw std::runtime_error("cannot write " + file.string());
  return out;
}

}  // namespace

void write_iterations_csv(const std::filesystem::path& file,
                          std::span<const IterationReport> steps) {
  auto out = open_csv(file);
  out << "step,loss,skipped,loss_scale,grad_sq_norm"
      << ",host_read_forward,host_write_forward"
      << ",host_read_backward,host_write_backward"
      << ",host_read_update,host_write_update"
      << ",host_read_total,host_write_total"
      << ",internal_read_total,internal_write_total"
      << ",sparse_pairs,sparse_payload_bytes,activation_bytes\n";
  for (const IterationReport& r : steps) {
    const auto fw = r.delta.host_phase(Phase::forward);
    const auto bw = r.delta.host_phase(Phase::backward);
    const auto up = r.delta.host_phase(Phase::update);
    const auto ht = r.delta.host_total();
    const auto it = r.delta.internal_total();
    out << r.step << ',' << fmt_double(r.loss) << ',' << (r.skipped ? 1 : 0)
        << ',' << fmt_double(r.loss_scale_after) << ','
        << fmt_double(r.grad_sq_norm) << ',' << fw.read << ',' << fw.write
        << ',' << bw.read << ',' << bw.write << ',' << up.read << ','
        << up.write << ',' << ht.read << ',' << ht.write << ',' << it.read
        << ',' << it.write << ',' << r.sparse_pairs << ','
        << r.sparse_payload_bytes << ',' << r.activation_bytes << '\n';
  }
}

void write_summary_csv(const std::filesystem::path& file,
                       const ExperimentConfig& cfg,
                       const ExperimentResult& result) {
  auto out = open_csv(file);
  out << "key,value\n";
  out << "mode," << to_string(cfg.engine.mode) << '\n';
  out << "optimizer," << to_string(cfg.engine.optimizer.kind) << '\n';
  out << "param_count," << cfg.engine.model.param_count() << '\n';
  out << "devices," << cfg.engine.device_count() << '\n';
  out << "steps," << result.steps.size() << '\n';
  std::size_t skipped = 0;
  DirBytes host{}, internal{};
  std::uint64_t pairs = 0;
  for (const IterationReport& r : result.steps) {
    skipped += r.skipped ? 1 : 0;
    host.read += r.delta.host_total().read;
    host.write += r.delta.host_total().write;
    internal.read += r.delta.internal_total().read;
    internal.write += r.delta.internal_total().write;
    pairs += r.sparse_pairs;
  }
  out << "skipped_steps," << skipped << '\n';
  out << "final_loss," << fmt_double(result.final_loss) << '\n';
  out << "host_read_bytes," << host.read << '\n';
  out << "host_write_bytes," << host.write << '\n';
  out << "internal_read_bytes," << internal.read << '\n';
  out << "internal_write_bytes," << internal.write << '\n';
  out << "sparse_pairs," << pairs << '\n';
  if (result.sim) {
    out << "sim_makespan_s," << fmt_double(result.sim->makespan) << '\n';
    for (std::size_t p = 0; p < kPhaseCount; ++p) {
      out << "sim_" << to_string(static_cast<Phase>(p)) << "_s,"
          << fmt_double(result.sim->phase_span[p]) << '\n';
    }
  }
}

void write_timeline_csv(const std::filesystem::path& file,
                        const SimReport& sim) {
  auto out = open_csv(file);
  out << "resource,start,end,bytes,phase,op_id,kind,tasklet,low_priority\n";
  for (const TimelineEvent& e : sim.timeline) {
    out << e.resource << ',' << fmt_double(e.start) << ',' << fmt_double(e.end)
        << ',' << e.work << ',' << to_string(e.phase) << ',' << e.op_id << ','
        << to_string(e.kind) << ',' << e.tasklet << ','
        << (e.low_priority ? 1 : 0) << '\n';
  }
}

void write_breakdown_csv(const std::filesystem::path& file,
                         const SimReport& sim) {
  auto out = open_csv(file);
  const double fw = sim.phase_span[static_cast<std::size_t>(Phase::forward)];
  const double bw = sim.phase_span[static_cast<std::size_t>(Phase::backward)];
  const double up = sim.phase_span[static_cast<std::size_t>(Phase::update)];
  const double total = sim.makespan > 0 ? sim.makespan : 1.0;
  out << "category,seconds,fraction\n";
  out << "forward," << fmt_double(fw) << ',' << fmt_double(fw / total) << '\n';
  out << "backward_grad_offload," << fmt_double(bw) << ','
      << fmt_double(bw / total) << '\n';
  out << "update_opt_transfer," << fmt_double(up) << ','
      << fmt_double(up / total) << '\n';
  out << "iteration," << fmt_double(sim.makespan) << ",1\n";
}

void write_pipeline_events_csv(const std::filesystem::path& file,
                               std::span<const PipelineEvent> events,
                               const Trace& trace) {
  std::map<std::uint64_t, std::uint64_t> bytes_of;
  for (const TraceOp& op : trace) {
    if (is_transfer(op.kind)) bytes_of[op.id] = op.bytes;
  }
  auto out = open_csv(file);
  out << "tasklet,event,logical_time,bytes\n";
  for (const PipelineEvent& e : events) {
    const auto it = bytes_of.find(e.op_id);
    const std::uint64_t bytes = it == bytes_of.end() ? 0 : it->second;
    out << e.tasklet << ',' << e.name << ',' << e.seq << ',' << bytes << '\n';
  }
}

}  // namespace nearstore

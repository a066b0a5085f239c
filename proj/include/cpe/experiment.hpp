// Copyright 2026 The CPE Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpe/common.hpp"
#include "cpe/engine.hpp"
#include "cpe/evalstats.hpp"

#ifndef CPE_DATA_DIR
#define CPE_DATA_DIR "data"
#endif

namespace cpe::experiment {

struct ScenarioSpec {
  std::string id;
  sim::WorkloadKind pattern = sim::WorkloadKind::steady;
  telemetry::Strictness strictness = telemetry::Strictness::standard;
  // Recorded traces replay a stored load trace; synthetic ones are generated.
  bool recorded = false;
};

inline const std::array<ScenarioSpec, 4>& scenarios() {
  static const std::array<ScenarioSpec, 4> all = {{
      {"S1", sim::WorkloadKind::steady, telemetry::Strictness::standard, true},
      {"S2", sim::WorkloadKind::bursty, telemetry::Strictness::standard, false},
      {"S3", sim::WorkloadKind::steady, telemetry::Strictness::strict, true},
      {"S4", sim::WorkloadKind::bursty, telemetry::Strictness::relaxed, false},
  }};
  return all;
}

inline const ScenarioSpec& scenario(std::string_view id) {
  for (const auto& s : scenarios())
    if (s.id == id) return s;
  throw ConfigError("scenario", "unknown scenario '" + std::string(id) + "' (expected S1..S4)");
}

inline std::string default_trace_path() { return std::string(CPE_DATA_DIR) + "/traces/steady-recorded.jsonl"; }

// A recorded load trace: one JSON object per line with start_s, end_s, rps.
inline sim::WorkloadProfile load_trace(const std::string& path, double base_rps) {
  std::ifstream in(path);
  if (!in) throw ConfigError("workload.trace_path", "cannot read trace '" + path + "'");
  sim::WorkloadProfile w;
  w.kind = sim::WorkloadKind::spike_script;
  w.base_rps = base_rps;
  std::string line;
  for (int n = 1; std::getline(in, line); ++n) {
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      w.script.push_back({j.at("start_s").get<double>(), j.at("end_s").get<double>(), j.at("rps").get<double>()});
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("workload.trace_path", path + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  w.validate();
  return w;
}

struct FaultPlan {
  int count = 8;
  // First fault lands this long after warm-up; the rest follow at spacing_s.
  double offset_s = 67;
  double spacing_s = 600;
  double saturation_multiplier = 0.2;
  int eviction_count = 6;
  int drift_replicas = 1;

  void validate() const {
    if (count < 0) throw ConfigError("fault_plan.count", "must be >= 0");
    if (!(spacing_s > 0)) throw ConfigError("fault_plan.spacing_s", "must be > 0");
    if (offset_s < 0) throw ConfigError("fault_plan.offset_s", "must be >= 0");
    if (!(saturation_multiplier > 0 && saturation_multiplier < 1))
      throw ConfigError("fault_plan.saturation_multiplier", "must be in (0,1)");
    if (eviction_count < 1) throw ConfigError("fault_plan.eviction_count", "must be >= 1");
    if (drift_replicas < 0) throw ConfigError("fault_plan.drift_replicas", "must be >= 0");
  }
};

// Evenly spaced faults after warm-up; kinds cycle saturation, eviction,
// drift and targets cycle through the services.
inline std::vector<sim::FaultEvent> build_schedule(const FaultPlan& plan, const std::vector<sim::ServiceSpec>& services,
                                                   double warmup_s) {
  std::vector<sim::FaultEvent> out;
  static constexpr std::array kinds = {sim::FaultKind::cpu_saturation, sim::FaultKind::pod_eviction,
                                       sim::FaultKind::config_drift};
  for (int i = 0; i < plan.count; ++i) {
    sim::FaultEvent f;
    f.kind = kinds[static_cast<std::size_t>(i) % kinds.size()];
    f.target_service = services[static_cast<std::size_t>(i) % services.size()].name;
    f.at_s = warmup_s + plan.offset_s + i * plan.spacing_s;
    f.schedule_index = i;
    switch (f.kind) {
      case sim::FaultKind::cpu_saturation: f.magnitude = plan.saturation_multiplier; break;
      case sim::FaultKind::pod_eviction: f.magnitude = plan.eviction_count; break;
      case sim::FaultKind::config_drift: f.magnitude = plan.drift_replicas; break;
    }
    out.push_back(f);
  }
  return out;
}

inline std::vector<sim::ServiceSpec> default_services() {
  sim::ServiceSpec frontend;
  frontend.name = "frontend";
  frontend.desired_replicas = 8;
  frontend.min_replicas = 1;
  frontend.max_replicas = 16;
  frontend.capacity_rps_per_replica = 100;
  frontend.vcpu_per_replica = 0.5;
  frontend.mem_mb_per_replica = 256;
  frontend.base_latency_ms = 40;
  frontend.traffic_weight = 1.0;
  sim::ServiceSpec checkout = frontend;
  checkout.name = "checkout";
  checkout.capacity_rps_per_replica = 60;
  checkout.base_latency_ms = 50;
  checkout.traffic_weight = 0.5;
  return {frontend, checkout};
}

struct TrialConfig {
  std::string scenario = "S2";
  Mode mode = Mode::cpe;
  std::uint64_t seed = 42;
  double duration_s = 5400;
  double warmup_s = 600;
  std::vector<sim::ServiceSpec> services = default_services();
  sim::WorkloadProfile workload;
  std::string trace_path;  // recorded scenarios only
  sim::SimParams sim;
  FaultPlan fault_plan;
  // Replaces the generated schedule when set.
  std::optional<std::vector<sim::FaultEvent>> fault_schedule;
  telemetry::SloSpec slo = telemetry::SloSpec::preset(telemetry::Strictness::standard);
  control::PolicySet policies = control::PolicySet::defaults();
  // Batch runs have no operator at the approval queue.
  control::ApprovalSettings approvals{30, control::Decision::approve};
  bool drift_admission = true;
  intelligence::DetectorParams detector;
  double retriage_after_s = 300;
  // Incident ids to drop from MTTR statistics; listed in the report.
  std::vector<int> exclude_incidents;

  void validate() const {
    if (!(duration_s > warmup_s)) throw ConfigError("trial.duration_s", "duration_s must exceed warmup_s");
    if (warmup_s < 0) throw ConfigError("trial.warmup_s", "must be >= 0");
    if (std::fmod(warmup_s, telemetry::kScrapeIntervalS) != 0)
      throw ConfigError("trial.warmup_s", "must be a multiple of the 30 s scrape interval");
    fault_plan.validate();
    if (!(detector.threshold > 0 && detector.threshold < 1))
      throw ConfigError("detector.threshold", "must be in (0,1)");
    if (detector.forest.trees < 1) throw ConfigError("detector.trees", "must be >= 1");
    if (detector.forest.subsample < 2) throw ConfigError("detector.subsample", "must be >= 2");
    slo.validate();
    policies.validate();
    cluster_config().validate();
  }

  sim::ClusterConfig cluster_config() const {
    sim::ClusterConfig c;
    c.services = services;
    c.workload = workload;
    c.params = sim;
    c.faults = fault_schedule ? *fault_schedule : build_schedule(fault_plan, services, warmup_s);
    return c;
  }

  engine::EngineConfig engine_config() const {
    engine::EngineConfig e;
    e.mode = mode;
    e.seed = seed;
    e.cluster = cluster_config();
    e.slo = slo;
    e.policies = policies;
    e.approvals = approvals;
    e.drift_admission = drift_admission;
    e.detector = detector;
    e.warmup_s = warmup_s;
    e.retriage_after_s = retriage_after_s;
    e.labels = {{"mode", std::string(to_string(mode))}, {"scenario", scenario}, {"seed", std::to_string(seed)}};
    return e;
  }
};

// Scenario defaults; everything else stays at the library defaults.
inline TrialConfig default_trial(const ScenarioSpec& s) {
  TrialConfig c;
  c.scenario = s.id;
  c.slo = telemetry::SloSpec::preset(s.strictness);
  // A replica at rest still burns a fifth of its vCPU.
  c.sim.idle_cpu_fraction = 0.2;
  if (s.recorded) {
    c.trace_path = default_trace_path();
    c.workload = load_trace(c.trace_path, 200);
  } else {
    c.workload.kind = s.pattern;
    c.workload.base_rps = 200;
    c.workload.amplitude = s.pattern == sim::WorkloadKind::bursty ? 240 : 0;
    c.workload.period_s = 600;
    c.workload.burst_fraction = 0.25;
  }
  return c;
}

inline std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

inline nlohmann::json to_json(const TrialConfig& c);

struct TrialResult {
  std::string scenario;
  Mode mode = Mode::cpe;
  std::uint64_t seed = 0;
  std::vector<telemetry::IncidentRecord> incidents;
  std::vector<double> mttr_values_s;
  std::optional<double> mean_mttr_s;
  std::size_t unresolved = 0;
  std::size_t degenerate = 0;
  std::vector<int> excluded;
  std::optional<double> re_cpu;
  std::optional<double> re_mem;
  double violations_per_hr = 0;
  std::size_t violation_episodes = 0;
  std::optional<double> autonomy_pct;
  double slo_compliance_fraction = 0;
  std::size_t actions_executed = 0;
  std::string config_digest;
  // Measured scrapes, kept for matching across arms.
  std::vector<engine::ScrapeRecord> scrapes;
};

inline bool all_compliant(const engine::ScrapeRecord& r) {
  return std::all_of(r.services.begin(), r.services.end(),
                     [](const auto& s) { return s.verdict == telemetry::Verdict::compliant; });
}

struct EfficiencySums {
  double rps = 0;
  double cpu = 0;
  double mem = 0;
};

inline void accumulate(EfficiencySums& sums, const engine::ScrapeRecord& r) {
  for (const auto& s : r.services) {
    sums.rps += s.rps;
    sums.cpu += s.cpu_vcpu;
    sums.mem += s.mem_mb;
  }
}

inline std::optional<double> ratio(double num, double den) {
  if (!(den > 0)) return std::nullopt;
  return num / den;
}

inline TrialResult summarize(const engine::Engine& eng, const TrialConfig& cfg) {
  TrialResult r;
  r.scenario = cfg.scenario;
  r.mode = cfg.mode;
  r.seed = cfg.seed;
  r.config_digest = fnv1a_hex(to_json(cfg).dump());
  r.incidents = eng.incidents().incidents();
  for (const auto& inc : r.incidents) {
    if (std::find(cfg.exclude_incidents.begin(), cfg.exclude_incidents.end(), inc.id) != cfg.exclude_incidents.end()) {
      r.excluded.push_back(inc.id);
      continue;
    }
    if (auto m = stats::mttr_per_incident(inc)) {
      r.mttr_values_s.push_back(*m);
      if (*m == 0) ++r.degenerate;
    } else {
      ++r.unresolved;
    }
  }
  r.mean_mttr_s = stats::mean(r.mttr_values_s);

  EfficiencySums sums;
  std::size_t cells = 0, compliant = 0;
  for (const auto& s : eng.scrapes()) {
    if (s.ts_s < cfg.warmup_s) continue;
    r.scrapes.push_back(s);
    for (const auto& svc : s.services) {
      ++cells;
      if (svc.verdict == telemetry::Verdict::compliant) ++compliant;
    }
    if (all_compliant(s)) accumulate(sums, s);
  }
  r.re_cpu = ratio(sums.rps, sums.cpu);
  r.re_mem = ratio(sums.rps, sums.mem);
  r.slo_compliance_fraction = cells ? static_cast<double>(compliant) / static_cast<double>(cells) : 0.0;
  r.violations_per_hr = eng.violations().rate_per_hour(cfg.warmup_s, cfg.duration_s);
  r.violation_episodes = eng.violations().episodes_in(cfg.warmup_s, cfg.duration_s);
  r.autonomy_pct = control::autonomy_rate(eng.control().actions(), cfg.warmup_s, cfg.duration_s);
  for (const auto& [id, a] : eng.control().actions())
    if (a.status == control::Status::executed) ++r.actions_executed;
  return r;
}

struct TrialRun {
  std::unique_ptr<engine::Engine> engine;
  TrialResult result;
};

inline TrialRun run_trial_full(const TrialConfig& cfg) {
  cfg.validate();
  TrialRun run;
  run.engine = std::make_unique<engine::Engine>(cfg.engine_config());
  run.engine->run_until(cfg.duration_s);
  run.result = summarize(*run.engine, cfg);
  return run;
}

inline TrialResult run_trial(const TrialConfig& cfg) { return run_trial_full(cfg).result; }

struct ArmSummary {
  std::vector<double> mttr_values_s;
  std::optional<double> mean_mttr_s;
  std::optional<stats::Interval> mttr_ci;
  std::optional<double> re_cpu;
  std::optional<double> re_mem;
  std::optional<stats::Interval> re_cpu_ci;
  double violations_per_hr = 0;
  std::optional<double> autonomy_pct;
  std::size_t incidents = 0;
  std::size_t unresolved = 0;
  double slo_compliance_fraction = 0;
};

struct ComparisonReport {
  std::string scenario;
  int trials = 0;
  std::uint64_t base_seed = 0;
  Mode mode_a = Mode::baseline;
  Mode mode_b = Mode::cpe;
  std::vector<TrialResult> arm_a;
  std::vector<TrialResult> arm_b;
  ArmSummary a;
  ArmSummary b;
  std::size_t paired_incidents = 0;
  std::size_t matched_scrapes = 0;
  std::optional<double> delta_mttr_pct;
  std::optional<double> delta_re_pct;
  std::optional<double> delta_re_mem_pct;
  std::optional<double> delta_violations_pct;
  stats::MwuResult mwu;
  double cliffs_delta = 0;
  std::vector<std::string> notes;
};

inline constexpr int kBootstrapResamples = 10000;

inline std::uint64_t trial_seed(std::uint64_t base, int k) { return derive_seed(base, 1000 + static_cast<std::uint64_t>(k)); }

// Runs K seeded pairs; both arms of pair k share every seed and differ only
// in mode.
inline ComparisonReport run_comparison(const TrialConfig& base, int trials, std::uint64_t base_seed,
                                       Mode mode_a = Mode::baseline, Mode mode_b = Mode::cpe) {
  if (trials < 1) throw ConfigError("trials", "must be >= 1");
  ComparisonReport rep;
  rep.scenario = base.scenario;
  rep.trials = trials;
  rep.base_seed = base_seed;
  rep.mode_a = mode_a;
  rep.mode_b = mode_b;

  EfficiencySums sa, sb;
  std::vector<double> re_a_trials, re_b_trials;
  for (int k = 0; k < trials; ++k) {
    TrialConfig ca = base, cb = base;
    ca.seed = cb.seed = trial_seed(base_seed, k);
    ca.mode = mode_a;
    cb.mode = mode_b;
    rep.arm_a.push_back(run_trial(ca));
    rep.arm_b.push_back(run_trial(cb));
    const auto& ra = rep.arm_a.back();
    const auto& rb = rep.arm_b.back();

    EfficiencySums ta, tb;
    for (std::size_t i = 0; i < std::min(ra.scrapes.size(), rb.scrapes.size()); ++i) {
      if (ra.scrapes[i].ts_s != rb.scrapes[i].ts_s) throw RuntimeAbort("scrape grids diverged between arms");
      if (!all_compliant(ra.scrapes[i]) || !all_compliant(rb.scrapes[i])) continue;
      ++rep.matched_scrapes;
      accumulate(ta, ra.scrapes[i]);
      accumulate(tb, rb.scrapes[i]);
    }
    sa.rps += ta.rps, sa.cpu += ta.cpu, sa.mem += ta.mem;
    sb.rps += tb.rps, sb.cpu += tb.cpu, sb.mem += tb.mem;
    if (auto v = ratio(ta.rps, ta.cpu)) re_a_trials.push_back(*v);
    if (auto v = ratio(tb.rps, tb.cpu)) re_b_trials.push_back(*v);

    for (const auto& ia : ra.incidents) {
      if (ia.schedule_index < 0 || !ia.recovered()) continue;
      for (const auto& ib : rb.incidents)
        if (ib.schedule_index == ia.schedule_index && ib.recovered()) {
          ++rep.paired_incidents;
          break;
        }
    }
  }

  auto fill = [&](ArmSummary& s, const std::vector<TrialResult>& arm, const EfficiencySums& sums,
                  const std::vector<double>& re_trials, std::uint64_t stream) {
    double viol = 0, comp = 0;
    std::vector<double> autonomy;
    for (const auto& t : arm) {
      s.mttr_values_s.insert(s.mttr_values_s.end(), t.mttr_values_s.begin(), t.mttr_values_s.end());
      s.incidents += t.incidents.size();
      s.unresolved += t.unresolved;
      viol += t.violations_per_hr;
      comp += t.slo_compliance_fraction;
      if (t.autonomy_pct) autonomy.push_back(*t.autonomy_pct);
    }
    s.mean_mttr_s = stats::mean(s.mttr_values_s);
    if (!s.mttr_values_s.empty())
      s.mttr_ci = stats::bootstrap_ci(s.mttr_values_s, derive_seed(base_seed, stream), kBootstrapResamples);
    s.re_cpu = ratio(sums.rps, sums.cpu);
    s.re_mem = ratio(sums.rps, sums.mem);
    if (!re_trials.empty()) s.re_cpu_ci = stats::bootstrap_ci(re_trials, derive_seed(base_seed, stream + 1), kBootstrapResamples);
    s.violations_per_hr = viol / static_cast<double>(arm.size());
    s.slo_compliance_fraction = comp / static_cast<double>(arm.size());
    s.autonomy_pct = stats::mean(autonomy);
  };
  fill(rep.a, rep.arm_a, sa, re_a_trials, 10);
  fill(rep.b, rep.arm_b, sb, re_b_trials, 20);

  if (!rep.a.mean_mttr_s || !rep.b.mean_mttr_s)
    throw RuntimeAbort("an arm has zero resolved incidents; MTTR comparison is undefined");
  if (*rep.a.mean_mttr_s > 0) rep.delta_mttr_pct = stats::delta_mttr(*rep.a.mean_mttr_s, *rep.b.mean_mttr_s);
  if (rep.a.re_cpu && rep.b.re_cpu && *rep.a.re_cpu > 0) rep.delta_re_pct = stats::delta_re(*rep.a.re_cpu, *rep.b.re_cpu);
  if (rep.a.re_mem && rep.b.re_mem && *rep.a.re_mem > 0)
    rep.delta_re_mem_pct = stats::delta_re(*rep.a.re_mem, *rep.b.re_mem);
  if (rep.a.violations_per_hr > 0)
    rep.delta_violations_pct = stats::delta_mttr(rep.a.violations_per_hr, rep.b.violations_per_hr);
  else if (rep.b.violations_per_hr == 0)
    rep.delta_violations_pct = 0.0;
  rep.mwu = stats::mann_whitney_u(rep.a.mttr_values_s, rep.b.mttr_values_s);
  rep.cliffs_delta = stats::cliffs_delta(rep.a.mttr_values_s, rep.b.mttr_values_s);
  rep.notes.push_back("efficiency is requests per second per vCPU (higher is better) over scrapes where both arms meet the SLO");
  for (const auto* arm : {&rep.arm_a, &rep.arm_b})
    for (const auto& t : *arm)
      for (int id : t.excluded)
        rep.notes.push_back("excluded incident " + std::to_string(id) + " in " + std::string(to_string(t.mode)) +
                            " trial seed " + std::to_string(t.seed));
  return rep;
}

// ---- serialization ----

inline nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

inline nlohmann::json to_json(const sim::ServiceSpec& s) {
  return {{"name", s.name},
          {"desired_replicas", s.desired_replicas},
          {"min_replicas", s.min_replicas},
          {"max_replicas", s.max_replicas},
          {"capacity_rps_per_replica", s.capacity_rps_per_replica},
          {"vcpu_per_replica", s.vcpu_per_replica},
          {"mem_mb_per_replica", s.mem_mb_per_replica},
          {"base_latency_ms", s.base_latency_ms},
          {"traffic_weight", s.traffic_weight}};
}

inline nlohmann::json to_json(const sim::FaultEvent& f) {
  nlohmann::json j = {{"kind", to_string(f.kind)},
                      {"service", f.target_service},
                      {"at_s", f.at_s},
                      {"magnitude", f.magnitude},
                      {"schedule_index", f.schedule_index}};
  j["duration_s"] = opt(f.duration_s);
  return j;
}

inline nlohmann::json to_json(const control::PolicyRule& r) {
  nlohmann::json j = {{"id", r.id}, {"kind", to_string(r.kind)}, {"service", r.service}};
  switch (r.kind) {
    case control::RuleKind::replica_bounds:
      j["min_replicas"] = r.min_replicas ? nlohmann::json(*r.min_replicas) : nlohmann::json(nullptr);
      j["max_replicas"] = r.max_replicas ? nlohmann::json(*r.max_replicas) : nlohmann::json(nullptr);
      break;
    case control::RuleKind::forbidden_action: {
      auto a = nlohmann::json::array();
      for (auto k : r.actions) a.push_back(to_string(k));
      j["actions"] = a;
      break;
    }
    case control::RuleKind::rate_limit:
      j["max_actions"] = r.max_actions;
      j["window_s"] = r.window_s;
      break;
    case control::RuleKind::approval_required: {
      auto a = nlohmann::json::array();
      for (auto k : r.risks) a.push_back(to_string(k));
      j["risks"] = a;
      break;
    }
    case control::RuleKind::drift_forbidden:
      break;
  }
  return j;
}

inline nlohmann::json to_json(const TrialConfig& c) {
  nlohmann::json services = nlohmann::json::array();
  for (const auto& s : c.services) services.push_back(to_json(s));
  nlohmann::json faults = nlohmann::json::array();
  for (const auto& f : c.cluster_config().faults) faults.push_back(to_json(f));
  nlohmann::json rules = nlohmann::json::array();
  for (const auto& r : c.policies.rules) rules.push_back(to_json(r));
  nlohmann::json script = nlohmann::json::array();
  for (const auto& seg : c.workload.script) script.push_back({seg.start_s, seg.end_s, seg.rps});
  return {
      {"scenario", c.scenario},
      {"mode", to_string(c.mode)},
      {"seed", c.seed},
      {"duration_s", c.duration_s},
      {"warmup_s", c.warmup_s},
      {"services", services},
      {"workload",
       {{"kind", to_string(c.workload.kind)},
        {"base_rps", c.workload.base_rps},
        {"amplitude", c.workload.amplitude},
        {"period_s", c.workload.period_s},
        {"burst_fraction", c.workload.burst_fraction},
        {"trace_path", c.trace_path},
        {"script", script}}},
      {"sim",
       {{"noise_sigma", c.sim.noise_sigma},
        {"restart_delay_s", c.sim.restart_delay_s},
        {"spill_factor", c.sim.spill_factor},
        {"latency_cap_ms", c.sim.latency_cap_ms},
        {"idle_cpu_fraction", c.sim.idle_cpu_fraction}}},
      {"faults", faults},
      {"slo",
       {{"strictness", to_string(c.slo.strictness)},
        {"latency_p95_ms_max", c.slo.latency_p95_ms_max},
        {"error_rate_max", c.slo.error_rate_max}}},
      {"policies", {{"rules", rules}}},
      {"approvals",
       {{"timeout_s", c.approvals.timeout_s}, {"timeout_decision", control::to_string(c.approvals.timeout_decision)}}},
      {"drift_admission", c.drift_admission},
      {"detector",
       {{"threshold", c.detector.threshold},
        {"trees", c.detector.forest.trees},
        {"subsample", c.detector.forest.subsample},
        {"min_training", c.detector.forest.min_training},
        {"breach_scrapes", c.detector.breach_scrapes},
        {"underutilization_threshold", c.detector.underutilization_threshold},
        {"underutilization_scrapes", c.detector.underutilization_scrapes},
        {"target_utilization", c.detector.target_utilization}}},
      {"retriage_after_s", c.retriage_after_s},
      {"exclude_incidents", c.exclude_incidents},
  };
}

inline nlohmann::json to_json(const TrialResult& r) {
  nlohmann::json incidents = nlohmann::json::array();
  for (const auto& i : r.incidents) incidents.push_back(telemetry::to_json(i));
  return {{"scenario", r.scenario},
          {"mode", to_string(r.mode)},
          {"seed", r.seed},
          {"incidents", incidents},
          {"mttr_values_s", r.mttr_values_s},
          {"mean_mttr_s", opt(r.mean_mttr_s)},
          {"unresolved", r.unresolved},
          {"degenerate", r.degenerate},
          {"excluded_incidents", r.excluded},
          {"re_cpu", opt(r.re_cpu)},
          {"re_mem", opt(r.re_mem)},
          {"violations_per_hr", r.violations_per_hr},
          {"violation_episodes", r.violation_episodes},
          {"autonomy_pct", opt(r.autonomy_pct)},
          {"slo_compliance_fraction", r.slo_compliance_fraction},
          {"actions_executed", r.actions_executed},
          {"measured_scrapes", r.scrapes.size()},
          {"config_digest", r.config_digest}};
}

inline nlohmann::json to_json(const stats::Interval& i) { return {{"lo", i.lo}, {"hi", i.hi}}; }

inline nlohmann::json to_json(const ArmSummary& s) {
  return {{"mean_mttr_s", opt(s.mean_mttr_s)},
          {"mttr_ci95", s.mttr_ci ? to_json(*s.mttr_ci) : nlohmann::json(nullptr)},
          {"resolved_incidents", s.mttr_values_s.size()},
          {"incidents", s.incidents},
          {"unresolved", s.unresolved},
          {"re_cpu", opt(s.re_cpu)},
          {"re_mem", opt(s.re_mem)},
          {"re_cpu_ci95", s.re_cpu_ci ? to_json(*s.re_cpu_ci) : nlohmann::json(nullptr)},
          {"violations_per_hr", s.violations_per_hr},
          {"autonomy_pct", opt(s.autonomy_pct)},
          {"slo_compliance_fraction", s.slo_compliance_fraction}};
}

inline nlohmann::json to_json(const ComparisonReport& r) {
  nlohmann::json a = nlohmann::json::array(), b = nlohmann::json::array();
  for (const auto& t : r.arm_a) a.push_back(to_json(t));
  for (const auto& t : r.arm_b) b.push_back(to_json(t));
  return {{"scenario", r.scenario},
          {"trials", r.trials},
          {"base_seed", r.base_seed},
          {"arms", {{"a", {{"mode", to_string(r.mode_a)}, {"summary", to_json(r.a)}, {"trials", a}}},
                    {"b", {{"mode", to_string(r.mode_b)}, {"summary", to_json(r.b)}, {"trials", b}}}}},
          {"paired_incidents", r.paired_incidents},
          {"matched_scrapes", r.matched_scrapes},
          {"delta_mttr_pct", opt(r.delta_mttr_pct)},
          {"delta_re_pct", opt(r.delta_re_pct)},
          {"delta_re_mem_pct", opt(r.delta_re_mem_pct)},
          {"delta_violations_pct", opt(r.delta_violations_pct)},
          {"mann_whitney", {{"u_a", r.mwu.u_a}, {"u_b", r.mwu.u_b}, {"p", r.mwu.p}, {"exact", r.mwu.exact}}},
          {"cliffs_delta", r.cliffs_delta},
          {"notes", r.notes},
          {"engine_version", kEngineVersion}};
}

inline std::string canonical(const nlohmann::json& j) { return j.dump(2) + "\n"; }

inline std::string fmt(const nlohmann::json& v, int precision) {
  if (v.is_null()) return "n/a";
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v.get<double>();
  return os.str();
}

// Human-readable table from a serialized report.
inline std::string summary_table(const nlohmann::json& report) {
  const auto& sa = report["arms"]["a"]["summary"];
  const auto& sb = report["arms"]["b"]["summary"];
  const std::string la = report["arms"]["a"]["mode"], lb = report["arms"]["b"]["mode"];
  std::ostringstream os;
  auto row = [&](const std::string& name, const std::string& x, const std::string& y, const std::string& g) {
    os << std::left << std::setw(26) << name << std::right << std::setw(12) << x << std::setw(12) << y
       << std::setw(10) << g << "\n";
  };
  os << "Scenario " << report["scenario"].get<std::string>() << ", " << report["trials"].get<int>()
     << " trial pair(s), " << report["paired_incidents"].get<std::size_t>() << " paired incidents\n";
  row("Metric", la, lb, "Gain %");
  row("MTTR (s)", fmt(sa["mean_mttr_s"], 1), fmt(sb["mean_mttr_s"], 1), fmt(report["delta_mttr_pct"], 1));
  row("RPS / vCPU", fmt(sa["re_cpu"], 2), fmt(sb["re_cpu"], 2), fmt(report["delta_re_pct"], 1));
  row("Policy Violations (/hr)", fmt(sa["violations_per_hr"], 2), fmt(sb["violations_per_hr"], 2),
      fmt(report["delta_violations_pct"], 1));
  const auto& m = report["mann_whitney"];
  os << "Mann-Whitney U=" << fmt(m["u_a"], 1) << " p=" << fmt(m["p"], 4) << (m["exact"].get<bool>() ? " (exact)" : "")
     << ", Cliff's delta=" << fmt(report["cliffs_delta"], 3) << "\n";
  os << "Autonomy %: " << fmt(sa["autonomy_pct"], 1) << " vs " << fmt(sb["autonomy_pct"], 1) << "\n";
  return os.str();
}

inline std::vector<ComparisonReport> scenario_suite(int trials, std::uint64_t base_seed) {
  std::vector<ComparisonReport> out;
  for (const auto& s : scenarios()) out.push_back(run_comparison(default_trial(s), trials, base_seed));
  return out;
}

}  // namespace cpe::experiment

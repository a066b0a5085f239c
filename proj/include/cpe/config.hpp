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

#include <yaml-cpp/yaml.h>

#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string>
#include <string_view>

#include "cpe/experiment.hpp"

namespace cpe::config {

namespace detail {

inline std::string where(const YAML::Node& n) {
  const auto m = n.Mark();
  if (m.is_null()) return "";
  return " (line " + std::to_string(m.line + 1) + ", column " + std::to_string(m.column + 1) + ")";
}

inline std::string join(const std::string& path, std::string_view key) {
  return path.empty() ? std::string(key) : path + "." + std::string(key);
}

inline void require_map(const YAML::Node& n, const std::string& path) {
  if (!n.IsMap()) throw ConfigError(path, "expected a mapping" + where(n));
}

inline void require_seq(const YAML::Node& n, const std::string& path) {
  if (!n.IsSequence()) throw ConfigError(path, "expected a list" + where(n));
}

inline void only_keys(const YAML::Node& n, const std::string& path, std::initializer_list<std::string_view> allowed) {
  require_map(n, path);
  for (const auto& kv : n) {
    const auto key = kv.first.as<std::string>();
    bool ok = false;
    for (auto a : allowed) ok = ok || a == key;
    if (!ok) throw ConfigError(join(path, key), "unknown key" + where(kv.first));
  }
}

template <class T>
T scalar(const YAML::Node& n, const std::string& path) {
  if (!n.IsScalar()) throw ConfigError(path, "expected a scalar" + where(n));
  try {
    return n.as<T>();
  } catch (const YAML::BadConversion&) {
    throw ConfigError(path, "wrong type for value '" + n.Scalar() + "'" + where(n));
  }
}

template <class T>
void set(const YAML::Node& parent, std::string_view key, const std::string& path, T& out) {
  if (const auto n = parent[std::string(key)]) out = scalar<T>(n, join(path, key));
}

template <class T>
void set_opt(const YAML::Node& parent, std::string_view key, const std::string& path, std::optional<T>& out) {
  if (const auto n = parent[std::string(key)]) {
    if (n.IsNull())
      out.reset();
    else
      out = scalar<T>(n, join(path, key));
  }
}

template <class E, class Parse>
E enum_value(const YAML::Node& n, const std::string& path, Parse parse) {
  const auto s = scalar<std::string>(n, path);
  if (auto v = parse(s)) return *v;
  throw ConfigError(path, "invalid value '" + s + "'" + where(n));
}

inline sim::ServiceSpec service(const YAML::Node& n, const std::string& path) {
  only_keys(n, path,
            {"name", "desired_replicas", "min_replicas", "max_replicas", "capacity_rps_per_replica",
             "vcpu_per_replica", "mem_mb_per_replica", "base_latency_ms", "traffic_weight"});
  sim::ServiceSpec s;
  if (!n["name"]) throw ConfigError(join(path, "name"), "required" + where(n));
  set(n, "name", path, s.name);
  set(n, "desired_replicas", path, s.desired_replicas);
  set(n, "min_replicas", path, s.min_replicas);
  set(n, "max_replicas", path, s.max_replicas);
  set(n, "capacity_rps_per_replica", path, s.capacity_rps_per_replica);
  set(n, "vcpu_per_replica", path, s.vcpu_per_replica);
  set(n, "mem_mb_per_replica", path, s.mem_mb_per_replica);
  set(n, "base_latency_ms", path, s.base_latency_ms);
  set(n, "traffic_weight", path, s.traffic_weight);
  return s;
}

inline sim::FaultEvent fault(const YAML::Node& n, const std::string& path) {
  only_keys(n, path, {"kind", "service", "at_s", "magnitude", "duration_s"});
  for (auto req : {"kind", "service", "at_s", "magnitude"})
    if (!n[req]) throw ConfigError(join(path, req), "required" + where(n));
  sim::FaultEvent f;
  f.kind = enum_value<sim::FaultKind>(n["kind"], join(path, "kind"), sim::parse_fault_kind);
  set(n, "service", path, f.target_service);
  set(n, "at_s", path, f.at_s);
  set(n, "magnitude", path, f.magnitude);
  set_opt(n, "duration_s", path, f.duration_s);
  return f;
}

inline control::PolicyRule rule(const YAML::Node& n, const std::string& path) {
  only_keys(n, path, {"id", "kind", "service", "min_replicas", "max_replicas", "actions", "max_actions", "window_s", "risks"});
  if (!n["kind"]) throw ConfigError(join(path, "kind"), "required" + where(n));
  control::PolicyRule r;
  r.kind = enum_value<control::RuleKind>(n["kind"], join(path, "kind"), control::parse_rule_kind);
  set(n, "id", path, r.id);
  set(n, "service", path, r.service);
  set_opt(n, "min_replicas", path, r.min_replicas);
  set_opt(n, "max_replicas", path, r.max_replicas);
  set(n, "max_actions", path, r.max_actions);
  set(n, "window_s", path, r.window_s);
  if (const auto a = n["actions"]) {
    const auto p = join(path, "actions");
    require_seq(a, p);
    for (std::size_t i = 0; i < a.size(); ++i)
      r.actions.push_back(enum_value<ActionKind>(a[i], p + "[" + std::to_string(i) + "]", parse_action_kind));
  }
  if (const auto a = n["risks"]) {
    const auto p = join(path, "risks");
    require_seq(a, p);
    for (std::size_t i = 0; i < a.size(); ++i)
      r.risks.push_back(enum_value<Risk>(a[i], p + "[" + std::to_string(i) + "]", parse_risk));
  }
  return r;
}

}  // namespace detail

// Builds a trial config from a parsed document. The scenario supplies the
// defaults; every other key overrides one field.
inline experiment::TrialConfig from_yaml(const YAML::Node& root) {
  using namespace detail;
  if (!root || root.IsNull()) throw ConfigError("scenario", "empty config");
  only_keys(root, "",
            {"scenario", "mode", "seed", "duration_s", "warmup_s", "retriage_after_s", "drift_admission",
             "exclude_incidents", "services", "workload", "sim", "fault_plan", "faults", "slo", "policies",
             "approvals", "detector"});
  if (!root["scenario"]) throw ConfigError("scenario", "required" + where(root));
  const auto id = scalar<std::string>(root["scenario"], "scenario");
  const auto* spec = [&]() -> const experiment::ScenarioSpec* {
    for (const auto& s : experiment::scenarios())
      if (s.id == id) return &s;
    return nullptr;
  }();
  if (!spec) throw ConfigError("scenario", "unknown scenario '" + id + "'" + where(root["scenario"]));
  auto c = experiment::default_trial(*spec);

  if (const auto n = root["mode"]) c.mode = enum_value<Mode>(n, "mode", parse_mode);
  set(root, "seed", "", c.seed);
  set(root, "duration_s", "", c.duration_s);
  set(root, "warmup_s", "", c.warmup_s);
  set(root, "retriage_after_s", "", c.retriage_after_s);
  set(root, "drift_admission", "", c.drift_admission);
  if (const auto n = root["exclude_incidents"]) {
    require_seq(n, "exclude_incidents");
    c.exclude_incidents.clear();
    for (std::size_t i = 0; i < n.size(); ++i)
      c.exclude_incidents.push_back(scalar<int>(n[i], "exclude_incidents[" + std::to_string(i) + "]"));
  }

  if (const auto n = root["services"]) {
    require_seq(n, "services");
    c.services.clear();
    for (std::size_t i = 0; i < n.size(); ++i) c.services.push_back(service(n[i], "services[" + std::to_string(i) + "]"));
  }

  if (const auto w = root["workload"]) {
    only_keys(w, "workload", {"kind", "base_rps", "amplitude", "period_s", "burst_fraction", "trace_path", "script"});
    if (const auto k = w["kind"]) c.workload.kind = enum_value<sim::WorkloadKind>(k, "workload.kind", sim::parse_workload_kind);
    set(w, "base_rps", "workload", c.workload.base_rps);
    set(w, "amplitude", "workload", c.workload.amplitude);
    set(w, "period_s", "workload", c.workload.period_s);
    set(w, "burst_fraction", "workload", c.workload.burst_fraction);
    if (const auto s = w["script"]) {
      require_seq(s, "workload.script");
      c.workload.kind = sim::WorkloadKind::spike_script;
      c.workload.script.clear();
      c.trace_path.clear();
      for (std::size_t i = 0; i < s.size(); ++i) {
        const auto p = "workload.script[" + std::to_string(i) + "]";
        only_keys(s[i], p, {"start_s", "end_s", "rps"});
        sim::LoadSegment seg;
        set(s[i], "start_s", p, seg.start_s);
        set(s[i], "end_s", p, seg.end_s);
        set(s[i], "rps", p, seg.rps);
        c.workload.script.push_back(seg);
      }
    }
    if (const auto t = w["trace_path"]) {
      c.trace_path = scalar<std::string>(t, "workload.trace_path");
      try {
        c.workload = experiment::load_trace(c.trace_path, c.workload.base_rps);
      } catch (const ConfigError& e) {
        throw ConfigError("workload.trace_path", e.what());
      }
    }
    if (c.workload.kind != sim::WorkloadKind::spike_script) c.trace_path.clear();
  }

  if (const auto s = root["sim"]) {
    only_keys(s, "sim", {"noise_sigma", "restart_delay_s", "spill_factor", "latency_cap_ms", "idle_cpu_fraction"});
    set(s, "noise_sigma", "sim", c.sim.noise_sigma);
    set(s, "restart_delay_s", "sim", c.sim.restart_delay_s);
    set(s, "spill_factor", "sim", c.sim.spill_factor);
    set(s, "latency_cap_ms", "sim", c.sim.latency_cap_ms);
    set(s, "idle_cpu_fraction", "sim", c.sim.idle_cpu_fraction);
  }

  if (const auto f = root["fault_plan"]) {
    only_keys(f, "fault_plan",
              {"count", "offset_s", "spacing_s", "saturation_multiplier", "eviction_count", "drift_replicas"});
    set(f, "count", "fault_plan", c.fault_plan.count);
    set(f, "offset_s", "fault_plan", c.fault_plan.offset_s);
    set(f, "spacing_s", "fault_plan", c.fault_plan.spacing_s);
    set(f, "saturation_multiplier", "fault_plan", c.fault_plan.saturation_multiplier);
    set(f, "eviction_count", "fault_plan", c.fault_plan.eviction_count);
    set(f, "drift_replicas", "fault_plan", c.fault_plan.drift_replicas);
  }
  if (const auto f = root["faults"]) {
    require_seq(f, "faults");
    std::vector<sim::FaultEvent> schedule;
    for (std::size_t i = 0; i < f.size(); ++i) {
      auto ev = fault(f[i], "faults[" + std::to_string(i) + "]");
      ev.schedule_index = static_cast<int>(i);
      schedule.push_back(ev);
    }
    c.fault_schedule = schedule;
  }

  if (const auto s = root["slo"]) {
    only_keys(s, "slo", {"strictness", "latency_p95_ms_max", "error_rate_max"});
    if (const auto k = s["strictness"])
      c.slo = telemetry::SloSpec::preset(enum_value<telemetry::Strictness>(k, "slo.strictness", telemetry::parse_strictness));
    set(s, "latency_p95_ms_max", "slo", c.slo.latency_p95_ms_max);
    set(s, "error_rate_max", "slo", c.slo.error_rate_max);
  }

  if (const auto p = root["policies"]) {
    only_keys(p, "policies", {"rules"});
    if (const auto r = p["rules"]) {
      require_seq(r, "policies.rules");
      c.policies.rules.clear();
      for (std::size_t i = 0; i < r.size(); ++i)
        c.policies.rules.push_back(rule(r[i], "policies.rules[" + std::to_string(i) + "]"));
    }
  }

  if (const auto a = root["approvals"]) {
    only_keys(a, "approvals", {"timeout_s", "timeout_decision"});
    set(a, "timeout_s", "approvals", c.approvals.timeout_s);
    if (const auto d = a["timeout_decision"])
      c.approvals.timeout_decision = enum_value<control::Decision>(d, "approvals.timeout_decision", control::parse_decision);
    if (!(c.approvals.timeout_s > 0)) throw ConfigError("approvals.timeout_s", "must be > 0");
  }

  if (const auto d = root["detector"]) {
    only_keys(d, "detector",
              {"threshold", "trees", "subsample", "min_training", "breach_scrapes", "underutilization_threshold",
               "underutilization_scrapes", "target_utilization"});
    auto& p = c.detector;
    set(d, "threshold", "detector", p.threshold);
    set(d, "trees", "detector", p.forest.trees);
    set(d, "subsample", "detector", p.forest.subsample);
    set(d, "min_training", "detector", p.forest.min_training);
    set(d, "breach_scrapes", "detector", p.breach_scrapes);
    set(d, "underutilization_threshold", "detector", p.underutilization_threshold);
    set(d, "underutilization_scrapes", "detector", p.underutilization_scrapes);
    set(d, "target_utilization", "detector", p.target_utilization);
  }

  c.validate();
  return c;
}

// Parses config text; syntax errors carry line and column.
inline experiment::TrialConfig parse(const std::string& text) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError("", "parse error at line " + std::to_string(e.mark.line + 1) + ", column " +
                              std::to_string(e.mark.column + 1) + ": " + e.msg);
  }
  return from_yaml(root);
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("", "cannot read config file '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline experiment::TrialConfig load(const std::string& path) { return parse(read_file(path)); }

}  // namespace cpe::config

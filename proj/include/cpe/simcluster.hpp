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

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "cpe/common.hpp"

// Deterministic discrete-event cluster simulator: services backed by replicas,
// a scripted offered load, injectable faults and a queueing-flavoured
// performance model.
namespace cpe::sim {

struct ServiceSpec {
  std::string name;
  int desired_replicas = 4;
  double capacity_rps_per_replica = 100.0;
  double vcpu_per_replica = 0.5;
  double mem_mb_per_replica = 256.0;
  double base_latency_ms = 50.0;
  int min_replicas = 1;
  int max_replicas = 10;
  // Share of the workload profile's rps routed to this service.
  double traffic_weight = 1.0;

  bool operator==(const ServiceSpec&) const = default;

  void validate() const {
    const std::string key = "services." + (name.empty() ? std::string("?") : name);
    if (name.empty()) throw ConfigError("services.name", "service name must be non-empty");
    if (min_replicas < 1) throw ConfigError(key + ".min_replicas", "min_replicas must be >= 1");
    if (desired_replicas < min_replicas)
      throw ConfigError(key + ".desired_replicas", "desired_replicas below min");
    if (desired_replicas > max_replicas)
      throw ConfigError(key + ".desired_replicas", "desired_replicas above max");
    if (!(capacity_rps_per_replica > 0))
      throw ConfigError(key + ".capacity_rps_per_replica", "must be > 0");
    if (!(base_latency_ms > 0)) throw ConfigError(key + ".base_latency_ms", "must be > 0");
    if (!(vcpu_per_replica > 0)) throw ConfigError(key + ".vcpu_per_replica", "must be > 0");
    if (mem_mb_per_replica < 0) throw ConfigError(key + ".mem_mb_per_replica", "must be >= 0");
    if (traffic_weight < 0) throw ConfigError(key + ".traffic_weight", "must be >= 0");
  }
};

enum class WorkloadKind { steady, bursty, spike_script };

inline std::string_view to_string(WorkloadKind k) {
  switch (k) {
    case WorkloadKind::steady: return "steady";
    case WorkloadKind::bursty: return "bursty";
    case WorkloadKind::spike_script: return "spike-script";
  }
  return "?";
}

inline std::optional<WorkloadKind> parse_workload_kind(std::string_view s) {
  if (s == "steady") return WorkloadKind::steady;
  if (s == "bursty") return WorkloadKind::bursty;
  if (s == "spike-script" || s == "spike_script") return WorkloadKind::spike_script;
  return std::nullopt;
}

struct LoadSegment {
  double start_s = 0;
  double end_s = 0;
  double rps = 0;
  bool operator==(const LoadSegment&) const = default;
};

struct WorkloadProfile {
  WorkloadKind kind = WorkloadKind::steady;
  double base_rps = 0;
  double amplitude = 0;
  double period_s = 900;
  // Fraction of each period occupied by the burst (bursty only).
  double burst_fraction = 0.25;
  std::vector<LoadSegment> script;

  bool operator==(const WorkloadProfile&) const = default;

  void validate() const {
    if (base_rps < 0) throw ConfigError("workload.base_rps", "must be >= 0");
    if (amplitude < 0) throw ConfigError("workload.amplitude", "must be >= 0");
    if (kind == WorkloadKind::bursty) {
      if (!(period_s > 0)) throw ConfigError("workload.period_s", "must be > 0");
      if (!(burst_fraction > 0 && burst_fraction <= 1))
        throw ConfigError("workload.burst_fraction", "must be in (0, 1]");
    }
    double prev_end = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < script.size(); ++i) {
      const auto& seg = script[i];
      const std::string key = "workload.script[" + std::to_string(i) + "]";
      if (!(seg.end_s > seg.start_s)) throw ConfigError(key, "segment end must exceed start");
      if (seg.start_s < prev_end) throw ConfigError(key, "segments overlap or are out of order");
      if (seg.rps < 0) throw ConfigError(key, "rps must be >= 0");
      prev_end = seg.end_s;
    }
  }

  // Offered load before noise and per-service weighting.
  double rps_at(double t) const {
    switch (kind) {
      case WorkloadKind::steady:
        return base_rps;
      case WorkloadKind::bursty: {
        const double phase = std::fmod(t, period_s) / period_s;
        if (phase >= burst_fraction) return base_rps;
        // Raised-cosine pulse: ramp up, plateau-like crest, ramp down.
        const double x = phase / burst_fraction;
        return base_rps + amplitude * 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * x));
      }
      case WorkloadKind::spike_script: {
        auto it = std::upper_bound(script.begin(), script.end(), t,
                                   [](double v, const LoadSegment& s) { return v < s.start_s; });
        if (it != script.begin()) {
          const auto& seg = *std::prev(it);
          if (t < seg.end_s) return seg.rps;
        }
        return base_rps;
      }
    }
    return base_rps;
  }
};

enum class FaultKind { cpu_saturation, pod_eviction, config_drift };

inline std::string_view to_string(FaultKind k) {
  switch (k) {
    case FaultKind::cpu_saturation: return "cpu_saturation";
    case FaultKind::pod_eviction: return "pod_eviction";
    case FaultKind::config_drift: return "config_drift";
  }
  return "?";
}

inline std::optional<FaultKind> parse_fault_kind(std::string_view s) {
  if (s == "cpu_saturation") return FaultKind::cpu_saturation;
  if (s == "pod_eviction") return FaultKind::pod_eviction;
  if (s == "config_drift") return FaultKind::config_drift;
  return std::nullopt;
}

struct FaultEvent {
  FaultKind kind = FaultKind::cpu_saturation;
  std::string target_service;
  double at_s = 0;
  // cpu_saturation: capacity multiplier in (0,1); pod_eviction: replica count;
  // config_drift: the wrong replica value.
  double magnitude = 0.5;
  std::optional<double> duration_s;
  // Position in the trial's fault schedule; -1 for ad-hoc injections.
  int schedule_index = -1;

  bool operator==(const FaultEvent&) const = default;

  void validate() const {
    if (target_service.empty()) throw ConfigError("fault.target_service", "must be set");
    if (at_s < 0) throw ConfigError("fault.at_s", "must be >= 0");
    if (duration_s && !(*duration_s > 0)) throw ConfigError("fault.duration_s", "must be > 0");
    switch (kind) {
      case FaultKind::cpu_saturation:
        if (!(magnitude > 0 && magnitude < 1))
          throw ConfigError("fault.magnitude", "cpu_saturation multiplier must be in (0,1)");
        break;
      case FaultKind::pod_eviction:
        if (magnitude < 1 || magnitude != std::floor(magnitude))
          throw ConfigError("fault.magnitude", "eviction count must be an integer >= 1");
        break;
      case FaultKind::config_drift:
        if (magnitude < 0 || magnitude != std::floor(magnitude))
          throw ConfigError("fault.magnitude", "drift replica value must be an integer >= 0");
        break;
    }
  }
};

struct SimParams {
  double noise_sigma = 0.03;
  double restart_delay_s = 15.0;
  double spill_factor = 1.0;
  double latency_cap_ms = 10000.0;
  // CPU a healthy replica burns with zero traffic, as a fraction of its vCPU.
  double idle_cpu_fraction = 0.0;

  bool operator==(const SimParams&) const = default;

  void validate() const {
    if (noise_sigma < 0 || noise_sigma > 0.5) throw ConfigError("simulation.noise_sigma", "must be in [0, 0.5]");
    if (restart_delay_s < 0) throw ConfigError("simulation.restart_delay_s", "must be >= 0");
    if (spill_factor < 0) throw ConfigError("simulation.spill_factor", "must be >= 0");
    if (!(latency_cap_ms > 0)) throw ConfigError("simulation.latency_cap_ms", "must be > 0");
    if (idle_cpu_fraction < 0 || idle_cpu_fraction >= 1)
      throw ConfigError("simulation.idle_cpu_fraction", "must be in [0, 1)");
  }
};

struct ReplicaState {
  int id = 0;
  bool healthy = true;
  double cpu_fraction = 0;
  double capacity_multiplier = 1.0;
  // Starting replicas are unhealthy until ready_at_s.
  bool pending = false;
  double ready_at_s = 0;
  int evicted_by = -1;
  int saturated_by = -1;

  bool operator==(const ReplicaState&) const = default;
};

struct ServiceMetrics {
  std::string service;
  double offered_rps = 0;
  double rps_served = 0;
  double dropped_rps = 0;
  double cpu_vcpu = 0;
  double mem_mb = 0;
  double p95_latency_ms = 0;
  double error_rate = 0;
  double utilization = 0;  // offered / effective capacity
  int desired_replicas = 0;
  int available_replicas = 0;

  bool operator==(const ServiceMetrics&) const = default;
};

struct ServiceState {
  ServiceSpec spec;
  int desired = 0;
  // Last sanctioned replica count; rollback restores it.
  int declared_desired = 0;
  std::vector<ReplicaState> replicas;
  bool drifted = false;
  int drift_value = 0;
  double noise_rps = 0;
  double noise_latency = 0;
  ServiceMetrics metrics;

  bool operator==(const ServiceState&) const = default;

  int available() const {
    return static_cast<int>(std::count_if(replicas.begin(), replicas.end(),
                                          [](const ReplicaState& r) { return r.healthy; }));
  }
  int pending() const {
    return static_cast<int>(std::count_if(replicas.begin(), replicas.end(),
                                          [](const ReplicaState& r) { return r.pending; }));
  }
  int evicted() const {
    return static_cast<int>(std::count_if(replicas.begin(), replicas.end(),
                                          [](const ReplicaState& r) { return r.evicted_by >= 0; }));
  }
  int degraded() const {
    return static_cast<int>(std::count_if(replicas.begin(), replicas.end(), [](const ReplicaState& r) {
      return r.healthy && r.capacity_multiplier < 1.0;
    }));
  }
  double mean_capacity_multiplier() const {
    double sum = 0;
    int n = 0;
    for (const auto& r : replicas) {
      if (!r.healthy) continue;
      sum += r.capacity_multiplier;
      ++n;
    }
    return n == 0 ? 1.0 : sum / n;
  }
};

struct ActiveFault {
  FaultEvent fault;
  int fault_id = 0;
  std::optional<double> expires_at_s;
  bool operator==(const ActiveFault&) const = default;
};

struct ClusterState {
  double clock_s = 0;
  std::vector<ServiceState> services;
  std::vector<ActiveFault> active_faults;
  int next_replica_id = 0;

  bool operator==(const ClusterState&) const = default;

  const ServiceState* find(std::string_view name) const {
    for (const auto& s : services)
      if (s.spec.name == name) return &s;
    return nullptr;
  }
  ServiceState* find(std::string_view name) {
    for (auto& s : services)
      if (s.spec.name == name) return &s;
    return nullptr;
  }
};

struct ClusterConfig {
  std::vector<ServiceSpec> services;
  WorkloadProfile workload;
  std::vector<FaultEvent> faults;
  SimParams params;

  bool operator==(const ClusterConfig&) const = default;

  void validate() const {
    if (services.empty()) throw ConfigError("services", "at least one service is required");
    for (std::size_t i = 0; i < services.size(); ++i) {
      services[i].validate();
      for (std::size_t j = 0; j < i; ++j)
        if (services[j].name == services[i].name)
          throw ConfigError("services." + services[i].name, "duplicate service name");
    }
    workload.validate();
    params.validate();
    for (std::size_t i = 0; i < faults.size(); ++i) {
      try {
        faults[i].validate();
      } catch (const ConfigError& e) {
        throw ConfigError("faults[" + std::to_string(i) + "]", e.what());
      }
      bool known = false;
      for (const auto& s : services) known = known || s.name == faults[i].target_service;
      if (!known)
        throw ConfigError("faults[" + std::to_string(i) + "].target_service",
                          "unknown service '" + faults[i].target_service + "'");
    }
  }
};

// Record of a fault reaching the cluster, used to pair incidents across arms.
struct InjectionMarker {
  double at_s = 0;
  FaultEvent fault;
  int fault_id = 0;
  // Refused by the admission hook; the cluster never changed.
  bool rejected = false;
};

struct ActionOutcome {
  bool changed = false;
  bool clamped = false;
  std::string detail;
};

class Cluster {
 public:
  // Returns false to refuse a configuration change before it lands.
  using AdmissionHook = std::function<bool(const FaultEvent&)>;

  Cluster(ClusterConfig config, std::uint64_t seed)
      : config_(std::move(config)), rng_(derive_seed(seed, seed_stream::noise)) {
    config_.validate();
    schedule_ = config_.faults;
    std::stable_sort(schedule_.begin(), schedule_.end(),
                     [](const FaultEvent& a, const FaultEvent& b) { return a.at_s < b.at_s; });
    for (const auto& spec : config_.services) {
      ServiceState svc;
      svc.spec = spec;
      svc.desired = spec.desired_replicas;
      svc.declared_desired = spec.desired_replicas;
      for (int i = 0; i < spec.desired_replicas; ++i) {
        ReplicaState r;
        r.id = state_.next_replica_id++;
        svc.replicas.push_back(r);
      }
      state_.services.push_back(std::move(svc));
    }
    draw_noise();
    recompute_metrics();
  }

  const ClusterState& state() const { return state_; }
  const ClusterConfig& config() const { return config_; }
  const std::vector<InjectionMarker>& markers() const { return markers_; }
  double clock() const { return state_.clock_s; }

  void set_admission_hook(AdmissionHook hook) { admission_ = std::move(hook); }

  void step(double dt_s) {
    if (!(dt_s > 0)) throw ContractViolation("step: dt_s must be > 0");
    state_.clock_s += dt_s;
    while (next_fault_ < schedule_.size() && schedule_[next_fault_].at_s <= state_.clock_s) {
      apply_fault(schedule_[next_fault_], state_.clock_s);
      ++next_fault_;
    }
    for (auto& svc : state_.services) {
      for (auto& r : svc.replicas) {
        if (r.pending && r.ready_at_s <= state_.clock_s) {
          r.pending = false;
          r.healthy = true;
        }
      }
    }
    expire_faults();
    draw_noise();
    recompute_metrics();
  }

  // Applies `fault` now, regardless of its scheduled time.
  void inject_fault(FaultEvent fault) {
    if (!state_.find(fault.target_service))
      throw NotFound("unknown service '" + fault.target_service + "'");
    fault.at_s = state_.clock_s;
    fault.validate();
    apply_fault(fault, state_.clock_s);
    recompute_metrics();
  }

  ActionOutcome apply_action(const ActionSpec& action) {
    ServiceState* svc = state_.find(action.service);
    if (!svc) throw NotFound("unknown service '" + action.service + "'");
    ActionOutcome out;
    const auto& spec = svc->spec;
    switch (action.kind) {
      case ActionKind::scale_up:
      case ActionKind::scale_down: {
        const int delta = action.kind == ActionKind::scale_up ? action.amount : -action.amount;
        const int target = svc->desired + delta;
        const int bounded = std::clamp(target, spec.min_replicas, spec.max_replicas);
        out.clamped = bounded != target;
        out.changed = bounded != svc->desired;
        svc->desired = bounded;
        if (svc->drifted)
          svc->declared_desired = std::clamp(svc->declared_desired + delta, spec.min_replicas, spec.max_replicas);
        else
          svc->declared_desired = bounded;
        reconcile(*svc);
        out.detail = "desired=" + std::to_string(svc->desired) + (out.clamped ? " (clamped)" : "");
        break;
      }
      case ActionKind::restart_pod: {
        int restarted = 0;
        for (int i = 0; i < action.amount; ++i) {
          auto it = restart_candidate(*svc);
          if (it == svc->replicas.end()) break;
          *it = fresh_replica();
          ++restarted;
        }
        out.changed = restarted > 0;
        out.detail = restarted > 0 ? "restarted=" + std::to_string(restarted)
                                   : "no unhealthy or saturated replica";
        break;
      }
      case ActionKind::rollback_config: {
        if (svc->drifted) {
          svc->drifted = false;
          svc->drift_value = 0;
          svc->desired = svc->declared_desired;
          reconcile(*svc);
          std::erase_if(state_.active_faults, [&](const ActiveFault& f) {
            return f.fault.kind == FaultKind::config_drift && f.fault.target_service == spec.name;
          });
          out.changed = true;
          out.detail = "restored desired=" + std::to_string(svc->desired);
        } else {
          out.detail = "no drift; no-op";
        }
        break;
      }
    }
    expire_faults();
    recompute_metrics();
    return out;
  }

  std::vector<ServiceMetrics> snapshot_metrics() const {
    std::vector<ServiceMetrics> out;
    out.reserve(state_.services.size());
    for (const auto& s : state_.services) out.push_back(s.metrics);
    return out;
  }

 private:
  void draw_noise() {
    for (auto& svc : state_.services) {
      // Always two draws per service per step so trajectories stay aligned
      // across operation modes.
      svc.noise_rps = rng_.normal();
      svc.noise_latency = rng_.normal();
    }
  }

  void apply_fault(FaultEvent fault, double now) {
    fault.at_s = now;
    ServiceState* svc = state_.find(fault.target_service);
    if (!svc) return;
    const int id = next_fault_id_++;
    if (fault.kind == FaultKind::config_drift && admission_ && !admission_(fault)) {
      markers_.push_back({now, fault, id, true});
      return;
    }
    markers_.push_back({now, fault, id, false});
    std::optional<double> expires;
    if (fault.duration_s) expires = now + *fault.duration_s;
    switch (fault.kind) {
      case FaultKind::cpu_saturation:
        for (auto& r : svc->replicas) {
          if (!r.healthy) continue;
          r.capacity_multiplier = std::min(r.capacity_multiplier, fault.magnitude);
          r.saturated_by = id;
        }
        break;
      case FaultKind::pod_eviction: {
        int remaining = static_cast<int>(fault.magnitude);
        for (auto it = svc->replicas.rbegin(); it != svc->replicas.rend() && remaining > 0; ++it) {
          if (!it->healthy) continue;
          it->healthy = false;
          it->evicted_by = id;
          it->cpu_fraction = 0;
          --remaining;
        }
        break;
      }
      case FaultKind::config_drift: {
        const int value = std::clamp(static_cast<int>(fault.magnitude), svc->spec.min_replicas,
                                     svc->spec.max_replicas);
        if (svc->drifted && svc->drift_value == value && svc->desired == value) return;
        svc->drifted = true;
        svc->drift_value = value;
        svc->desired = value;
        reconcile(*svc);
        std::erase_if(state_.active_faults, [&](const ActiveFault& f) {
          return f.fault.kind == FaultKind::config_drift && f.fault.target_service == svc->spec.name;
        });
        break;
      }
    }
    state_.active_faults.push_back({fault, id, expires});
  }

  void expire_faults() {
    std::erase_if(state_.active_faults, [&](const ActiveFault& f) {
      const bool expired = f.expires_at_s && *f.expires_at_s <= state_.clock_s;
      ServiceState* svc = state_.find(f.fault.target_service);
      switch (f.fault.kind) {
        case FaultKind::cpu_saturation: {
          bool any = false;
          for (auto& r : svc->replicas) {
            if (r.saturated_by != f.fault_id) continue;
            if (expired) {
              r.capacity_multiplier = 1.0;
              r.saturated_by = -1;
            } else {
              any = true;
            }
          }
          return !any;
        }
        case FaultKind::pod_eviction: {
          bool any = false;
          for (auto& r : svc->replicas) {
            if (r.evicted_by != f.fault_id) continue;
            if (expired) {
              r.evicted_by = -1;
              r.pending = true;
              r.ready_at_s = state_.clock_s + config_.params.restart_delay_s;
            } else {
              any = true;
            }
          }
          return !any;
        }
        case FaultKind::config_drift:
          return !svc->drifted;
      }
      return true;
    });
  }

  ReplicaState fresh_replica() {
    ReplicaState r;
    r.id = state_.next_replica_id++;
    r.healthy = false;
    r.pending = true;
    r.ready_at_s = state_.clock_s + config_.params.restart_delay_s;
    if (config_.params.restart_delay_s <= 0) {
      r.healthy = true;
      r.pending = false;
    }
    return r;
  }

  // Evicted replicas first, then the most saturated healthy one.
  static std::vector<ReplicaState>::iterator restart_candidate(ServiceState& svc) {
    auto evicted = std::find_if(svc.replicas.begin(), svc.replicas.end(),
                                [](const ReplicaState& r) { return r.evicted_by >= 0; });
    if (evicted != svc.replicas.end()) return evicted;
    auto best = svc.replicas.end();
    for (auto it = svc.replicas.begin(); it != svc.replicas.end(); ++it) {
      if (!it->healthy || it->capacity_multiplier >= 1.0) continue;
      if (best == svc.replicas.end() || it->capacity_multiplier < best->capacity_multiplier) best = it;
    }
    return best;
  }

  // Converge the replica list onto `desired`, removing the least useful first.
  void reconcile(ServiceState& svc) {
    auto usefulness = [](const ReplicaState& r) {
      if (r.evicted_by >= 0) return 0.0;
      if (r.pending) return 1.0;
      return 2.0 + r.capacity_multiplier;
    };
    while (static_cast<int>(svc.replicas.size()) > svc.desired) {
      auto victim = svc.replicas.begin();
      for (auto it = svc.replicas.begin(); it != svc.replicas.end(); ++it) {
        const double u = usefulness(*it), v = usefulness(*victim);
        if (u < v || (u == v && it->id > victim->id)) victim = it;
      }
      svc.replicas.erase(victim);
    }
    while (static_cast<int>(svc.replicas.size()) < svc.desired) svc.replicas.push_back(fresh_replica());
  }

  void recompute_metrics() {
    const auto& p = config_.params;
    const double base = config_.workload.rps_at(state_.clock_s);
    for (auto& svc : state_.services) {
      const auto& spec = svc.spec;
      auto& m = svc.metrics;
      m.service = spec.name;
      m.offered_rps = std::max(0.0, base * spec.traffic_weight * std::max(0.0, 1.0 + p.noise_sigma * svc.noise_rps));
      const int available = svc.available();
      const double capacity = available * spec.capacity_rps_per_replica * svc.mean_capacity_multiplier();
      double rho;
      if (capacity > 0)
        rho = m.offered_rps / capacity;
      else
        rho = m.offered_rps > 0 ? std::numeric_limits<double>::infinity() : 0.0;
      if (available == 0) {
        m.p95_latency_ms = p.latency_cap_ms;
        m.error_rate = m.offered_rps > 0 ? 1.0 : 0.0;
      } else {
        constexpr double kEps = 1e-9;
        double lat = spec.base_latency_ms / std::max(kEps, 1.0 - std::min(rho, 0.98));
        lat = std::min(lat, p.latency_cap_ms);
        lat *= std::max(0.0, 1.0 + p.noise_sigma * svc.noise_latency);
        m.p95_latency_ms = std::min(lat, p.latency_cap_ms);
        m.error_rate = std::clamp(p.spill_factor * std::max(0.0, rho - 1.0), 0.0, 1.0);
      }
      m.rps_served = m.offered_rps * (1.0 - m.error_rate);
      m.dropped_rps = m.offered_rps - m.rps_served;
      const double busy = std::isfinite(rho) ? rho : 1.0;
      const double fraction = std::min(1.0, p.idle_cpu_fraction + (1.0 - p.idle_cpu_fraction) * busy);
      double cpu = 0;
      for (auto& r : svc.replicas) {
        r.cpu_fraction = r.healthy ? fraction : 0.0;
        cpu += r.cpu_fraction * spec.vcpu_per_replica;
      }
      m.cpu_vcpu = cpu;
      m.mem_mb = available * spec.mem_mb_per_replica;
      m.utilization = std::isfinite(rho) ? rho : 1e9;
      m.desired_replicas = svc.desired;
      m.available_replicas = available;
    }
  }

  ClusterConfig config_;
  ClusterState state_;
  Rng rng_;
  std::vector<FaultEvent> schedule_;
  std::size_t next_fault_ = 0;
  int next_fault_id_ = 0;
  std::vector<InjectionMarker> markers_;
  AdmissionHook admission_;
};

}  // namespace cpe::sim

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

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <future>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "cpe/common.hpp"
#include "cpe/control.hpp"
#include "cpe/intelligence.hpp"
#include "cpe/simcluster.hpp"
#include "cpe/telemetry.hpp"

namespace cpe::engine {

struct EngineConfig {
  Mode mode = Mode::cpe;
  std::uint64_t seed = 1;
  sim::ClusterConfig cluster;
  telemetry::SloSpec slo = telemetry::SloSpec::preset(telemetry::Strictness::standard);
  control::PolicySet policies = control::PolicySet::defaults();
  control::ApprovalSettings approvals;
  // CPE enforces drift_forbidden at admission; the Baseline only audits it.
  bool drift_admission = true;
  intelligence::DetectorParams detector;
  double warmup_s = 600;
  // The Baseline operator re-examines an unresolved incident this long after
  // their last fix.
  double retriage_after_s = 300;
  telemetry::Labels labels;
};

struct ServiceScrapeRecord {
  std::string service;
  double rps = 0;
  double cpu_vcpu = 0;
  double mem_mb = 0;
  double p95_latency_ms = 0;
  double error_rate = 0;
  int desired = 0;
  int available = 0;
  telemetry::Verdict verdict = telemetry::Verdict::unknown;
};

struct ScrapeRecord {
  double ts_s = 0;
  std::vector<ServiceScrapeRecord> services;
};

struct ApiEvent {
  std::uint64_t seq = 0;
  double ts = 0;
  std::string kind;
  nlohmann::json payload;
};

inline nlohmann::json to_json(const ApiEvent& e) {
  return {{"seq", e.seq}, {"ts", e.ts}, {"kind", e.kind}, {"payload", e.payload}};
}

// Append-only, sequence-numbered event stream. Readers may wait for events
// past a sequence number from other threads.
class EventLog {
 public:
  std::uint64_t append(double ts, std::string kind, nlohmann::json payload) {
    std::lock_guard lock(mu_);
    const std::uint64_t seq = events_.size() + 1;
    events_.push_back({seq, ts, std::move(kind), std::move(payload)});
    cv_.notify_all();
    return seq;
  }

  std::vector<ApiEvent> after(std::uint64_t seq, std::size_t limit = SIZE_MAX) const {
    std::lock_guard lock(mu_);
    std::vector<ApiEvent> out;
    for (std::size_t i = seq; i < events_.size() && out.size() < limit; ++i) out.push_back(events_[i]);
    return out;
  }

  // Blocks until an event with seq > `seq` exists or the timeout passes.
  bool wait_after(std::uint64_t seq, std::chrono::milliseconds timeout) const {
    std::unique_lock lock(mu_);
    return cv_.wait_for(lock, timeout, [&] { return events_.size() > seq; });
  }

  std::uint64_t last_seq() const {
    std::lock_guard lock(mu_);
    return events_.size();
  }

  std::size_t count(std::string_view kind) const {
    std::lock_guard lock(mu_);
    return static_cast<std::size_t>(
        std::count_if(events_.begin(), events_.end(), [&](const ApiEvent& e) { return e.kind == kind; }));
  }

 private:
  mutable std::mutex mu_;
  mutable std::condition_variable cv_;
  std::vector<ApiEvent> events_;
};

struct DecideCommand {
  int action_id = 0;
  control::Decision decision = control::Decision::approve;
};

struct InjectCommand {
  sim::FaultEvent fault;
};

using Command = std::variant<DecideCommand, InjectCommand>;

struct CommandResult {
  int status = 200;
  nlohmann::json body;
};

// Mutations from other threads; the engine drains it between ticks.
class CommandQueue {
 public:
  std::future<CommandResult> push(Command c) {
    std::lock_guard lock(mu_);
    pending_.emplace_back(std::move(c), std::promise<CommandResult>{});
    return pending_.back().second.get_future();
  }

  std::vector<std::pair<Command, std::promise<CommandResult>>> drain() {
    std::lock_guard lock(mu_);
    return std::exchange(pending_, {});
  }

 private:
  std::mutex mu_;
  std::vector<std::pair<Command, std::promise<CommandResult>>> pending_;
};

inline std::string_view event_kind_for(std::string_view verdict) {
  if (verdict == "proposed") return "action_proposed";
  if (verdict == "require_approval") return "approval_pending";
  if (verdict == "executed") return "action_executed";
  return "action_decided";
}

// The closed loop for one operating mode. Each tick at clock t drains the
// command queue, runs the control plane (timeouts, manual triage, execution),
// handles the scrape when t is on the 30 s grid, then advances the cluster
// by one second.
class Engine {
 public:
  explicit Engine(EngineConfig cfg)
      : cfg_(std::move(cfg)),
        cluster_(cfg_.cluster, cfg_.seed),
        control_(cfg_.policies, cfg_.approvals),
        incidents_(cfg_.mode),
        alert_(cfg_.detector.breach_scrapes),
        breach_(cfg_.detector.breach_scrapes),
        underutil_(cfg_.detector.underutilization_threshold, cfg_.detector.underutilization_scrapes),
        triage_clock_(cfg_.mode, cfg_.seed) {
    if (!(cfg_.warmup_s >= 0)) throw ConfigError("trial.warmup_s", "must be >= 0");
    if (cfg_.mode == Mode::cpe && cfg_.drift_admission) {
      const auto policies = cfg_.policies;
      cluster_.set_admission_hook([policies](const sim::FaultEvent& f) { return control::admits(policies, f); });
    }
    for (const auto& s : cfg_.cluster.services) builders_.emplace(s.name, intelligence::FeatureBuilder(s.vcpu_per_replica));
  }

  // Runs on the engine thread after queued commands are applied and before
  // their callers are answered.
  void set_on_commands_applied(std::function<void()> f) { on_commands_applied_ = std::move(f); }

  void tick() {
    const double now = cluster_.clock();
    drain_commands(now);
    control_tick(now);
    if (std::fmod(now, telemetry::kScrapeIntervalS) == 0) on_scrape(now);
    cluster_.step(1);
    take_markers();
  }

  void run_until(double t) {
    while (cluster_.clock() < t) tick();
  }

  double clock() const { return cluster_.clock(); }
  const EngineConfig& config() const { return cfg_; }
  const sim::Cluster& cluster() const { return cluster_; }
  const control::ControlPlane& control() const { return control_; }
  const telemetry::IncidentTracker& incidents() const { return incidents_; }
  const telemetry::MetricStore& store() const { return store_; }
  const control::ViolationTracker& violations() const { return violations_; }
  const std::vector<ScrapeRecord>& scrapes() const { return scrapes_; }
  const EventLog& events() const { return events_; }
  CommandQueue& commands() { return commands_; }

  const intelligence::IsolationForestModel* model(const std::string& service) const {
    auto it = models_.find(service);
    return it == models_.end() || !it->second ? nullptr : &*it->second;
  }

  nlohmann::json state_json() const {
    nlohmann::json services = nlohmann::json::array();
    for (const auto& s : cluster_.state().services) {
      const auto& m = s.metrics;
      services.push_back({{"name", s.spec.name},
                          {"desired_replicas", s.desired},
                          {"available_replicas", s.available()},
                          {"pending_replicas", s.pending()},
                          {"min_replicas", s.spec.min_replicas},
                          {"max_replicas", s.spec.max_replicas},
                          {"drifted", s.drifted},
                          {"rps", m.rps_served},
                          {"offered_rps", m.offered_rps},
                          {"cpu_vcpu", m.cpu_vcpu},
                          {"mem_mb", m.mem_mb},
                          {"p95_latency_ms", m.p95_latency_ms},
                          {"error_rate", m.error_rate},
                          {"utilization", m.utilization}});
    }
    nlohmann::json faults = nlohmann::json::array();
    for (const auto& f : cluster_.state().active_faults)
      faults.push_back({{"id", f.fault_id}, {"kind", to_string(f.fault.kind)}, {"service", f.fault.target_service}});
    return {{"clock_s", cluster_.clock()}, {"mode", to_string(cfg_.mode)}, {"services", services},
            {"active_faults", faults}, {"open_incidents", open_incident_count()}};
  }

  nlohmann::json approvals_json() const {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& r : control_.pending_approvals()) out.push_back(control::to_json(r, control_.get(r.action_id)));
    return out;
  }

  int open_incident_count() const {
    return static_cast<int>(std::count_if(incidents_.incidents().begin(), incidents_.incidents().end(),
                                          [](const auto& r) { return !r.recovered(); }));
  }

 private:
  struct Triage {
    int incident_id;
    double due_s;
    bool done = false;
    std::optional<double> executed_s;
  };

  void emit(double ts, std::string_view kind, nlohmann::json payload) {
    events_.append(ts, std::string(kind), std::move(payload));
  }

  void flush_audit() {
    const auto& log = control_.audit_log();
    for (; audit_cursor_ < log.size(); ++audit_cursor_) {
      const auto& e = log[audit_cursor_];
      emit(e.ts, event_kind_for(e.verdict), control::to_json(e));
    }
  }

  void drain_commands(double now) {
    auto batch = commands_.drain();
    if (batch.empty()) return;
    std::vector<CommandResult> results;
    for (auto& [cmd, promise] : batch) results.push_back(apply(cmd, now));
    if (on_commands_applied_) on_commands_applied_();
    for (std::size_t i = 0; i < batch.size(); ++i) batch[i].second.set_value(std::move(results[i]));
  }

  CommandResult apply(const Command& cmd, double now) {
    if (const auto* d = std::get_if<DecideCommand>(&cmd)) {
      try {
        control_.decide(d->action_id, d->decision, now, "operator");
      } catch (const NotFound& e) {
        return {404, {{"error", e.what()}}};
      } catch (const Conflict& e) {
        return {409, {{"error", e.what()}}};
      }
      flush_audit();
      return {200, control::to_json(control_.get(d->action_id))};
    }
    const auto& inject = std::get<InjectCommand>(cmd);
    try {
      cluster_.inject_fault(inject.fault);
    } catch (const NotFound& e) {
      return {404, {{"error", e.what()}}};
    } catch (const ConfigError& e) {
      return {400, {{"error", e.what()}, {"field", e.key()}}};
    }
    const auto& marker = cluster_.markers().back();
    take_markers();
    return {200, {{"fault_id", marker.fault_id}, {"rejected", marker.rejected}, {"at_s", marker.at_s}}};
  }

  void control_tick(double now) {
    control_.expire_due(now);
    flush_audit();
    if (cfg_.mode == Mode::baseline) {
      for (auto& t : triage_) {
        if (t.done || t.due_s > now) continue;
        t.done = true;
        const auto& inc = incidents_.get(t.incident_id);
        if (inc.recovered()) continue;
        const auto* svc = cluster_.state().find(inc.service);
        const auto fix = control::triage_fix(inc.fault_kind, intelligence::ServiceView::of(*svc), cfg_.detector);
        control_.submit(fix, cluster_.state(), now, "operator", inc.id);
        flush_audit();
        t.executed_s = now;
      }
    }
    execute_ready(now);
  }

  void execute_ready(double now) {
    for (int id : control_.ready()) {
      control_.execute(id, cluster_, now);
      flush_audit();
    }
  }

  void take_markers() {
    const auto& markers = cluster_.markers();
    for (; marker_cursor_ < markers.size(); ++marker_cursor_) {
      const auto& m = markers[marker_cursor_];
      const int id = incidents_.open_incident(m.fault.target_service, std::string(to_string(m.fault.kind)), m.at_s,
                                              m.fault.schedule_index);
      emit(m.at_s, "incident_opened", telemetry::to_json(incidents_.get(id)));
      if (m.rejected) {
        // Refused at admission: detected the moment it was attempted.
        incidents_.mark_detected(id, m.at_s, "admission");
        emit(m.at_s, "incident_detected", telemetry::to_json(incidents_.get(id)));
      }
    }
  }

  std::vector<int> open_on(const std::string& service, bool detected) const {
    std::vector<int> out;
    for (const auto& r : incidents_.incidents())
      if (r.service == service && !r.recovered() && r.detected() == detected) out.push_back(r.id);
    return out;
  }

  void detect(int id, double now, std::string_view detector) {
    if (!incidents_.mark_detected(id, now, std::string(detector))) return;
    emit(now, "incident_detected", telemetry::to_json(incidents_.get(id)));
    if (cfg_.mode == Mode::baseline) triage_.push_back({id, now + triage_clock_.draw_delay()});
  }

  // Opens an incident for a breach no scheduled fault explains.
  int open_spontaneous(const std::string& service, double now) {
    const double start = breach_start_.count(service) ? breach_start_[service] : now;
    const int id = incidents_.open_incident(service, "slo_breach", start);
    emit(now, "incident_opened", telemetry::to_json(incidents_.get(id)));
    return id;
  }

  void on_scrape(double now) {
    const auto& state = cluster_.state();
    const auto samples = telemetry::scrape(state, store_, cfg_.labels);
    const auto views = telemetry::by_service(samples);

    ScrapeRecord rec;
    rec.ts_s = now;
    nlohmann::json payload = nlohmann::json::object();
    for (const auto& svc : state.services) {
      const auto& view = views.at(svc.spec.name);
      const auto verdict = telemetry::evaluate_slo(view, cfg_.slo);
      const auto& m = svc.metrics;
      rec.services.push_back({svc.spec.name, m.rps_served, m.cpu_vcpu, m.mem_mb, m.p95_latency_ms, m.error_rate,
                              svc.desired, svc.available(), verdict});
      payload[svc.spec.name] = {{"rps", m.rps_served},          {"cpu_vcpu", m.cpu_vcpu},
                                {"mem_mb", m.mem_mb},           {"p95_latency_ms", m.p95_latency_ms},
                                {"error_rate", m.error_rate},   {"desired_replicas", svc.desired},
                                {"available_replicas", svc.available()},
                                {"verdict", to_string(verdict)}};
    }
    scrapes_.push_back(rec);
    emit(now, "scrape", payload);

    for (const auto& r : rec.services) {
      const auto& svc = *state.find(r.service);
      if (r.verdict == telemetry::Verdict::non_compliant) {
        if (!breach_start_.count(r.service)) breach_start_[r.service] = now;
      } else {
        breach_start_.erase(r.service);
      }
      check_recovery(r, svc, now);
      if (cfg_.mode == Mode::baseline)
        baseline_scrape(r, now);
      else
        cpe_scrape(views.at(r.service), r, svc, now);
    }

    for (const auto& v : violations_.observe(now, control::find_violations(cluster_.state(), cfg_.policies)))
      emit(now, "violation", {{"rule_id", v.rule_id}, {"service", v.service}, {"detail", v.detail}});
  }

  void check_recovery(const ServiceScrapeRecord& r, const sim::ServiceState& svc, double now) {
    for (int id : open_on(r.service, true)) {
      const telemetry::RecoveryObservation obs{now, r.verdict, r.available, r.desired, svc.drifted};
      if (incidents_.check_recovery(id, obs)) {
        emit(now, "incident_recovered", telemetry::to_json(incidents_.get(id)));
        if (cfg_.mode == Mode::baseline && open_on(r.service, true).empty()) alert_.release(r.service);
      }
    }
  }

  void baseline_scrape(const ServiceScrapeRecord& r, double now) {
    if (alert_.observe(r.service, now, r.verdict)) {
      auto undetected = open_on(r.service, false);
      if (undetected.empty() && open_on(r.service, true).empty()) undetected.push_back(open_spontaneous(r.service, now));
      if (undetected.empty()) alert_.release(r.service);
      for (int id : undetected) detect(id, now, "slo_alert_rule");
    }
    // Unresolved after a fix: the operator takes another look.
    for (int id : open_on(r.service, true)) {
      std::optional<double> last;
      bool waiting = false;
      for (const auto& t : triage_) {
        if (t.incident_id != id) continue;
        if (!t.done) waiting = true;
        if (t.executed_s) last = t.executed_s;
      }
      if (!waiting && last && now - *last >= cfg_.retriage_after_s)
        triage_.push_back({id, now + triage_clock_.draw_delay()});
    }
  }

  void cpe_scrape(const telemetry::ServiceScrape& view, const ServiceScrapeRecord& r, const sim::ServiceState& svc,
                  double now) {
    const auto fv = builders_.at(r.service).build(r.service, view);
    if (now < cfg_.warmup_s) {
      training_[r.service].push_back(fv);
    } else if (!models_.count(r.service)) {
      const auto index = static_cast<std::uint64_t>(&svc - cluster_.state().services.data());
      models_[r.service] = intelligence::IsolationForestModel::fit(
          training_[r.service], derive_seed(derive_seed(cfg_.seed, seed_stream::forest), index), cfg_.detector.forest);
      if (const auto* m = model(r.service))
        emit(now, "model_fitted", {{"service", r.service}, {"model", intelligence::model_summary(*m, cfg_.detector.threshold)}});
    }
    const bool breach = breach_.observe(r.service, r.verdict);
    const bool under = now >= cfg_.warmup_s && underutil_.observe(r.service, svc.metrics.utilization);

    auto report = intelligence::detect(model(r.service), fv, cfg_.detector.threshold, breach);
    if (!report && under) {
      report = intelligence::AnomalyReport{};
      report->ts_s = now;
      report->service = r.service;
      report->threshold = cfg_.detector.threshold;
      report->trigger = intelligence::Trigger::underutilization;
    }
    if (!report) return;
    nlohmann::json a = {{"service", r.service}, {"trigger", to_string(report->trigger)}, {"threshold", report->threshold}};
    a["score"] = report->score ? nlohmann::json(*report->score) : nlohmann::json(nullptr);
    emit(now, "anomaly", a);

    std::optional<int> incident;
    if (report->trigger != intelligence::Trigger::underutilization) {
      auto undetected = open_on(r.service, false);
      if (undetected.empty() && report->trigger == intelligence::Trigger::slo_breach &&
          open_on(r.service, true).empty())
        undetected.push_back(open_spontaneous(r.service, now));
      for (int id : undetected) detect(id, now, to_string(report->trigger));
      if (auto open = incidents_.open_for(r.service)) incident = *open;
    } else if (incidents_.open_for(r.service)) {
      return;  // no right-sizing during an incident
    }

    // Let earlier actions land before proposing more.
    if (control_.has_pending(r.service) || svc.pending() > 0) return;
    for (const auto& p : intelligence::reason(*report, intelligence::ServiceView::of(svc), cfg_.detector)) {
      control_.submit(p, cluster_.state(), now, "cpe", incident);
      flush_audit();
    }
    execute_ready(now);
  }

  EngineConfig cfg_;
  sim::Cluster cluster_;
  control::ControlPlane control_;
  telemetry::IncidentTracker incidents_;
  telemetry::MetricStore store_;
  control::ViolationTracker violations_;
  intelligence::SloAlertRule alert_;
  intelligence::BreachCounter breach_;
  intelligence::UnderutilizationTracker underutil_;
  control::TriageClock triage_clock_;
  std::map<std::string, intelligence::FeatureBuilder> builders_;
  std::map<std::string, std::vector<intelligence::FeatureVector>> training_;
  std::map<std::string, std::optional<intelligence::IsolationForestModel>> models_;
  std::map<std::string, double> breach_start_;
  std::vector<Triage> triage_;
  std::vector<ScrapeRecord> scrapes_;
  EventLog events_;
  CommandQueue commands_;
  std::function<void()> on_commands_applied_;
  std::size_t audit_cursor_ = 0;
  std::size_t marker_cursor_ = 0;
};

}  // namespace cpe::engine

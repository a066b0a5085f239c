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
#include <cstdint>
#include <deque>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpe/common.hpp"
#include "cpe/intelligence.hpp"
#include "cpe/simcluster.hpp"
#include "cpe/telemetry.hpp"

namespace cpe::control {

using intelligence::ProposedAction;

enum class RuleKind { replica_bounds, forbidden_action, rate_limit, approval_required, drift_forbidden };

inline std::string_view to_string(RuleKind k) {
  switch (k) {
    case RuleKind::replica_bounds: return "replica_bounds";
    case RuleKind::forbidden_action: return "forbidden_action";
    case RuleKind::rate_limit: return "rate_limit";
    case RuleKind::approval_required: return "approval_required";
    case RuleKind::drift_forbidden: return "drift_forbidden";
  }
  return "?";
}

inline std::optional<RuleKind> parse_rule_kind(std::string_view s) {
  for (auto k : {RuleKind::replica_bounds, RuleKind::forbidden_action, RuleKind::rate_limit,
                 RuleKind::approval_required, RuleKind::drift_forbidden})
    if (to_string(k) == s) return k;
  return std::nullopt;
}

struct PolicyRule {
  std::string id;
  RuleKind kind = RuleKind::replica_bounds;
  // Restricts the rule to one service; empty applies to all.
  std::string service;
  // replica_bounds: absent bounds fall back to the service's own spec.
  std::optional<int> min_replicas;
  std::optional<int> max_replicas;
  // forbidden_action
  std::vector<ActionKind> actions;
  // rate_limit
  int max_actions = 5;
  double window_s = 600;
  // approval_required
  std::vector<Risk> risks;

  bool applies_to(const std::string& svc) const { return service.empty() || service == svc; }

  void validate(const std::string& path) const {
    if (id.empty()) throw ConfigError(path + ".id", "rule id must not be empty");
    switch (kind) {
      case RuleKind::replica_bounds:
        if (min_replicas && *min_replicas < 0) throw ConfigError(path + ".min_replicas", "must be >= 0");
        if (min_replicas && max_replicas && *min_replicas > *max_replicas)
          throw ConfigError(path + ".max_replicas", "max_replicas below min_replicas");
        break;
      case RuleKind::forbidden_action:
        if (actions.empty()) throw ConfigError(path + ".actions", "forbidden_action needs at least one action");
        break;
      case RuleKind::rate_limit:
        if (max_actions < 1) throw ConfigError(path + ".max_actions", "must be >= 1");
        if (!(window_s > 0)) throw ConfigError(path + ".window_s", "must be > 0");
        break;
      case RuleKind::approval_required:
        if (risks.empty()) throw ConfigError(path + ".risks", "approval_required needs at least one risk class");
        break;
      case RuleKind::drift_forbidden:
        break;
    }
  }
};

struct PolicySet {
  std::vector<PolicyRule> rules;

  void validate() const {
    std::set<std::string> seen;
    for (std::size_t i = 0; i < rules.size(); ++i) {
      const std::string path = "policies.rules[" + std::to_string(i) + "]";
      rules[i].validate(path);
      if (!seen.insert(rules[i].id).second) throw ConfigError(path + ".id", "duplicate rule id '" + rules[i].id + "'");
    }
  }

  bool has(RuleKind k) const {
    return std::any_of(rules.begin(), rules.end(), [k](const PolicyRule& r) { return r.kind == k; });
  }

  static PolicySet defaults() {
    PolicySet p;
    PolicyRule bounds{.id = "replica-bounds", .kind = RuleKind::replica_bounds};
    PolicyRule rate{.id = "rate-limit", .kind = RuleKind::rate_limit};
    PolicyRule approval{.id = "approve-high-risk", .kind = RuleKind::approval_required};
    approval.risks = {Risk::high};
    PolicyRule drift{.id = "no-config-drift", .kind = RuleKind::drift_forbidden};
    p.rules = {bounds, rate, approval, drift};
    return p;
  }
};

enum class Verdict { allow, deny, require_approval };

inline std::string_view to_string(Verdict v) {
  switch (v) {
    case Verdict::allow: return "allow";
    case Verdict::deny: return "deny";
    case Verdict::require_approval: return "require_approval";
  }
  return "?";
}

struct PolicyDecision {
  Verdict verdict = Verdict::allow;
  std::vector<std::string> trail;        // every rule consulted
  std::vector<std::string> matched;      // rules that denied or demanded approval
};

// Facts about the target service needed to evaluate a proposal.
struct PolicyContext {
  int desired = 0;
  int spec_min = 0;
  int spec_max = 0;
  bool service_known = true;
  // Timestamps of actions already executed on the service.
  std::vector<double> executed_at;
  double now = 0;
};

inline PolicyContext context_for(const sim::ClusterState& state, const std::string& service,
                                 std::vector<double> executed_at, double now) {
  PolicyContext c;
  c.now = now;
  c.executed_at = std::move(executed_at);
  const auto* s = state.find(service);
  if (!s) {
    c.service_known = false;
    return c;
  }
  c.desired = s->desired;
  c.spec_min = s->spec.min_replicas;
  c.spec_max = s->spec.max_replicas;
  return c;
}

inline PolicyDecision evaluate_policy(const ProposedAction& p, const PolicySet& policies, const PolicyContext& ctx) {
  PolicyDecision d;
  bool deny = false;
  bool approval = false;
  const auto& a = p.action;
  for (const auto& r : policies.rules) {
    d.trail.push_back(r.id);
    if (!r.applies_to(a.service)) continue;
    bool hit = false;
    switch (r.kind) {
      case RuleKind::replica_bounds: {
        if (a.kind != ActionKind::scale_up && a.kind != ActionKind::scale_down) break;
        const int lo = r.min_replicas.value_or(ctx.spec_min);
        const int hi = r.max_replicas.value_or(ctx.spec_max);
        const int target = ctx.desired + (a.kind == ActionKind::scale_up ? a.amount : -a.amount);
        hit = target < lo || target > hi;
        deny |= hit;
        break;
      }
      case RuleKind::forbidden_action:
        hit = std::find(r.actions.begin(), r.actions.end(), a.kind) != r.actions.end();
        deny |= hit;
        break;
      case RuleKind::rate_limit: {
        const auto n = std::count_if(ctx.executed_at.begin(), ctx.executed_at.end(),
                                     [&](double t) { return t > ctx.now - r.window_s && t <= ctx.now; });
        hit = n >= r.max_actions;
        deny |= hit;
        break;
      }
      case RuleKind::approval_required:
        hit = std::find(r.risks.begin(), r.risks.end(), p.risk) != r.risks.end();
        approval |= hit;
        break;
      case RuleKind::drift_forbidden:
        // Governs cluster state, not actions.
        break;
    }
    if (hit) d.matched.push_back(r.id);
  }
  d.verdict = deny ? Verdict::deny : approval ? Verdict::require_approval : Verdict::allow;
  return d;
}

enum class Status { proposed, pending_approval, approved, denied, executed, expired };

inline std::string_view to_string(Status s) {
  switch (s) {
    case Status::proposed: return "proposed";
    case Status::pending_approval: return "pending_approval";
    case Status::approved: return "approved";
    case Status::denied: return "denied";
    case Status::executed: return "executed";
    case Status::expired: return "expired";
  }
  return "?";
}

enum class Decision { approve, deny };

inline std::string_view to_string(Decision d) { return d == Decision::approve ? "approve" : "deny"; }

inline std::optional<Decision> parse_decision(std::string_view s) {
  if (s == "approve") return Decision::approve;
  if (s == "deny") return Decision::deny;
  return std::nullopt;
}

struct Transition {
  Status status;
  double ts;
};

struct RemediationAction {
  int id = 0;
  ProposedAction proposal;
  Status status = Status::proposed;
  std::vector<std::string> trail;
  std::vector<Transition> transitions;
  // policy, operator or timeout_policy; empty until decided.
  std::string decided_by;
  std::string reason;
  std::optional<int> incident_id;
};

struct ApprovalRequest {
  int action_id = 0;
  double created_ts = 0;
  double deadline_ts = 0;
  std::optional<Decision> decision;
  std::string decided_by;
};

struct AuditEntry {
  double ts = 0;
  std::uint64_t seq = 0;
  std::string actor;
  int action_id = 0;
  std::string action;  // "<kind> <service> <amount>"
  std::string verdict;
  std::vector<std::string> rules;
  std::string detail;
};

struct ApprovalSettings {
  double timeout_s = 120;
  Decision timeout_decision = Decision::deny;
};

inline std::string describe(const ActionSpec& a) {
  return std::string(to_string(a.kind)) + " " + a.service + " " + std::to_string(a.amount);
}

inline nlohmann::json to_json(const AuditEntry& e) {
  return {{"ts", e.ts}, {"seq", e.seq}, {"actor", e.actor}, {"action_id", e.action_id}, {"action", e.action},
          {"verdict", e.verdict}, {"rules", e.rules}, {"detail", e.detail}};
}

inline nlohmann::json to_json(const ProposedAction& p) {
  return {{"kind", to_string(p.action.kind)}, {"service", p.action.service}, {"amount", p.action.amount},
          {"risk", to_string(p.risk)}, {"rationale", p.rationale}};
}

inline nlohmann::json to_json(const RemediationAction& a) {
  nlohmann::json t = nlohmann::json::array();
  for (const auto& tr : a.transitions) t.push_back({{"status", to_string(tr.status)}, {"ts", tr.ts}});
  nlohmann::json j = {{"id", a.id},           {"proposal", to_json(a.proposal)}, {"status", to_string(a.status)},
                      {"trail", a.trail},     {"transitions", t},                {"decided_by", a.decided_by},
                      {"reason", a.reason}};
  j["incident_id"] = a.incident_id ? nlohmann::json(*a.incident_id) : nlohmann::json(nullptr);
  return j;
}

inline nlohmann::json to_json(const ApprovalRequest& r, const RemediationAction& a) {
  nlohmann::json j = {{"id", r.action_id},        {"created_ts", r.created_ts}, {"deadline_ts", r.deadline_ts},
                      {"action", to_json(a.proposal)}, {"trail", a.trail},        {"decided_by", r.decided_by}};
  j["decision"] = r.decision ? nlohmann::json(to_string(*r.decision)) : nlohmann::json(nullptr);
  return j;
}

// Policy gate, approval queue, executor and audit log. Single writer: the
// engine loop.
class ControlPlane {
 public:
  explicit ControlPlane(PolicySet policies = PolicySet::defaults(), ApprovalSettings approvals = {})
      : policies_(std::move(policies)), settings_(approvals) {
    policies_.validate();
    if (!(settings_.timeout_s > 0)) throw ConfigError("control.approval_timeout_s", "must be > 0");
  }

  const PolicySet& policies() const { return policies_; }
  const ApprovalSettings& approval_settings() const { return settings_; }

  // Evaluates and gates a proposal. `actor` is recorded in the audit;
  // operator-submitted actions carry their own approval.
  int submit(const ProposedAction& p, const sim::ClusterState& state, double now, const std::string& actor = "cpe",
             std::optional<int> incident_id = std::nullopt) {
    RemediationAction a;
    a.id = next_id_++;
    a.proposal = p;
    a.incident_id = incident_id;
    a.transitions.push_back({Status::proposed, now});
    const auto decision = evaluate_policy(p, policies_, context_for(state, p.action.service, executed_on(p.action.service), now));
    a.trail = decision.trail;
    audit(now, actor, a, "proposed", a.trail, p.rationale);
    switch (decision.verdict) {
      case Verdict::allow:
        transition(a, Status::approved, now);
        a.decided_by = actor == "operator" ? "operator" : "policy";
        audit(now, "policy", a, "allow", decision.trail, "");
        break;
      case Verdict::deny:
        transition(a, Status::denied, now);
        a.decided_by = "policy";
        a.reason = "denied by " + join(decision.matched);
        audit(now, "policy", a, "deny", decision.matched, a.reason);
        break;
      case Verdict::require_approval:
        transition(a, Status::pending_approval, now);
        audit(now, "policy", a, "require_approval", decision.matched, "");
        if (actor == "operator") {
          actions_.emplace(a.id, a);
          approvals_.emplace(a.id, ApprovalRequest{a.id, now, now + settings_.timeout_s, std::nullopt, ""});
          decide(a.id, Decision::approve, now, "operator");
          return a.id;
        }
        approvals_.emplace(a.id, ApprovalRequest{a.id, now, now + settings_.timeout_s, std::nullopt, ""});
        break;
    }
    actions_.emplace(a.id, a);
    return a.id;
  }

  // Throws NotFound for an unknown id and Conflict once decided or expired.
  void decide(int action_id, Decision d, double now, const std::string& by = "operator") {
    auto it = approvals_.find(action_id);
    if (it == approvals_.end()) throw NotFound("no approval request " + std::to_string(action_id));
    auto& req = it->second;
    if (req.decision) throw Conflict("approval " + std::to_string(action_id) + " already decided");
    auto& a = actions_.at(action_id);
    if (a.status != Status::pending_approval)
      throw Conflict("approval " + std::to_string(action_id) + " is " + std::string(to_string(a.status)));
    req.decision = d;
    req.decided_by = by;
    a.decided_by = by;
    if (d == Decision::approve) {
      transition(a, Status::approved, now);
      audit(now, by, a, "approved", {}, "");
    } else {
      transition(a, Status::denied, now);
      a.reason = "denied by " + by;
      audit(now, by, a, "denied", {}, "");
    }
  }

  // Applies the timeout policy to requests past their deadline.
  void expire_due(double now) {
    for (auto& [id, req] : approvals_) {
      if (req.decision || now < req.deadline_ts) continue;
      auto& a = actions_.at(id);
      if (a.status != Status::pending_approval) continue;
      req.decision = settings_.timeout_decision;
      req.decided_by = "timeout_policy";
      a.decided_by = "timeout_policy";
      if (settings_.timeout_decision == Decision::approve) {
        transition(a, Status::approved, now);
        audit(now, "timeout_policy", a, "approved", {}, "approval timeout");
      } else {
        transition(a, Status::expired, now);
        a.reason = "approval timeout";
        audit(now, "timeout_policy", a, "expired", {}, "approval timeout");
      }
    }
  }

  // Approved actions not yet executed, in id order.
  std::vector<int> ready() const {
    std::vector<int> out;
    for (const auto& [id, a] : actions_)
      if (a.status == Status::approved) out.push_back(id);
    return out;
  }

  // Simulator rejection reverts the action to denied.
  sim::ActionOutcome execute(int action_id, sim::Cluster& cluster, double now) {
    auto& a = get_mut(action_id);
    if (a.status != Status::approved)
      throw ContractViolation("execute requires an approved action, got " + std::string(to_string(a.status)));
    sim::ActionOutcome out;
    try {
      out = cluster.apply_action(a.proposal.action);
    } catch (const NotFound& e) {
      transition(a, Status::denied, now);
      a.reason = e.what();
      audit(now, "executor", a, "rejected", {}, a.reason);
      return out;
    }
    transition(a, Status::executed, now);
    executed_[a.proposal.action.service].push_back(now);
    audit(now, "executor", a, "executed", {}, out.detail);
    return out;
  }

  bool has_pending(const std::string& service) const {
    return std::any_of(actions_.begin(), actions_.end(), [&](const auto& kv) {
      return kv.second.proposal.action.service == service &&
             (kv.second.status == Status::pending_approval || kv.second.status == Status::approved);
    });
  }

  std::vector<ApprovalRequest> pending_approvals() const {
    std::vector<ApprovalRequest> out;
    for (const auto& [id, req] : approvals_)
      if (!req.decision && actions_.at(id).status == Status::pending_approval) out.push_back(req);
    return out;
  }

  const RemediationAction& get(int id) const {
    auto it = actions_.find(id);
    if (it == actions_.end()) throw NotFound("no action " + std::to_string(id));
    return it->second;
  }
  const std::map<int, RemediationAction>& actions() const { return actions_; }
  const std::map<int, ApprovalRequest>& approvals() const { return approvals_; }
  const std::vector<AuditEntry>& audit_log() const { return audit_; }

  std::string audit_jsonl() const {
    std::string out;
    for (const auto& e : audit_) out += to_json(e).dump() + "\n";
    return out;
  }

  void export_audit(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
    f << audit_jsonl();
    if (!f) throw std::runtime_error("write failed for '" + path + "'");
  }

  std::vector<double> executed_on(const std::string& service) const {
    auto it = executed_.find(service);
    return it == executed_.end() ? std::vector<double>{} : it->second;
  }

 private:
  RemediationAction& get_mut(int id) {
    auto it = actions_.find(id);
    if (it == actions_.end()) throw NotFound("no action " + std::to_string(id));
    return it->second;
  }

  static void transition(RemediationAction& a, Status s, double ts) {
    a.status = s;
    a.transitions.push_back({s, ts});
  }

  static std::string join(const std::vector<std::string>& v) {
    std::string s;
    for (const auto& x : v) s += (s.empty() ? "" : ",") + x;
    return s;
  }

  void audit(double ts, const std::string& actor, const RemediationAction& a, const std::string& verdict,
             std::vector<std::string> rules, const std::string& detail) {
    if (!audit_.empty() && ts < audit_.back().ts) throw ContractViolation("audit timestamps must not decrease");
    audit_.push_back({ts, seq_++, actor, a.id, describe(a.proposal.action), verdict, std::move(rules), detail});
  }

  PolicySet policies_;
  ApprovalSettings settings_;
  int next_id_ = 1;
  std::uint64_t seq_ = 0;
  std::map<int, RemediationAction> actions_;
  std::map<int, ApprovalRequest> approvals_;
  std::vector<AuditEntry> audit_;
  std::map<std::string, std::vector<double>> executed_;
};

// Admission check for injected faults; a drift_forbidden rule refuses
// config drift on the services it covers.
inline bool admits(const PolicySet& p, const sim::FaultEvent& f) {
  if (f.kind != sim::FaultKind::config_drift) return true;
  return std::none_of(p.rules.begin(), p.rules.end(), [&](const PolicyRule& r) {
    return r.kind == RuleKind::drift_forbidden && r.applies_to(f.target_service);
  });
}

inline constexpr double kTriageMedianS = 150;
inline constexpr double kTriageSigma = 0.35;

// Human diagnosis plus action time, one draw per incident.
class TriageClock {
 public:
  TriageClock(Mode mode, std::uint64_t seed) : mode_(mode), rng_(derive_seed(seed, seed_stream::triage)) {}

  double draw_delay() {
    if (mode_ != Mode::baseline) throw ContractViolation("manual triage runs in baseline mode only");
    return rng_.lognormal(kTriageMedianS, kTriageSigma);
  }

 private:
  Mode mode_;
  Rng rng_;
};

// The fix an operator applies once the fault is diagnosed.
inline ProposedAction triage_fix(const std::string& fault_kind, const intelligence::ServiceView& svc,
                                 const intelligence::DetectorParams& params = {}) {
  ProposedAction p;
  p.action.service = svc.name;
  p.rationale = "manual-triage";
  if (fault_kind == "config_drift") {
    p.action.kind = ActionKind::rollback_config;
  } else if (fault_kind == "pod_eviction") {
    p.action.kind = ActionKind::restart_pod;
    p.action.amount = std::max(1, svc.evicted);
  } else if (fault_kind == "cpu_saturation") {
    p.action.kind = ActionKind::restart_pod;
    p.action.amount = std::max(1, svc.degraded);
  } else {
    intelligence::AnomalyReport r;
    r.trigger = intelligence::Trigger::slo_breach;
    auto q = intelligence::reason(r, svc, params).front();
    q.rationale = "manual-triage";
    return q;
  }
  p.risk = intelligence::risk_of(p.action.kind, true);
  return p;
}

struct ViolationRecord {
  double ts = 0;
  std::string rule_id;
  std::string service;
  std::string detail;
};

struct ViolationEpisode {
  std::string rule_id;
  std::string service;
  double start_s = 0;
  double last_s = 0;
  bool open = true;
};

// Violating conditions that hold in a cluster state.
inline std::vector<ViolationRecord> find_violations(const sim::ClusterState& state, const PolicySet& policies) {
  std::vector<ViolationRecord> out;
  for (const auto& r : policies.rules) {
    for (const auto& s : state.services) {
      if (!r.applies_to(s.spec.name)) continue;
      if (r.kind == RuleKind::drift_forbidden && s.drifted) {
        out.push_back({state.clock_s, r.id, s.spec.name, "config drift active"});
      } else if (r.kind == RuleKind::replica_bounds) {
        const int lo = r.min_replicas.value_or(s.spec.min_replicas);
        const int hi = r.max_replicas.value_or(s.spec.max_replicas);
        if (s.desired < lo || s.desired > hi)
          out.push_back({state.clock_s, r.id, s.spec.name, "desired " + std::to_string(s.desired) + " outside bounds"});
      }
    }
  }
  return out;
}

// Collapses per-scrape violations into contiguous episodes per (rule, service).
class ViolationTracker {
 public:
  // Returns the records that opened a new episode at this scrape.
  std::vector<ViolationRecord> observe(double ts, const std::vector<ViolationRecord>& active) {
    std::vector<ViolationRecord> opened;
    std::set<std::pair<std::string, std::string>> now;
    for (const auto& v : active) {
      const auto key = std::make_pair(v.rule_id, v.service);
      now.insert(key);
      auto it = open_.find(key);
      if (it == open_.end()) {
        open_[key] = episodes_.size();
        episodes_.push_back({v.rule_id, v.service, ts, ts, true});
        records_.push_back(v);
        opened.push_back(v);
      } else {
        episodes_[it->second].last_s = ts;
      }
    }
    for (auto it = open_.begin(); it != open_.end();) {
      if (!now.count(it->first)) {
        episodes_[it->second].open = false;
        it = open_.erase(it);
      } else {
        ++it;
      }
    }
    return opened;
  }

  // Episodes with at least one violating scrape in [from, to).
  std::size_t episodes_in(double from, double to) const {
    return static_cast<std::size_t>(std::count_if(episodes_.begin(), episodes_.end(), [&](const ViolationEpisode& e) {
      return e.last_s >= from && e.start_s < to;
    }));
  }

  double rate_per_hour(double from, double to) const {
    if (!(to > from)) throw ContractViolation("violation window must be non-empty");
    return static_cast<double>(episodes_in(from, to)) / ((to - from) / 3600.0);
  }

  const std::vector<ViolationEpisode>& episodes() const { return episodes_; }
  const std::vector<ViolationRecord>& records() const { return records_; }

 private:
  std::map<std::pair<std::string, std::string>, std::size_t> open_;
  std::vector<ViolationEpisode> episodes_;
  std::vector<ViolationRecord> records_;
};

// Share of executed actions that needed no operator, in percent.
inline std::optional<double> autonomy_rate(const std::map<int, RemediationAction>& actions, double from, double to) {
  int total = 0;
  int autonomous = 0;
  for (const auto& [id, a] : actions) {
    if (a.status != Status::executed) continue;
    const double ts = a.transitions.back().ts;
    if (ts < from || ts >= to) continue;
    ++total;
    if (a.decided_by != "operator") ++autonomous;
  }
  if (total == 0) return std::nullopt;
  return 100.0 * autonomous / total;
}

}  // namespace cpe::control

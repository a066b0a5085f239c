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

#include "cpe/control.hpp"

#include <gtest/gtest.h>

namespace cpe::control {
namespace {

sim::ClusterConfig OneService(int desired = 4) {
  sim::ClusterConfig c;
  sim::ServiceSpec s;
  s.name = "api";
  s.desired_replicas = desired;
  s.min_replicas = 1;
  s.max_replicas = 10;
  c.services.push_back(s);
  c.workload.base_rps = 100;
  return c;
}

ProposedAction Action(ActionKind k, int amount = 1, Risk risk = Risk::low) {
  ProposedAction p;
  p.action = {k, "api", amount};
  p.risk = risk;
  return p;
}

PolicyContext Ctx(int desired) {
  PolicyContext c;
  c.desired = desired;
  c.spec_min = 1;
  c.spec_max = 10;
  return c;
}

TEST(PolicyTest, ScaleBeyondBoundsIsDenied) {
  auto d = evaluate_policy(Action(ActionKind::scale_up, 4), PolicySet::defaults(), Ctx(8));
  EXPECT_EQ(d.verdict, Verdict::deny);
  EXPECT_EQ(d.matched, std::vector<std::string>{"replica-bounds"});
}

TEST(PolicyTest, HighRiskNeedsApproval) {
  auto d = evaluate_policy(Action(ActionKind::rollback_config, 1, Risk::high), PolicySet::defaults(), Ctx(4));
  EXPECT_EQ(d.verdict, Verdict::require_approval);
}

TEST(PolicyTest, DefaultIsAllowAndTrailListsAllRules) {
  PolicySet empty;
  EXPECT_EQ(evaluate_policy(Action(ActionKind::restart_pod), empty, Ctx(4)).verdict, Verdict::allow);
  auto d = evaluate_policy(Action(ActionKind::restart_pod), PolicySet::defaults(), Ctx(4));
  EXPECT_EQ(d.verdict, Verdict::allow);
  EXPECT_EQ(d.trail.size(), 4u);
}

TEST(PolicyTest, DenyDominatesInEveryOrder) {
  PolicyRule forbid{.id = "no-scale-down", .kind = RuleKind::forbidden_action};
  forbid.actions = {ActionKind::scale_down};
  PolicyRule approve{.id = "approve-all", .kind = RuleKind::approval_required};
  approve.risks = {Risk::low, Risk::high};
  PolicyRule bounds{.id = "bounds", .kind = RuleKind::replica_bounds};
  std::vector<PolicyRule> rules = {forbid, approve, bounds};
  std::sort(rules.begin(), rules.end(), [](auto& a, auto& b) { return a.id < b.id; });
  do {
    PolicySet p{rules};
    EXPECT_EQ(evaluate_policy(Action(ActionKind::scale_down, 1, Risk::high), p, Ctx(4)).verdict, Verdict::deny);
  } while (std::next_permutation(rules.begin(), rules.end(), [](auto& a, auto& b) { return a.id < b.id; }));
}

TEST(PolicyTest, ServiceScopedRuleIgnoresOtherServices) {
  PolicyRule forbid{.id = "f", .kind = RuleKind::forbidden_action, .service = "db"};
  forbid.actions = {ActionKind::restart_pod};
  EXPECT_EQ(evaluate_policy(Action(ActionKind::restart_pod), PolicySet{{forbid}}, Ctx(4)).verdict, Verdict::allow);
}

TEST(PolicyTest, RateLimitCountsWindow) {
  auto ctx = Ctx(4);
  ctx.now = 700;
  ctx.executed_at = {50, 150, 200, 300, 400};
  EXPECT_EQ(evaluate_policy(Action(ActionKind::restart_pod), PolicySet::defaults(), ctx).verdict, Verdict::allow);
  ctx.executed_at.push_back(690);
  EXPECT_EQ(evaluate_policy(Action(ActionKind::restart_pod), PolicySet::defaults(), ctx).verdict, Verdict::deny);
}

TEST(PolicyTest, MalformedRulesFailAtLoad) {
  PolicyRule bad{.id = "f", .kind = RuleKind::forbidden_action};
  try {
    PolicySet{{bad}}.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "policies.rules[0].actions");
  }
  PolicyRule a{.id = "x", .kind = RuleKind::drift_forbidden};
  EXPECT_THROW((PolicySet{{a, a}}.validate()), ConfigError);
  PolicyRule rl{.id = "r", .kind = RuleKind::rate_limit, .max_actions = 0};
  EXPECT_THROW(ControlPlane(PolicySet{{rl}}), ConfigError);
}

TEST(GateTest, AllowIsApprovedAtOnce) {
  sim::Cluster cluster(OneService(), 1);
  ControlPlane cp;
  const int id = cp.submit(Action(ActionKind::scale_up), cluster.state(), 30);
  EXPECT_EQ(cp.get(id).status, Status::approved);
  EXPECT_EQ(cp.get(id).transitions.back().ts, 30);
  EXPECT_EQ(cp.ready(), std::vector<int>{id});
}

TEST(GateTest, TimeoutDefaultsToDeny) {
  sim::Cluster cluster(OneService(), 1);
  ControlPlane cp;
  const int id = cp.submit(Action(ActionKind::scale_down, 1, Risk::high), cluster.state(), 30);
  EXPECT_EQ(cp.get(id).status, Status::pending_approval);
  ASSERT_EQ(cp.pending_approvals().size(), 1u);
  EXPECT_EQ(cp.pending_approvals()[0].deadline_ts, 150);
  cp.expire_due(149);
  EXPECT_EQ(cp.get(id).status, Status::pending_approval);
  cp.expire_due(150);
  EXPECT_EQ(cp.get(id).status, Status::expired);
  EXPECT_EQ(cp.get(id).decided_by, "timeout_policy");
  EXPECT_TRUE(cp.pending_approvals().empty());
  EXPECT_THROW(cp.decide(id, Decision::approve, 151), Conflict);
}

TEST(GateTest, TimeoutPolicyMayApprove) {
  sim::Cluster cluster(OneService(), 1);
  ControlPlane cp(PolicySet::defaults(), {30, Decision::approve});
  const int id = cp.submit(Action(ActionKind::scale_down, 1, Risk::high), cluster.state(), 30);
  cp.expire_due(60);
  EXPECT_EQ(cp.get(id).status, Status::approved);
  EXPECT_EQ(cp.get(id).decided_by, "timeout_policy");
}

TEST(GateTest, OperatorDecisions) {
  sim::Cluster cluster(OneService(), 1);
  ControlPlane cp;
  const int a = cp.submit(Action(ActionKind::scale_down, 1, Risk::high), cluster.state(), 30);
  const int b = cp.submit(Action(ActionKind::scale_down, 1, Risk::high), cluster.state(), 30);
  cp.decide(a, Decision::approve, 40);
  cp.decide(b, Decision::deny, 40);
  EXPECT_EQ(cp.get(a).status, Status::approved);
  EXPECT_EQ(cp.get(a).decided_by, "operator");
  EXPECT_EQ(cp.get(b).status, Status::denied);
  EXPECT_THROW(cp.decide(a, Decision::deny, 41), Conflict);
  EXPECT_THROW(cp.decide(99, Decision::deny, 41), NotFound);
  EXPECT_EQ(*cp.approvals().at(a).decision, Decision::approve);
}

TEST(ExecuteTest, ApprovedScaleUpRaisesDesired) {
  sim::Cluster cluster(OneService(), 1);
  ControlPlane cp;
  const int id = cp.submit(Action(ActionKind::scale_up, 2), cluster.state(), 0);
  cp.execute(id, cluster, 0);
  cluster.step(1);
  EXPECT_EQ(cluster.state().services[0].desired, 6);
  EXPECT_EQ(cp.get(id).status, Status::executed);
  EXPECT_EQ(cp.audit_log().back().verdict, "executed");
}

TEST(ExecuteTest, DeniedActionCannotExecute) {
  sim::Cluster cluster(OneService(), 1);
  ControlPlane cp;
  const int id = cp.submit(Action(ActionKind::scale_up, 20), cluster.state(), 0);
  EXPECT_EQ(cp.get(id).status, Status::denied);
  EXPECT_THROW(cp.execute(id, cluster, 0), ContractViolation);
}

TEST(ExecuteTest, RollbackWithoutDriftIsAuditedNoOp) {
  sim::Cluster cluster(OneService(), 1);
  ControlPlane cp;
  const int id = cp.submit(Action(ActionKind::rollback_config, 1, Risk::high), cluster.state(), 0, "operator");
  EXPECT_EQ(cp.get(id).decided_by, "operator");
  const auto out = cp.execute(id, cluster, 0);
  EXPECT_FALSE(out.changed);
  EXPECT_EQ(cp.get(id).status, Status::executed);
  EXPECT_EQ(cp.audit_log().back().verdict, "executed");
}

TEST(ExecuteTest, SimulatorRejectionRevertsToDenied) {
  sim::Cluster cluster(OneService(), 1);
  ControlPlane cp;
  auto p = Action(ActionKind::restart_pod);
  p.action.service = "ghost";
  const int id = cp.submit(p, cluster.state(), 0);
  cp.execute(id, cluster, 0);
  EXPECT_EQ(cp.get(id).status, Status::denied);
  EXPECT_FALSE(cp.get(id).reason.empty());
}

TEST(AuditTest, JsonLinesShape) {
  sim::Cluster cluster(OneService(), 1);
  ControlPlane cp;
  cp.submit(Action(ActionKind::restart_pod), cluster.state(), 0);
  std::istringstream in(cp.audit_jsonl());
  std::string line;
  std::getline(in, line);
  auto j = nlohmann::json::parse(line);
  for (const char* k : {"ts", "seq", "actor", "action", "verdict", "rules"}) EXPECT_TRUE(j.contains(k)) << k;
}

TEST(AdmissionTest, DriftForbiddenRefusesDrift) {
  sim::FaultEvent drift{.kind = sim::FaultKind::config_drift, .target_service = "api", .magnitude = 1};
  sim::FaultEvent evict{.kind = sim::FaultKind::pod_eviction, .target_service = "api", .magnitude = 1};
  EXPECT_FALSE(admits(PolicySet::defaults(), drift));
  EXPECT_TRUE(admits(PolicySet::defaults(), evict));
  EXPECT_TRUE(admits(PolicySet{}, drift));
}

TEST(TriageTest, DelaysAreSeededAndModeGuarded) {
  TriageClock a(Mode::baseline, 11), b(Mode::baseline, 11);
  for (int i = 0; i < 20; ++i) EXPECT_EQ(a.draw_delay(), b.draw_delay());
  TriageClock c(Mode::cpe, 11);
  EXPECT_THROW(c.draw_delay(), ContractViolation);
}

TEST(TriageTest, MedianDelayNear150) {
  TriageClock clock(Mode::baseline, 2024);
  std::vector<double> d(10000);
  for (auto& x : d) x = clock.draw_delay();
  std::nth_element(d.begin(), d.begin() + 5000, d.end());
  EXPECT_GE(d[5000], 140);
  EXPECT_LE(d[5000], 160);
}

TEST(TriageTest, FixMatchesFault) {
  intelligence::ServiceView v;
  v.name = "api";
  v.desired = 4;
  v.max_replicas = 10;
  v.evicted = 2;
  v.degraded = 1;
  v.offered_rps = 300;
  v.capacity_rps_per_replica = 100;
  EXPECT_EQ(triage_fix("config_drift", v).action.kind, ActionKind::rollback_config);
  EXPECT_EQ(triage_fix("pod_eviction", v).action.amount, 2);
  EXPECT_EQ(triage_fix("cpu_saturation", v).action.amount, 1);
  EXPECT_EQ(triage_fix("slo_breach", v).action.kind, ActionKind::restart_pod);
  v.evicted = v.degraded = 0;
  EXPECT_EQ(triage_fix("slo_breach", v).action.kind, ActionKind::scale_up);
}

TEST(ViolationTest, OneEpisodePerContiguousRun) {
  ViolationTracker t;
  for (int ts = 0; ts < 3600; ts += 30) {
    std::vector<ViolationRecord> active;
    if (ts >= 600 && ts < 1500) active.push_back({double(ts), "no-config-drift", "api", ""});
    t.observe(ts, active);
  }
  EXPECT_EQ(t.episodes_in(0, 3600), 1u);
  EXPECT_DOUBLE_EQ(t.rate_per_hour(0, 3600), 1.0);
}

TEST(ViolationTest, ZeroAndSeparateEpisodes) {
  ViolationTracker t;
  for (int ts = 0; ts < 3600; ts += 30) t.observe(ts, {});
  EXPECT_EQ(t.rate_per_hour(0, 3600), 0.0);
  ViolationTracker u;
  const ViolationRecord v{0, "r", "api", ""};
  u.observe(0, {v});
  u.observe(30, {});
  u.observe(60, {v});
  u.observe(90, {v, {90, "r", "db", ""}});
  EXPECT_EQ(u.episodes().size(), 3u);
  // Episodes for the same key never overlap.
  EXPECT_LT(u.episodes()[0].last_s, u.episodes()[1].start_s);
}

TEST(ViolationTest, DriftIsSeenInState) {
  auto cfg = OneService();
  cfg.faults.push_back({.kind = sim::FaultKind::config_drift, .target_service = "api", .at_s = 0, .magnitude = 2});
  sim::Cluster cluster(cfg, 1);
  cluster.step(1);
  auto v = find_violations(cluster.state(), PolicySet::defaults());
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0].rule_id, "no-config-drift");
  PolicyRule tight{.id = "tight", .kind = RuleKind::replica_bounds, .max_replicas = 1};
  EXPECT_EQ(find_violations(cluster.state(), PolicySet{{tight}}).size(), 1u);
}

std::map<int, RemediationAction> Executed(int autonomous, int operator_approved) {
  std::map<int, RemediationAction> m;
  int id = 0;
  for (int i = 0; i < autonomous + operator_approved; ++i) {
    RemediationAction a;
    a.id = ++id;
    a.status = Status::executed;
    a.transitions.push_back({Status::executed, 100});
    a.decided_by = i < autonomous ? "policy" : "operator";
    m[a.id] = a;
  }
  return m;
}

TEST(AutonomyTest, Rates) {
  EXPECT_DOUBLE_EQ(*autonomy_rate(Executed(9, 1), 0, 1000), 90.0);
  EXPECT_DOUBLE_EQ(*autonomy_rate(Executed(5, 0), 0, 1000), 100.0);
  EXPECT_FALSE(autonomy_rate(Executed(0, 0), 0, 1000).has_value());
}

// Random proposals and decisions; every execution must be preceded by an
// allow or approval for that action, and no high-risk action runs without
// an approve decision.
TEST(ControlFuzzTest, NoUngatedExecution) {
  auto cfg = OneService(5);
  sim::Cluster cluster(cfg, 3);
  ControlPlane cp(PolicySet::defaults(), {60, Decision::approve});
  Rng rng(77);
  double now = 0;
  for (int i = 0; i < 1000; ++i) {
    now += static_cast<double>(rng.below(20));
    cp.expire_due(now);
    auto p = Action(static_cast<ActionKind>(rng.below(4)), 1 + static_cast<int>(rng.below(4)),
                    rng.below(2) ? Risk::high : Risk::low);
    cp.submit(p, cluster.state(), now, rng.below(10) == 0 ? "operator" : "cpe");
    auto pending = cp.pending_approvals();
    if (!pending.empty() && rng.below(3) == 0)
      cp.decide(pending[0].action_id, rng.below(2) ? Decision::approve : Decision::deny, now);
    for (int id : cp.ready()) cp.execute(id, cluster, now);
    const auto& s = cluster.state().services[0];
    ASSERT_GE(s.desired, s.spec.min_replicas);
    ASSERT_LE(s.desired, s.spec.max_replicas);
  }
  std::map<int, bool> cleared;
  std::uint64_t seq = 0;
  double ts = 0;
  int executed = 0;
  for (const auto& e : cp.audit_log()) {
    EXPECT_EQ(e.seq, seq++);
    EXPECT_GE(e.ts, ts);
    ts = e.ts;
    if (e.verdict == "allow" || e.verdict == "approved") cleared[e.action_id] = true;
    if (e.verdict == "executed") {
      ++executed;
      EXPECT_TRUE(cleared[e.action_id]) << e.action_id;
      const auto& a = cp.get(e.action_id);
      if (a.proposal.risk == Risk::high) {
        ASSERT_TRUE(cp.approvals().count(a.id));
        EXPECT_EQ(*cp.approvals().at(a.id).decision, Decision::approve);
      }
    }
  }
  EXPECT_GT(executed, 50);
}

}  // namespace
}  // namespace cpe::control

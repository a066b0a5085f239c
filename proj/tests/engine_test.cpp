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

#include "cpe/engine.hpp"

#include <gtest/gtest.h>

#include <set>

#include "cpe/experiment.hpp"

namespace cpe::engine {
namespace {

using experiment::TrialConfig;

TrialConfig Short(Mode mode, double duration = 1200) {
  auto c = experiment::default_trial(experiment::scenario("S2"));
  c.mode = mode;
  c.seed = 7;
  c.duration_s = duration;
  return c;
}

std::unique_ptr<Engine> RunFor(const TrialConfig& c) {
  auto e = std::make_unique<Engine>(c.engine_config());
  e->run_until(c.duration_s);
  return e;
}

TEST(EngineTest, OneScrapeEventPerGridPointAndOneModelPerService) {
  auto e = RunFor(Short(Mode::cpe));
  EXPECT_EQ(e->events().count("scrape"), 40u);
  EXPECT_EQ(e->events().count("model_fitted"), 2u);
  EXPECT_EQ(e->scrapes().size(), 40u);
  ASSERT_NE(e->model("frontend"), nullptr);
  EXPECT_EQ(e->model("nope"), nullptr);
}

TEST(EngineTest, BaselineNeverFitsAModel) {
  auto e = RunFor(Short(Mode::baseline));
  EXPECT_EQ(e->events().count("model_fitted"), 0u);
  EXPECT_EQ(e->model("frontend"), nullptr);
}

TEST(EngineTest, EventStreamIsGaplessAndTimeOrdered) {
  auto e = RunFor(Short(Mode::cpe, 2400));
  const auto all = e->events().after(0);
  ASSERT_FALSE(all.empty());
  for (std::size_t i = 0; i < all.size(); ++i) {
    EXPECT_EQ(all[i].seq, i + 1);
    if (i) {
      EXPECT_GE(all[i].ts, all[i - 1].ts);
    }
  }
  const auto tail = e->events().after(all.size() - 3);
  ASSERT_EQ(tail.size(), 3u);
  EXPECT_EQ(tail.front().seq, all.size() - 2);
}

TEST(EngineTest, EveryAuditRowIsMirroredAsAnEvent) {
  auto e = RunFor(Short(Mode::cpe, 2400));
  const auto& audit = e->control().audit_log();
  std::size_t action_events = 0;
  for (const auto& ev : e->events().after(0))
    if (ev.kind.rfind("action_", 0) == 0 || ev.kind == "approval_pending") ++action_events;
  EXPECT_EQ(action_events, audit.size());
  EXPECT_GT(audit.size(), 0u);
}

TEST(EngineTest, ExecutedActionsArePrecededByAGateVerdict) {
  for (auto mode : {Mode::baseline, Mode::cpe}) {
    auto e = RunFor(Short(mode, 5400));
    std::set<int> gated;
    for (const auto& a : e->control().audit_log()) {
      if (a.verdict == "allow" || a.verdict == "approved") gated.insert(a.action_id);
      if (a.verdict == "executed") {
        EXPECT_TRUE(gated.count(a.action_id)) << a.action;
      }
    }
  }
}

TEST(EngineTest, ZeroFaultsOnSteadyLoadOpensNoIncidents) {
  for (auto mode : {Mode::baseline, Mode::cpe}) {
    auto c = experiment::default_trial(experiment::scenario("S1"));
    c.mode = mode;
    c.fault_schedule = std::vector<sim::FaultEvent>{};
    auto r = experiment::run_trial(c);
    EXPECT_TRUE(r.incidents.empty()) << to_string(mode);
    EXPECT_EQ(r.violations_per_hr, 0.0);
  }
}

TEST(EngineTest, DecideUnknownActionIs404) {
  Engine e(Short(Mode::cpe).engine_config());
  auto f = e.commands().push(DecideCommand{99, control::Decision::approve});
  e.tick();
  auto res = f.get();
  EXPECT_EQ(res.status, 404);
}

TEST(EngineTest, CommandHookRunsBeforeCallersAreAnswered) {
  Engine e(Short(Mode::cpe).engine_config());
  std::vector<std::future_status> seen;
  std::future<CommandResult> f;
  int calls = 0;
  e.set_on_commands_applied([&] {
    ++calls;
    seen.push_back(f.wait_for(std::chrono::seconds(0)));
  });
  e.tick();
  EXPECT_EQ(calls, 0);
  f = e.commands().push(DecideCommand{99, control::Decision::approve});
  e.tick();
  ASSERT_EQ(calls, 1);
  EXPECT_EQ(seen[0], std::future_status::timeout);
  EXPECT_EQ(f.get().status, 404);
}

TEST(EngineTest, InjectValidatesServiceAndMagnitude) {
  Engine e(Short(Mode::cpe).engine_config());
  sim::FaultEvent bad_service{sim::FaultKind::pod_eviction, "nope", 0, 2};
  sim::FaultEvent bad_magnitude{sim::FaultKind::cpu_saturation, "frontend", 0, 1.5};
  sim::FaultEvent good{sim::FaultKind::pod_eviction, "frontend", 0, 2};
  auto f1 = e.commands().push(InjectCommand{bad_service});
  auto f2 = e.commands().push(InjectCommand{bad_magnitude});
  auto f3 = e.commands().push(InjectCommand{good});
  e.run_until(5);
  EXPECT_EQ(f1.get().status, 404);
  auto r2 = f2.get();
  EXPECT_EQ(r2.status, 400);
  EXPECT_TRUE(r2.body.contains("field"));
  auto r3 = f3.get();
  EXPECT_EQ(r3.status, 200);
  EXPECT_FALSE(r3.body["rejected"].get<bool>());
  EXPECT_EQ(e.events().count("incident_opened"), 1u);
  EXPECT_EQ(e.cluster().state().find("frontend")->available(), 6);
}

TEST(EngineTest, AdmissionRefusesDriftInCpeMode) {
  Engine e(Short(Mode::cpe).engine_config());
  auto f = e.commands().push(InjectCommand{{sim::FaultKind::config_drift, "frontend", 0, 1}});
  e.run_until(2);
  auto r = f.get();
  EXPECT_EQ(r.status, 200);
  EXPECT_TRUE(r.body["rejected"].get<bool>());
  EXPECT_FALSE(e.cluster().state().find("frontend")->drifted);
}

// Drift admission off and a deny-on-timeout gate: the rollback waits in the
// queue until an operator decides.
TEST(EngineTest, OperatorDecisionResolvesPendingApprovalOnce) {
  auto c = Short(Mode::cpe, 5400);
  c.drift_admission = false;
  c.approvals = {120, control::Decision::deny};
  c.fault_schedule = std::vector<sim::FaultEvent>{{sim::FaultKind::config_drift, "frontend", 630, 1}};
  Engine e(c.engine_config());
  e.run_until(700);
  int id = 0;
  for (const auto& r : e.control().pending_approvals())
    if (e.control().get(r.action_id).proposal.action.kind == ActionKind::rollback_config) id = r.action_id;
  ASSERT_NE(id, 0);
  EXPECT_EQ(e.approvals_json().size(), e.control().pending_approvals().size());

  auto first = e.commands().push(DecideCommand{id, control::Decision::approve});
  e.tick();
  EXPECT_EQ(first.get().status, 200);
  auto second = e.commands().push(DecideCommand{id, control::Decision::deny});
  e.tick();
  EXPECT_EQ(second.get().status, 409);

  e.run_until(800);
  EXPECT_EQ(e.control().get(id).status, control::Status::executed);
  EXPECT_EQ(e.control().get(id).decided_by, "operator");
  EXPECT_FALSE(e.cluster().state().find("frontend")->drifted);
}

TEST(EngineTest, StateJsonShape) {
  Engine e(Short(Mode::cpe).engine_config());
  e.run_until(31);
  auto j = e.state_json();
  EXPECT_EQ(j["mode"], "cpe");
  EXPECT_EQ(j["services"].size(), 2u);
  EXPECT_EQ(j["services"][0]["desired_replicas"], 8);
  EXPECT_EQ(j["open_incidents"], 0);
}

TEST(TrialTest, FullRunMeasures160ScrapesPerSeries) {
  auto c = Short(Mode::baseline, 5400);
  auto r = experiment::run_trial(c);
  EXPECT_EQ(r.scrapes.size(), 160u);
  EXPECT_EQ(r.incidents.size(), 8u);
}

TEST(TrialTest, ByteIdenticalUnderSameConfigAndSeed) {
  auto c = Short(Mode::cpe, 3000);
  const auto a = experiment::canonical(experiment::to_json(experiment::run_trial(c)));
  const auto b = experiment::canonical(experiment::to_json(experiment::run_trial(c)));
  EXPECT_EQ(a, b);
  c.seed = 8;
  EXPECT_NE(a, experiment::canonical(experiment::to_json(experiment::run_trial(c))));
}

TEST(TrialTest, InvalidConfigIsRejected) {
  auto c = Short(Mode::cpe);
  c.duration_s = 300;
  EXPECT_THROW(experiment::run_trial(c), ConfigError);
  EXPECT_THROW(experiment::scenario("S9"), ConfigError);
}

TEST(ComparisonTest, IdenticalArmsGiveZeroDeltas) {
  auto c = experiment::default_trial(experiment::scenario("S2"));
  auto rep = experiment::run_comparison(c, 2, 42, Mode::baseline, Mode::baseline);
  EXPECT_EQ(*rep.delta_mttr_pct, 0.0);
  EXPECT_EQ(*rep.delta_re_pct, 0.0);
  EXPECT_EQ(*rep.delta_violations_pct, 0.0);
  EXPECT_EQ(rep.cliffs_delta, 0.0);
  EXPECT_GE(rep.mwu.p, 0.99);
}

TEST(ComparisonTest, SwappingArmsFlipsDeltaSigns) {
  auto c = experiment::default_trial(experiment::scenario("S2"));
  auto ab = experiment::run_comparison(c, 1, 42, Mode::baseline, Mode::cpe);
  auto ba = experiment::run_comparison(c, 1, 42, Mode::cpe, Mode::baseline);
  EXPECT_GT(*ab.delta_mttr_pct, 0);
  EXPECT_LT(*ba.delta_mttr_pct, 0);
  EXPECT_EQ(std::signbit(*ab.delta_re_pct), !std::signbit(*ba.delta_re_pct));
  EXPECT_DOUBLE_EQ(ab.cliffs_delta, -ba.cliffs_delta);
  EXPECT_EQ(ab.paired_incidents, ba.paired_incidents);
}

TEST(ComparisonTest, SuiteCoversFourScenarios) {
  auto suite = experiment::scenario_suite(1, 42);
  ASSERT_EQ(suite.size(), 4u);
  std::vector<std::string> ids;
  for (const auto& r : suite) ids.push_back(r.scenario);
  EXPECT_EQ(ids, (std::vector<std::string>{"S1", "S2", "S3", "S4"}));
}

TEST(ComparisonTest, ReportSerializesDeterministically) {
  auto c = experiment::default_trial(experiment::scenario("S2"));
  auto a = experiment::canonical(experiment::to_json(experiment::run_comparison(c, 1, 5)));
  auto b = experiment::canonical(experiment::to_json(experiment::run_comparison(c, 1, 5)));
  EXPECT_EQ(a, b);
  auto j = nlohmann::json::parse(a);
  EXPECT_TRUE(j.contains("delta_mttr_pct"));
  EXPECT_FALSE(experiment::summary_table(j).empty());
}

}  // namespace
}  // namespace cpe::engine

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

#include "cpe/telemetry.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

namespace cpe::telemetry {
namespace {

sim::ClusterConfig OneService() {
  sim::ClusterConfig c;
  sim::ServiceSpec s;
  s.name = "api";
  s.desired_replicas = 4;
  c.services.push_back(s);
  c.workload.base_rps = 150;
  return c;
}

ServiceScrape View(std::optional<double> p95, std::optional<double> err) {
  ServiceScrape v;
  if (p95) v.set(Metric::p95_latency_ms, *p95);
  if (err) v.set(Metric::error_rate, *err);
  return v;
}

TEST(ScrapeTest, OneSamplePerServiceMetric) {
  sim::Cluster cluster(OneService(), 1);
  MetricStore store;
  const auto samples = scrape(cluster.state(), store, {{"mode", "cpe"}});
  EXPECT_EQ(samples.size(), 7u);
  EXPECT_EQ(store.size(), 7u);
  for (const auto& s : samples) {
    EXPECT_EQ(s.labels.at("service"), "api");
    EXPECT_EQ(s.labels.at("mode"), "cpe");
  }
}

TEST(ScrapeTest, OffGridScrapeIsAContractViolation) {
  sim::Cluster cluster(OneService(), 1);
  cluster.step(1);
  MetricStore store;
  EXPECT_THROW(scrape(cluster.state(), store), ContractViolation);
}

TEST(ScrapeTest, NinetyMinuteRunYields180ScrapesAnd160Measured) {
  sim::Cluster cluster(OneService(), 1);
  MetricStore store;
  for (int t = 0; t < 5400; ++t) {
    if (t % 30 == 0) scrape(cluster.state(), store);
    cluster.step(1);
  }
  const SeriesKey key{Metric::rps, {{"service", "api"}}};
  const auto* series = store.find(key);
  ASSERT_NE(series, nullptr);
  EXPECT_EQ(series->points().size(), 180u);
  for (std::size_t i = 1; i < series->points().size(); ++i)
    EXPECT_LT(series->points()[i - 1].ts_s, series->points()[i].ts_s);
  EXPECT_EQ(store.query_window(key, 600, 5400).size(), 160u);
  EXPECT_EQ(store.query_window(key, 0, 5400).size(), 180u);
}

TEST(SeriesTest, RejectsNonIncreasingTimestamps) {
  MetricSeries s;
  s.append(30, 1);
  EXPECT_THROW(s.append(30, 2), ContractViolation);
}

TEST(QueryWindowTest, InvertedRangeIsRejectedAndGapsAreEmpty) {
  MetricStore store;
  const SeriesKey key{Metric::rps, {{"service", "api"}}};
  store.append({30, Metric::rps, 1, key.labels});
  store.append({60, Metric::rps, 2, key.labels});
  EXPECT_THROW(store.query_window(key, 100, 90), ContractViolation);
  EXPECT_TRUE(store.query_window(key, 31, 59).empty());
  EXPECT_TRUE(store.query_window({Metric::mem, {}}, 0, 100).empty());
}

TEST(SloTest, Verdicts) {
  const SloSpec slo{200, 0.02, Strictness::standard};
  EXPECT_EQ(evaluate_slo(View(180, 0.01), slo), Verdict::compliant);
  EXPECT_EQ(evaluate_slo(View(250, 0.01), slo), Verdict::non_compliant);
  EXPECT_EQ(evaluate_slo(View(180, std::nullopt), slo), Verdict::unknown);
}

TEST(SloTest, Presets) {
  EXPECT_EQ(SloSpec::preset(Strictness::standard).latency_p95_ms_max, 200);
  EXPECT_EQ(SloSpec::preset(Strictness::strict).error_rate_max, 0.01);
  EXPECT_EQ(SloSpec::preset(Strictness::relaxed).latency_p95_ms_max, 300);
}

RecoveryObservation Ok(double ts) { return {ts, Verdict::compliant, 4, 4, false}; }
RecoveryObservation Breach(double ts) { return {ts, Verdict::non_compliant, 4, 4, false}; }

TEST(IncidentTest, RecoveryUsesFirstScrapeOfSustainedWindow) {
  IncidentTracker t;
  const int id = t.open_incident("api", "pod_eviction", 70);
  EXPECT_TRUE(t.mark_detected(id, 100, "slo_rule"));
  EXPECT_FALSE(t.check_recovery(id, Ok(220)));
  EXPECT_TRUE(t.check_recovery(id, Ok(250)));
  EXPECT_EQ(*t.get(id).t_recovered_s, 220);
  EXPECT_EQ(*t.get(id).t_recovered_s - *t.get(id).t_detected_s, 120);
}

TEST(IncidentTest, BreachRestartsWindow) {
  IncidentTracker t;
  const int id = t.open_incident("api", "pod_eviction", 70);
  t.mark_detected(id, 100, "slo_rule");
  EXPECT_FALSE(t.check_recovery(id, Ok(220)));
  EXPECT_FALSE(t.check_recovery(id, Breach(250)));
  EXPECT_FALSE(t.check_recovery(id, Ok(280)));
  EXPECT_TRUE(t.check_recovery(id, Ok(310)));
  EXPECT_EQ(*t.get(id).t_recovered_s, 280);
}

TEST(IncidentTest, DriftBlocksRecovery) {
  IncidentTracker t;
  const int id = t.open_incident("api", "config_drift", 70);
  t.mark_detected(id, 100, "slo_rule");
  EXPECT_FALSE(t.check_recovery(id, {130, Verdict::compliant, 2, 2, true}));
  EXPECT_FALSE(t.check_recovery(id, {160, Verdict::compliant, 2, 2, true}));
  EXPECT_FALSE(t.get(id).recovered());
}

TEST(IncidentTest, UnknownVerdictAndAvailabilityDeficitBlockRecovery) {
  IncidentTracker t;
  const int id = t.open_incident("api", "pod_eviction", 70);
  t.mark_detected(id, 100, "slo_rule");
  EXPECT_FALSE(t.check_recovery(id, {130, Verdict::unknown, 4, 4, false}));
  EXPECT_FALSE(t.check_recovery(id, {160, Verdict::compliant, 3, 4, false}));
  EXPECT_FALSE(t.check_recovery(id, {190, Verdict::compliant, 4, 4, false}));
  EXPECT_TRUE(t.check_recovery(id, Ok(220)));
  EXPECT_EQ(*t.get(id).t_recovered_s, 190);
}

TEST(IncidentTest, FirstDetectionWins) {
  IncidentTracker t;
  const int id = t.open_incident("api", "cpu_saturation", 70);
  EXPECT_TRUE(t.mark_detected(id, 90, "isolation_forest"));
  EXPECT_FALSE(t.mark_detected(id, 120, "slo_rule"));
  EXPECT_EQ(*t.get(id).t_detected_s, 90);
  EXPECT_EQ(t.get(id).detector, "isolation_forest");
}

TEST(IncidentTest, RecoveryBeforeDetectionIsAContractViolation) {
  IncidentTracker t;
  const int id = t.open_incident("api", "cpu_saturation", 70);
  EXPECT_THROW(t.check_recovery(id, Ok(90)), ContractViolation);
}

TEST(IncidentTest, RecoveredIncidentNeverReopens) {
  IncidentTracker t;
  const int id = t.open_incident("api", "cpu_saturation", 70);
  t.mark_detected(id, 90, "x");
  t.check_recovery(id, Ok(120));
  t.check_recovery(id, Ok(150));
  ASSERT_TRUE(t.get(id).recovered());
  EXPECT_FALSE(t.check_recovery(id, Breach(180)));
  EXPECT_EQ(*t.get(id).t_recovered_s, 120);
  EXPECT_FALSE(t.open_for("api").has_value());
  const int next = t.open_incident("api", "pod_eviction", 200);
  EXPECT_EQ(t.open_for("api"), next);
}

TEST(ExportTest, LineCountOrderingAndDeterminism) {
  MetricStore store;
  store.append({60, Metric::rps, 2, {{"service", "b"}}});
  store.append({30, Metric::rps, 1, {{"service", "a"}}});
  store.append({30, Metric::cpu_vcpu, 0.5, {{"service", "a"}}});
  const std::string text = store.to_jsonl();
  std::istringstream lines(text);
  std::vector<std::string> rows;
  for (std::string l; std::getline(lines, l);) rows.push_back(l);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0], R"({"labels":{"service":"a"},"metric":"cpu_vcpu","ts":30.0,"value":0.5})");
  EXPECT_NE(rows[1].find("\"rps\""), std::string::npos);
  EXPECT_NE(rows[2].find("60.0"), std::string::npos);
  EXPECT_EQ(text, store.to_jsonl());
}

TEST(ExportTest, EmptyStoreWritesEmptyFile) {
  const auto path = std::filesystem::temp_directory_path() / "cpe_empty_export.jsonl";
  MetricStore{}.export_jsonl(path.string());
  EXPECT_EQ(std::filesystem::file_size(path), 0u);
  std::filesystem::remove(path);
}

TEST(ExportTest, UnwritablePathFails) {
  EXPECT_THROW(MetricStore{}.export_jsonl("/nonexistent-dir/x.jsonl"), std::runtime_error);
}

// Parsing an export reconstructs the exact series, including noisy doubles.
TEST(ExportTest, RoundTripReconstructsStore) {
  auto cfg = OneService();
  cfg.workload.kind = sim::WorkloadKind::bursty;
  cfg.workload.amplitude = 200;
  sim::Cluster cluster(cfg, 5);
  MetricStore store;
  for (int t = 0; t < 1800; ++t) {
    if (t % 30 == 0) scrape(cluster.state(), store, {{"trial", "1"}});
    cluster.step(1);
  }
  std::istringstream in(store.to_jsonl());
  const auto parsed = MetricStore::parse_jsonl(in);
  EXPECT_EQ(parsed, store);
}

}  // namespace
}  // namespace cpe::telemetry

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
#include <array>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "cpe/common.hpp"
#include "cpe/simcluster.hpp"

// Data plane: fixed-cadence scrapes, an append-only series store, SLO
// evaluation and incident lifecycle tracking.
namespace cpe::telemetry {

inline constexpr double kScrapeIntervalS = 30.0;

enum class Metric { cpu_vcpu, mem, rps, p95_latency_ms, error_rate, desired_replicas, available_replicas };

inline constexpr std::array<Metric, 7> kAllMetrics = {
    Metric::cpu_vcpu,   Metric::mem,          Metric::rps,
    Metric::p95_latency_ms, Metric::error_rate, Metric::desired_replicas,
    Metric::available_replicas};

inline std::string_view to_string(Metric m) {
  switch (m) {
    case Metric::cpu_vcpu: return "cpu_vcpu";
    case Metric::mem: return "mem";
    case Metric::rps: return "rps";
    case Metric::p95_latency_ms: return "p95_latency_ms";
    case Metric::error_rate: return "error_rate";
    case Metric::desired_replicas: return "desired_replicas";
    case Metric::available_replicas: return "available_replicas";
  }
  return "?";
}

inline std::optional<Metric> parse_metric(std::string_view s) {
  for (Metric m : kAllMetrics)
    if (to_string(m) == s) return m;
  return std::nullopt;
}

using Labels = std::map<std::string, std::string>;

struct TelemetrySample {
  double ts_s = 0;
  Metric metric = Metric::cpu_vcpu;
  double value = 0;
  Labels labels;
  bool operator==(const TelemetrySample&) const = default;
};

struct SeriesKey {
  Metric metric = Metric::cpu_vcpu;
  Labels labels;
  auto operator<=>(const SeriesKey&) const = default;
};

struct Point {
  double ts_s = 0;
  double value = 0;
  bool operator==(const Point&) const = default;
};

class MetricSeries {
 public:
  MetricSeries() = default;
  explicit MetricSeries(SeriesKey key) : key_(std::move(key)) {}

  void append(double ts_s, double value) {
    if (!points_.empty() && ts_s <= points_.back().ts_s)
      throw ContractViolation("series points must have strictly increasing timestamps");
    points_.push_back({ts_s, value});
  }

  const SeriesKey& key() const { return key_; }
  const std::vector<Point>& points() const { return points_; }
  bool operator==(const MetricSeries&) const = default;

 private:
  SeriesKey key_;
  std::vector<Point> points_;
};

struct Gap {
  double ts_s = 0;
  std::string service;
  Metric metric = Metric::cpu_vcpu;
  bool operator==(const Gap&) const = default;
};

// Append-only store. One writer (the engine loop); readers get copies.
class MetricStore {
 public:
  void append(const TelemetrySample& s) {
    SeriesKey key{s.metric, s.labels};
    auto it = series_.find(key);
    if (it == series_.end()) it = series_.emplace(key, MetricSeries(key)).first;
    it->second.append(s.ts_s, s.value);
  }

  void record_gap(Gap g) { gaps_.push_back(std::move(g)); }

  const MetricSeries* find(const SeriesKey& key) const {
    auto it = series_.find(key);
    return it == series_.end() ? nullptr : &it->second;
  }

  std::vector<Point> query_window(const SeriesKey& key, double t_from, double t_to) const {
    if (t_from > t_to) throw ContractViolation("query_window: t_from must not exceed t_to");
    const MetricSeries* s = find(key);
    if (!s) return {};
    const auto& pts = s->points();
    auto lo = std::lower_bound(pts.begin(), pts.end(), t_from,
                               [](const Point& p, double t) { return p.ts_s < t; });
    auto hi = std::upper_bound(pts.begin(), pts.end(), t_to,
                               [](double t, const Point& p) { return t < p.ts_s; });
    return {lo, hi};
  }

  const std::map<SeriesKey, MetricSeries>& series() const { return series_; }
  const std::vector<Gap>& gaps() const { return gaps_; }
  std::size_t size() const { return series_.size(); }
  bool operator==(const MetricStore&) const = default;

  // One JSON object per line, ordered by ts, then metric name, then labels.
  std::string to_jsonl() const {
    struct Row {
      double ts;
      std::string_view metric;
      const Labels* labels;
      double value;
    };
    std::vector<Row> rows;
    for (const auto& [key, s] : series_)
      for (const auto& p : s.points()) rows.push_back({p.ts_s, to_string(key.metric), &key.labels, p.value});
    std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
      return std::tie(a.ts, a.metric, *a.labels) < std::tie(b.ts, b.metric, *b.labels);
    });
    std::string out;
    for (const auto& r : rows) {
      nlohmann::json j;
      j["ts"] = r.ts;
      j["metric"] = r.metric;
      j["value"] = r.value;
      j["labels"] = *r.labels;
      out += j.dump();
      out += '\n';
    }
    return out;
  }

  void export_jsonl(const std::string& path) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
    f << to_jsonl();
    if (!f) throw std::runtime_error("write to '" + path + "' failed");
  }

  static MetricStore parse_jsonl(std::istream& in) {
    MetricStore store;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      try {
        const auto j = nlohmann::json::parse(line);
        TelemetrySample s;
        s.ts_s = j.at("ts").get<double>();
        auto m = parse_metric(j.at("metric").get<std::string>());
        if (!m) throw std::runtime_error("unknown metric");
        s.metric = *m;
        s.value = j.at("value").get<double>();
        s.labels = j.at("labels").get<Labels>();
        store.append(s);
      } catch (const std::exception& e) {
        throw ConfigError("line " + std::to_string(lineno), e.what());
      }
    }
    return store;
  }

 private:
  std::map<SeriesKey, MetricSeries> series_;
  std::vector<Gap> gaps_;
};

inline double metric_value(const sim::ServiceMetrics& m, Metric metric) {
  switch (metric) {
    case Metric::cpu_vcpu: return m.cpu_vcpu;
    case Metric::mem: return m.mem_mb;
    case Metric::rps: return m.rps_served;
    case Metric::p95_latency_ms: return m.p95_latency_ms;
    case Metric::error_rate: return m.error_rate;
    case Metric::desired_replicas: return m.desired_replicas;
    case Metric::available_replicas: return m.available_replicas;
  }
  return 0;
}

// One sample per (service, metric); appended to `store` and returned for
// broadcast. `base_labels` typically carries mode and trial.
inline std::vector<TelemetrySample> scrape(const sim::ClusterState& state, MetricStore& store,
                                           const Labels& base_labels = {}) {
  const double ts = state.clock_s;
  if (std::fmod(ts, kScrapeIntervalS) != 0.0)
    throw ContractViolation("scrape: clock " + std::to_string(ts) + " is not on the scrape grid");
  std::vector<TelemetrySample> out;
  out.reserve(state.services.size() * kAllMetrics.size());
  for (const auto& svc : state.services) {
    Labels labels = base_labels;
    labels["service"] = svc.spec.name;
    for (Metric m : kAllMetrics) {
      TelemetrySample s{ts, m, metric_value(svc.metrics, m), labels};
      store.append(s);
      out.push_back(std::move(s));
    }
  }
  return out;
}

// Per-service view over one scrape's samples; absent metrics stay empty.
struct ServiceScrape {
  double ts_s = 0;
  std::array<std::optional<double>, kAllMetrics.size()> values{};

  std::optional<double> get(Metric m) const { return values[static_cast<std::size_t>(m)]; }
  void set(Metric m, double v) { values[static_cast<std::size_t>(m)] = v; }
};

inline std::map<std::string, ServiceScrape> by_service(std::span<const TelemetrySample> samples) {
  std::map<std::string, ServiceScrape> out;
  for (const auto& s : samples) {
    auto it = s.labels.find("service");
    if (it == s.labels.end()) continue;
    auto& view = out[it->second];
    view.ts_s = s.ts_s;
    view.set(s.metric, s.value);
  }
  return out;
}

enum class Strictness { standard, strict, relaxed };

inline std::string_view to_string(Strictness s) {
  switch (s) {
    case Strictness::standard: return "standard";
    case Strictness::strict: return "strict";
    case Strictness::relaxed: return "relaxed";
  }
  return "?";
}

inline std::optional<Strictness> parse_strictness(std::string_view s) {
  if (s == "standard") return Strictness::standard;
  if (s == "strict") return Strictness::strict;
  if (s == "relaxed") return Strictness::relaxed;
  return std::nullopt;
}

struct SloSpec {
  double latency_p95_ms_max = 200.0;
  double error_rate_max = 0.02;
  Strictness strictness = Strictness::standard;

  bool operator==(const SloSpec&) const = default;

  static SloSpec preset(Strictness s) {
    switch (s) {
      case Strictness::standard: return {200.0, 0.02, s};
      case Strictness::strict: return {150.0, 0.01, s};
      case Strictness::relaxed: return {300.0, 0.05, s};
    }
    return {};
  }

  void validate() const {
    if (!(latency_p95_ms_max > 0)) throw ConfigError("slo.latency_p95_ms_max", "must be > 0");
    if (!(error_rate_max > 0 && error_rate_max < 1)) throw ConfigError("slo.error_rate_max", "must be in (0,1)");
  }
};

enum class Verdict { compliant, non_compliant, unknown };

inline std::string_view to_string(Verdict v) {
  switch (v) {
    case Verdict::compliant: return "compliant";
    case Verdict::non_compliant: return "non_compliant";
    case Verdict::unknown: return "unknown";
  }
  return "?";
}

inline Verdict evaluate_slo(const ServiceScrape& scrape, const SloSpec& slo) {
  const auto p95 = scrape.get(Metric::p95_latency_ms);
  const auto err = scrape.get(Metric::error_rate);
  if (!p95 || !err) return Verdict::unknown;
  return (*p95 <= slo.latency_p95_ms_max && *err <= slo.error_rate_max) ? Verdict::compliant
                                                                          : Verdict::non_compliant;
}

inline std::map<std::string, Verdict> evaluate_slo(std::span<const TelemetrySample> samples, const SloSpec& slo) {
  std::map<std::string, Verdict> out;
  for (const auto& [svc, view] : by_service(samples)) out[svc] = evaluate_slo(view, slo);
  return out;
}

struct IncidentRecord {
  int id = 0;
  std::string service;
  std::string fault_kind;
  double t_injected_s = 0;
  std::optional<double> t_detected_s;
  std::optional<double> t_recovered_s;
  std::string detector;
  Mode mode = Mode::baseline;
  // Index in the trial's fault schedule; -1 for incidents not caused by a
  // scheduled fault.
  int schedule_index = -1;

  bool detected() const { return t_detected_s.has_value(); }
  bool recovered() const { return t_recovered_s.has_value(); }
  bool operator==(const IncidentRecord&) const = default;
};

struct RecoveryObservation {
  double ts_s = 0;
  Verdict verdict = Verdict::unknown;
  int available_replicas = 0;
  int desired_replicas = 0;
  bool drift_active = false;
};

inline constexpr int kRecoverySustainScrapes = 2;

// Owns incident lifecycles. Recovery requires SLO compliance, a fully
// available deployment and no active drift, sustained for two consecutive
// scrapes after detection; the recovery time is the window's first scrape.
class IncidentTracker {
 public:
  explicit IncidentTracker(Mode mode = Mode::baseline) : mode_(mode) {}

  int open_incident(std::string service, std::string fault_kind, double t_injected, int schedule_index = -1) {
    IncidentRecord r;
    r.id = static_cast<int>(records_.size()) + 1;
    r.service = std::move(service);
    r.fault_kind = std::move(fault_kind);
    r.t_injected_s = t_injected;
    r.mode = mode_;
    r.schedule_index = schedule_index;
    records_.push_back(std::move(r));
    windows_.push_back({});
    return records_.back().id;
  }

  // First detection wins; later calls return false and change nothing.
  bool mark_detected(int id, double t, std::string detector) {
    auto& r = at(id);
    if (r.recovered()) throw ContractViolation("mark_detected on a recovered incident");
    if (r.detected()) return false;
    if (t < r.t_injected_s) throw ContractViolation("detection precedes injection");
    r.t_detected_s = t;
    r.detector = std::move(detector);
    return true;
  }

  // Returns true exactly when this observation completes the recovery window.
  bool check_recovery(int id, const RecoveryObservation& obs) {
    auto& r = at(id);
    if (!r.detected()) throw ContractViolation("check_recovery on an undetected incident");
    if (r.recovered()) return false;
    if (obs.ts_s <= *r.t_detected_s) return false;
    auto& w = windows_[static_cast<std::size_t>(id - 1)];
    const bool healthy = obs.verdict == Verdict::compliant &&
                         obs.available_replicas == obs.desired_replicas && !obs.drift_active;
    if (!healthy) {
      w = {};
      return false;
    }
    if (!w.start) w.start = obs.ts_s;
    if (++w.count >= kRecoverySustainScrapes) {
      r.t_recovered_s = *w.start;
      return true;
    }
    return false;
  }

  // Most recent unrecovered incident on `service`, if any.
  std::optional<int> open_for(std::string_view service) const {
    for (auto it = records_.rbegin(); it != records_.rend(); ++it)
      if (it->service == service && !it->recovered()) return it->id;
    return std::nullopt;
  }

  const IncidentRecord& get(int id) const { return const_cast<IncidentTracker*>(this)->at(id); }
  const std::vector<IncidentRecord>& incidents() const { return records_; }

 private:
  struct Window {
    std::optional<double> start;
    int count = 0;
  };

  IncidentRecord& at(int id) {
    if (id < 1 || id > static_cast<int>(records_.size())) throw NotFound("unknown incident " + std::to_string(id));
    return records_[static_cast<std::size_t>(id - 1)];
  }

  Mode mode_;
  std::vector<IncidentRecord> records_;
  std::vector<Window> windows_;
};

inline nlohmann::json to_json(const IncidentRecord& r) {
  nlohmann::json j;
  j["id"] = r.id;
  j["service"] = r.service;
  j["fault_kind"] = r.fault_kind;
  j["t_injected_s"] = r.t_injected_s;
  j["t_detected_s"] = r.t_detected_s ? nlohmann::json(*r.t_detected_s) : nlohmann::json();
  j["t_recovered_s"] = r.t_recovered_s ? nlohmann::json(*r.t_recovered_s) : nlohmann::json();
  j["detector"] = r.detector;
  j["mode"] = to_string(r.mode);
  j["schedule_index"] = r.schedule_index;
  return j;
}

}  // namespace cpe::telemetry

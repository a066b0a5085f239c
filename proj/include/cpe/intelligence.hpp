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
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpe/common.hpp"
#include "cpe/simcluster.hpp"
#include "cpe/telemetry.hpp"

namespace cpe::intelligence {

inline constexpr double kEulerGamma = 0.5772156649;

// Average path length of an unsuccessful search in a binary search tree of
// n points; normalises isolation depth.
inline double c_factor(double n) {
  if (n <= 1) return 0.0;
  if (n == 2) return 1.0;
  return 2.0 * (std::log(n - 1.0) + kEulerGamma) - 2.0 * (n - 1.0) / n;
}

template <std::size_t Dim>
using Vec = std::array<double, Dim>;

struct ForestParams {
  int trees = 100;
  int subsample = 256;
  // Below this many training points no model is fitted.
  int min_training = 8;
};

template <std::size_t Dim>
class IsolationTree {
 public:
  struct Node {
    int split_dim = -1;  // -1 marks a leaf
    double split_value = 0;
    int left = -1;
    int right = -1;
    int size = 0;
    int depth = 0;
    // Training partition range on split_dim.
    double lo = 0;
    double hi = 0;

    bool leaf() const { return split_dim < 0; }
    bool operator==(const Node&) const = default;
  };

  static IsolationTree grow(std::span<const Vec<Dim>> data, std::vector<std::size_t> idx, int height_limit, Rng& rng) {
    IsolationTree tree;
    tree.height_limit_ = height_limit;
    tree.build(data, idx, 0, rng);
    return tree;
  }

  double path_length(const Vec<Dim>& x) const {
    int at = 0;
    while (!nodes_[at].leaf()) {
      const auto& n = nodes_[at];
      at = x[n.split_dim] < n.split_value ? n.left : n.right;
    }
    return nodes_[at].depth + c_factor(nodes_[at].size);
  }

  int height_limit() const { return height_limit_; }
  const std::vector<Node>& nodes() const { return nodes_; }
  bool operator==(const IsolationTree&) const = default;

 private:
  int build(std::span<const Vec<Dim>> data, std::span<std::size_t> idx, int depth, Rng& rng) {
    const int self = static_cast<int>(nodes_.size());
    nodes_.push_back({});
    nodes_[self].size = static_cast<int>(idx.size());
    nodes_[self].depth = depth;
    if (depth >= height_limit_ || idx.size() <= 1) return self;

    Vec<Dim> lo, hi;
    lo.fill(std::numeric_limits<double>::infinity());
    hi.fill(-std::numeric_limits<double>::infinity());
    for (auto i : idx)
      for (std::size_t d = 0; d < Dim; ++d) {
        lo[d] = std::min(lo[d], data[i][d]);
        hi[d] = std::max(hi[d], data[i][d]);
      }
    std::array<std::size_t, Dim> splittable{};
    std::size_t n_splittable = 0;
    for (std::size_t d = 0; d < Dim; ++d)
      if (hi[d] > lo[d]) splittable[n_splittable++] = d;
    if (n_splittable == 0) return self;

    const std::size_t dim = splittable[rng.below(n_splittable)];
    double split = rng.uniform(lo[dim], hi[dim]);
    if (split <= lo[dim]) split = std::nextafter(lo[dim], hi[dim]);
    auto mid = std::partition(idx.begin(), idx.end(), [&](std::size_t i) { return data[i][dim] < split; });
    const auto n_left = static_cast<std::size_t>(mid - idx.begin());

    nodes_[self].split_dim = static_cast<int>(dim);
    nodes_[self].split_value = split;
    nodes_[self].lo = lo[dim];
    nodes_[self].hi = hi[dim];
    const int left = build(data, idx.subspan(0, n_left), depth + 1, rng);
    const int right = build(data, idx.subspan(n_left), depth + 1, rng);
    nodes_[self].left = left;
    nodes_[self].right = right;
    return self;
  }

  int height_limit_ = 0;
  std::vector<Node> nodes_;
};

template <std::size_t Dim>
class IsolationForest {
 public:
  // Empty when fewer than params.min_training points are supplied.
  static std::optional<IsolationForest> fit(std::span<const Vec<Dim>> data, std::uint64_t seed,
                                            const ForestParams& params = {}) {
    if (static_cast<int>(data.size()) < params.min_training || params.trees < 1) return std::nullopt;
    IsolationForest f;
    f.psi_ = std::max(2, std::min(params.subsample, static_cast<int>(data.size())));
    f.height_limit_ = static_cast<int>(std::ceil(std::log2(static_cast<double>(f.psi_))));
    f.c_psi_ = c_factor(f.psi_);
    Rng rng(seed);
    std::vector<std::size_t> all(data.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    f.trees_.reserve(static_cast<std::size_t>(params.trees));
    for (int t = 0; t < params.trees; ++t) {
      // Partial Fisher-Yates: the first psi entries become the subsample.
      for (std::size_t i = 0; i < static_cast<std::size_t>(f.psi_); ++i) {
        const std::size_t j = i + rng.below(all.size() - i);
        std::swap(all[i], all[j]);
      }
      std::vector<std::size_t> sample(all.begin(), all.begin() + f.psi_);
      f.trees_.push_back(IsolationTree<Dim>::grow(data, std::move(sample), f.height_limit_, rng));
    }
    return f;
  }

  double mean_path_length(const Vec<Dim>& x) const {
    double sum = 0;
    for (const auto& t : trees_) sum += t.path_length(x);
    return sum / static_cast<double>(trees_.size());
  }

  // s(x) = 2^(-E[h(x)] / c(psi)), in (0, 1).
  double score(const Vec<Dim>& x) const { return score_from_path_length(mean_path_length(x)); }

  double score_from_path_length(double expected_h) const { return std::exp2(-expected_h / c_psi_); }

  int psi() const { return psi_; }
  int height_limit() const { return height_limit_; }
  double c_psi() const { return c_psi_; }
  const std::vector<IsolationTree<Dim>>& trees() const { return trees_; }
  bool operator==(const IsolationForest&) const = default;

 private:
  int psi_ = 0;
  int height_limit_ = 0;
  double c_psi_ = 0;
  std::vector<IsolationTree<Dim>> trees_;
};

inline constexpr std::size_t kFeatureDim = 6;

inline constexpr std::array<std::string_view, kFeatureDim> kFeatureNames = {
    "cpu_utilization_fraction", "p95_latency_ms", "error_rate", "rps", "availability_ratio", "delta_p95_ms"};

struct FeatureVector {
  double ts_s = 0;
  std::string service;
  Vec<kFeatureDim> values{};
};

// Builds feature vectors for one service; missing metrics repeat the last
// observed value.
class FeatureBuilder {
 public:
  explicit FeatureBuilder(double vcpu_per_replica = 1.0) : vcpu_per_replica_(vcpu_per_replica) {}

  FeatureVector build(const std::string& service, const telemetry::ServiceScrape& s) {
    using telemetry::Metric;
    auto take = [&](Metric m, std::size_t slot) {
      if (auto v = s.get(m)) last_[slot] = *v;
      return last_[slot];
    };
    const double cpu = take(Metric::cpu_vcpu, 0);
    const double p95 = take(Metric::p95_latency_ms, 1);
    const double err = take(Metric::error_rate, 2);
    const double rps = take(Metric::rps, 3);
    const double desired = take(Metric::desired_replicas, 4);
    const double available = take(Metric::available_replicas, 5);

    FeatureVector fv;
    fv.ts_s = s.ts_s;
    fv.service = service;
    fv.values[0] = available > 0 ? cpu / (available * vcpu_per_replica_) : 1.0;
    fv.values[1] = p95;
    fv.values[2] = err;
    fv.values[3] = rps;
    fv.values[4] = desired > 0 ? available / desired : 0.0;
    fv.values[5] = prev_p95_ ? p95 - *prev_p95_ : 0.0;
    prev_p95_ = p95;
    return fv;
  }

 private:
  double vcpu_per_replica_;
  std::array<double, 6> last_{};
  std::optional<double> prev_p95_;
};

// Per-dimension min-max scaling learnt from training data, clamped to [0,1].
struct MinMaxScaler {
  Vec<kFeatureDim> lo{};
  Vec<kFeatureDim> hi{};

  static MinMaxScaler fit(std::span<const Vec<kFeatureDim>> data) {
    MinMaxScaler s;
    s.lo.fill(std::numeric_limits<double>::infinity());
    s.hi.fill(-std::numeric_limits<double>::infinity());
    for (const auto& x : data)
      for (std::size_t d = 0; d < kFeatureDim; ++d) {
        s.lo[d] = std::min(s.lo[d], x[d]);
        s.hi[d] = std::max(s.hi[d], x[d]);
      }
    return s;
  }

  Vec<kFeatureDim> apply(const Vec<kFeatureDim>& x) const {
    Vec<kFeatureDim> out{};
    for (std::size_t d = 0; d < kFeatureDim; ++d) {
      const double range = hi[d] - lo[d];
      out[d] = range > 0 ? std::clamp((x[d] - lo[d]) / range, 0.0, 1.0) : (x[d] > hi[d] ? 1.0 : 0.0);
    }
    return out;
  }
  bool operator==(const MinMaxScaler&) const = default;
};

// Fitted detector for one service: scaler plus forest.
struct IsolationForestModel {
  MinMaxScaler scaler;
  IsolationForest<kFeatureDim> forest;
  Vec<kFeatureDim> training_mean{};
  double training_from_s = 0;
  double training_to_s = 0;
  std::size_t training_size = 0;

  static std::optional<IsolationForestModel> fit(std::span<const FeatureVector> window, std::uint64_t seed,
                                                 const ForestParams& params = {}) {
    std::vector<Vec<kFeatureDim>> raw;
    raw.reserve(window.size());
    for (const auto& fv : window) raw.push_back(fv.values);
    if (static_cast<int>(raw.size()) < params.min_training) return std::nullopt;
    IsolationForestModel m;
    m.scaler = MinMaxScaler::fit(raw);
    std::vector<Vec<kFeatureDim>> scaled;
    scaled.reserve(raw.size());
    for (const auto& x : raw) scaled.push_back(m.scaler.apply(x));
    auto forest = IsolationForest<kFeatureDim>::fit(scaled, seed, params);
    if (!forest) return std::nullopt;
    m.forest = std::move(*forest);
    for (const auto& x : scaled)
      for (std::size_t d = 0; d < kFeatureDim; ++d) m.training_mean[d] += x[d] / static_cast<double>(scaled.size());
    m.training_from_s = window.front().ts_s;
    m.training_to_s = window.back().ts_s;
    m.training_size = raw.size();
    return m;
  }

  double score(const FeatureVector& fv) const { return forest.score(scaler.apply(fv.values)); }
};

enum class Trigger { isolation_score, slo_breach, underutilization };

inline std::string_view to_string(Trigger t) {
  switch (t) {
    case Trigger::isolation_score: return "isolation_forest";
    case Trigger::slo_breach: return "slo_breach_rule";
    case Trigger::underutilization: return "underutilization";
  }
  return "?";
}

struct AnomalyReport {
  double ts_s = 0;
  std::string service;
  std::optional<double> score;
  double threshold = 0.6;
  Trigger trigger = Trigger::isolation_score;
  // Scaled deviation from the training mean, per feature.
  std::array<double, kFeatureDim> deviation{};
};

struct DetectorParams {
  double threshold = 0.60;
  ForestParams forest;
  int breach_scrapes = 2;
  double underutilization_threshold = 0.3;
  int underutilization_scrapes = 10;
  // Replica utilization the scale-up rule provisions for.
  double target_utilization = 0.6;
};

// Emits a report iff the isolation score reaches the threshold or the SLO
// fallback fired. Without a model only the fallback can fire.
inline std::optional<AnomalyReport> detect(const IsolationForestModel* model, const FeatureVector& latest,
                                           double threshold, bool slo_fallback) {
  AnomalyReport r;
  r.ts_s = latest.ts_s;
  r.service = latest.service;
  r.threshold = threshold;
  if (model) {
    r.score = model->score(latest);
    const auto scaled = model->scaler.apply(latest.values);
    for (std::size_t d = 0; d < kFeatureDim; ++d) r.deviation[d] = scaled[d] - model->training_mean[d];
  }
  if (r.score && *r.score >= threshold) {
    r.trigger = Trigger::isolation_score;
    return r;
  }
  if (slo_fallback) {
    r.trigger = Trigger::slo_breach;
    return r;
  }
  return std::nullopt;
}

// Counts consecutive breaching scrapes per service.
class BreachCounter {
 public:
  explicit BreachCounter(int needed = 2) : needed_(needed) {}

  // True while the service has breached for at least `needed` consecutive scrapes.
  bool observe(const std::string& service, telemetry::Verdict v) {
    int& n = counts_[service];
    n = v == telemetry::Verdict::non_compliant ? n + 1 : 0;
    return n >= needed_;
  }

 private:
  int needed_;
  std::map<std::string, int> counts_;
};

// The Baseline's alerting rule: fires once per breach episode after two
// consecutive breaching scrapes, then stays latched until released.
class SloAlertRule {
 public:
  explicit SloAlertRule(int needed = 2) : counter_(needed) {}

  std::optional<double> observe(const std::string& service, double ts, telemetry::Verdict v) {
    const bool firing = counter_.observe(service, v);
    if (!firing || latched_[service]) return std::nullopt;
    latched_[service] = true;
    return ts;
  }

  void release(const std::string& service) { latched_[service] = false; }
  bool latched(const std::string& service) const {
    auto it = latched_.find(service);
    return it != latched_.end() && it->second;
  }

 private:
  BreachCounter counter_;
  std::map<std::string, bool> latched_;
};

// Sustained low load triggers a right-sizing report.
class UnderutilizationTracker {
 public:
  UnderutilizationTracker(double threshold = 0.3, int scrapes = 10) : threshold_(threshold), scrapes_(scrapes) {}

  bool observe(const std::string& service, double utilization) {
    int& n = counts_[service];
    n = utilization < threshold_ ? n + 1 : 0;
    if (n >= scrapes_) {
      n = 0;
      return true;
    }
    return false;
  }

  void reset(const std::string& service) { counts_[service] = 0; }

 private:
  double threshold_;
  int scrapes_;
  std::map<std::string, int> counts_;
};

struct ProposedAction {
  ActionSpec action;
  Risk risk = Risk::low;
  std::string rationale;
  bool operator==(const ProposedAction&) const = default;
};

inline Risk risk_of(ActionKind kind, bool within_bounds) {
  switch (kind) {
    case ActionKind::rollback_config:
    case ActionKind::scale_down:
      return Risk::high;
    case ActionKind::scale_up:
      return within_bounds ? Risk::low : Risk::high;
    case ActionKind::restart_pod:
      return Risk::low;
  }
  return Risk::high;
}

// What the reasoner may know about one service at decision time.
struct ServiceView {
  std::string name;
  int desired = 0;
  int min_replicas = 1;
  int max_replicas = 1;
  int available = 0;
  int pending = 0;
  int evicted = 0;
  int degraded = 0;
  bool drifted = false;
  double offered_rps = 0;
  double capacity_rps_per_replica = 1;
  double utilization = 0;

  static ServiceView of(const sim::ServiceState& s) {
    ServiceView v;
    v.name = s.spec.name;
    v.desired = s.desired;
    v.min_replicas = s.spec.min_replicas;
    v.max_replicas = s.spec.max_replicas;
    v.available = s.available();
    v.pending = s.pending();
    v.evicted = s.evicted();
    v.degraded = s.degraded();
    v.drifted = s.drifted;
    v.offered_rps = s.metrics.offered_rps;
    v.capacity_rps_per_replica = s.spec.capacity_rps_per_replica;
    v.utilization = s.metrics.utilization;
    return v;
  }
};

// Dominant-symptom dispatch, first match wins:
//   R1 drift -> rollback_config
//   R2 evicted replicas -> restart_pod
//   R3 saturated replicas -> restart_pod
//   R5 sustained under-utilization -> scale_down(1)
//   R4 otherwise -> scale_up towards the target utilization (at least +1)
inline std::vector<ProposedAction> reason(const AnomalyReport& report, const ServiceView& svc,
                                          const DetectorParams& params = {}) {
  ProposedAction p;
  p.action.service = svc.name;
  if (svc.drifted) {
    p.action.kind = ActionKind::rollback_config;
    p.action.amount = 1;
    p.rationale = "R1-drift";
  } else if (svc.evicted > 0) {
    p.action.kind = ActionKind::restart_pod;
    p.action.amount = svc.evicted;
    p.rationale = "R2-availability";
  } else if (svc.degraded > 0) {
    p.action.kind = ActionKind::restart_pod;
    p.action.amount = svc.degraded;
    p.rationale = "R3-saturated-replicas";
  } else if (report.trigger == Trigger::underutilization) {
    p.action.kind = ActionKind::scale_down;
    p.action.amount = 1;
    p.rationale = "R5-underutilization";
  } else {
    const double per_replica = svc.capacity_rps_per_replica * params.target_utilization;
    const int needed = static_cast<int>(std::ceil(svc.offered_rps / per_replica));
    // An isolation hit on a service running cool is over-provisioning.
    if (report.trigger == Trigger::isolation_score && needed < svc.desired &&
        svc.utilization < params.target_utilization && svc.desired > svc.min_replicas) {
      p.action.kind = ActionKind::scale_down;
      p.action.amount = 1;
      p.rationale = "R4-overprovisioned";
      p.risk = risk_of(p.action.kind, true);
      return {p};
    }
    p.action.kind = ActionKind::scale_up;
    // Capped at max_replicas; already at max, +1 goes out as high risk.
    const int headroom = svc.max_replicas - svc.desired;
    p.action.amount = headroom > 0 ? std::clamp(needed - svc.desired, 1, headroom) : 1;
    p.rationale = "R4-utilization";
  }
  p.risk = risk_of(p.action.kind, p.action.kind != ActionKind::scale_up ||
                                      svc.desired + p.action.amount <= svc.max_replicas);
  return {p};
}

inline nlohmann::json model_summary(const IsolationForestModel& m, double threshold) {
  nlohmann::json j;
  j["trees"] = m.forest.trees().size();
  j["psi"] = m.forest.psi();
  j["height_limit"] = m.forest.height_limit();
  j["c_psi"] = m.forest.c_psi();
  j["threshold"] = threshold;
  j["training_window"] = {{"from_s", m.training_from_s}, {"to_s", m.training_to_s}, {"size", m.training_size}};
  return j;
}

}  // namespace cpe::intelligence

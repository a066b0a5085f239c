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
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "cpe/common.hpp"
#include "cpe/telemetry.hpp"

namespace cpe::stats {

// Detection-to-recovery time; empty while unresolved.
inline std::optional<double> mttr_per_incident(const telemetry::IncidentRecord& r) {
  if (!r.t_detected_s || !r.t_recovered_s) return std::nullopt;
  return *r.t_recovered_s - *r.t_detected_s;
}

struct MttrSummary {
  std::vector<double> values;
  std::size_t unresolved = 0;
  // Incidents that recovered at the detection instant.
  std::size_t degenerate = 0;
  std::optional<double> mean;
};

inline std::optional<double> mean(std::span<const double> v) {
  if (v.empty()) return std::nullopt;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

inline MttrSummary summarize_mttr(std::span<const telemetry::IncidentRecord> incidents) {
  MttrSummary s;
  for (const auto& r : incidents) {
    if (auto m = mttr_per_incident(r)) {
      s.values.push_back(*m);
      if (*m == 0) ++s.degenerate;
    } else {
      ++s.unresolved;
    }
  }
  s.mean = mean(s.values);
  return s;
}

// Throughput per unit of resource over a set of matched scrapes: the ratio of
// time means, which for equal-length windows is the ratio of sums.
inline std::optional<double> resource_efficiency(std::span<const double> rps, std::span<const double> resource) {
  if (rps.size() != resource.size()) throw ContractViolation("rps and resource series differ in length");
  const double r = std::accumulate(resource.begin(), resource.end(), 0.0);
  if (!(r > 0)) return std::nullopt;
  return std::accumulate(rps.begin(), rps.end(), 0.0) / r;
}

// Lower-is-better relative change, in percent.
inline double delta_mttr(double baseline, double cpe) {
  if (!(baseline > 0)) throw ContractViolation("baseline mean must be positive");
  return (baseline - cpe) / baseline * 100.0;
}

// Higher-is-better relative change, in percent.
inline double delta_re(double baseline, double cpe) {
  if (!(baseline > 0)) throw ContractViolation("baseline efficiency must be positive");
  return (cpe - baseline) / baseline * 100.0;
}

// Linear-interpolation quantile of sorted data (Hyndman-Fan type 7).
inline double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw ContractViolation("quantile of empty sample");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

struct Interval {
  double lo = 0;
  double hi = 0;
};

// Percentile bootstrap CI of the mean.
inline Interval bootstrap_ci(std::span<const double> values, std::uint64_t seed, int resamples = 10000,
                             double level = 0.95) {
  if (values.empty()) throw ContractViolation("bootstrap of empty sample");
  if (resamples < 1 || !(level > 0 && level < 1)) throw ContractViolation("invalid bootstrap parameters");
  Rng rng(derive_seed(seed, seed_stream::bootstrap));
  const std::size_t n = values.size();
  std::vector<double> means(static_cast<std::size_t>(resamples));
  for (auto& m : means) {
    double sum = 0;
    for (std::size_t i = 0; i < n; ++i) sum += values[rng.below(n)];
    m = sum / static_cast<double>(n);
  }
  std::sort(means.begin(), means.end());
  const double tail = (1.0 - level) / 2.0;
  return {quantile_sorted(means, tail), quantile_sorted(means, 1.0 - tail)};
}

struct MwuResult {
  // U_A counts pairs with a > b, ties as one half; U_A + U_B = n*m.
  double u_a = 0;
  double u_b = 0;
  double p = 1;
  bool exact = false;
};

inline constexpr std::size_t kExactMwuMaxCells = 400;

namespace detail {

// Midranks of the pooled sample; returns the tie correction sum(t^3 - t).
inline double midranks(std::span<const double> a, std::span<const double> b, std::vector<double>& ranks_a) {
  std::vector<std::pair<double, int>> pooled;
  for (double x : a) pooled.push_back({x, 0});
  for (double x : b) pooled.push_back({x, 1});
  std::vector<std::size_t> order(pooled.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return pooled[i].first < pooled[j].first; });
  std::vector<double> rank(pooled.size());
  double ties = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && pooled[order[j]].first == pooled[order[i]].first) ++j;
    const double r = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) rank[order[k]] = r;
    const double t = static_cast<double>(j - i);
    ties += t * t * t - t;
    i = j;
  }
  ranks_a.assign(rank.begin(), rank.begin() + static_cast<std::ptrdiff_t>(a.size()));
  return ties;
}

// Null distribution of U as counts over all C(n+m, n) arrangements.
inline std::vector<double> exact_u_counts(std::size_t n, std::size_t m) {
  // f[i][j][u]: arrangements of i A's and j B's with statistic u.
  std::vector<std::vector<std::vector<double>>> f(n + 1, std::vector<std::vector<double>>(m + 1));
  for (std::size_t i = 0; i <= n; ++i)
    for (std::size_t j = 0; j <= m; ++j) {
      f[i][j].assign(i * j + 1, 0.0);
      if (i == 0 || j == 0) {
        f[i][j][0] = 1;
        continue;
      }
      // Largest element is an A (beats all j B's) or a B.
      for (std::size_t u = 0; u <= i * j; ++u) {
        double c = 0;
        if (u >= j && u - j <= (i - 1) * j) c += f[i - 1][j][u - j];
        if (u <= i * (j - 1)) c += f[i][j - 1][u];
        f[i][j][u] = c;
      }
    }
  return f[n][m];
}

inline double normal_sf(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

}  // namespace detail

inline MwuResult mann_whitney_u(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw ContractViolation("Mann-Whitney U needs two non-empty samples");
  const double n = static_cast<double>(a.size());
  const double m = static_cast<double>(b.size());
  std::vector<double> ranks_a;
  const double ties = detail::midranks(a, b, ranks_a);
  const double rank_sum = std::accumulate(ranks_a.begin(), ranks_a.end(), 0.0);
  MwuResult r;
  r.u_a = rank_sum - n * (n + 1) / 2.0;
  r.u_b = n * m - r.u_a;

  if (a.size() * b.size() <= kExactMwuMaxCells && ties == 0) {
    const auto counts = detail::exact_u_counts(a.size(), b.size());
    const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
    const auto u = static_cast<std::size_t>(std::llround(r.u_a));
    double lower = 0, upper = 0;
    for (std::size_t k = 0; k < counts.size(); ++k) {
      if (k <= u) lower += counts[k];
      if (k >= u) upper += counts[k];
    }
    r.p = std::min(1.0, 2.0 * std::min(lower, upper) / total);
    r.exact = true;
    return r;
  }
  const double big_n = n + m;
  const double var = n * m / 12.0 * ((big_n + 1.0) - ties / (big_n * (big_n - 1.0)));
  if (!(var > 0)) {
    r.p = 1.0;
    return r;
  }
  const double z = std::max(0.0, std::abs(r.u_a - n * m / 2.0) - 0.5) / std::sqrt(var);
  r.p = std::min(1.0, 2.0 * detail::normal_sf(z));
  return r;
}

inline double cliffs_delta(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw ContractViolation("Cliff's delta needs two non-empty samples");
  // Sorted b lets each a count wins and losses by binary search.
  std::vector<double> sb(b.begin(), b.end());
  std::sort(sb.begin(), sb.end());
  double diff = 0;
  for (double x : a) {
    const auto less = std::lower_bound(sb.begin(), sb.end(), x) - sb.begin();
    const auto greater = sb.end() - std::upper_bound(sb.begin(), sb.end(), x);
    diff += static_cast<double>(less - greater);
  }
  return diff / (static_cast<double>(a.size()) * static_cast<double>(b.size()));
}

}  // namespace cpe::stats

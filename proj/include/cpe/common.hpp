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

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace cpe {

inline constexpr std::string_view kEngineVersion = "0.3.0";
inline constexpr std::string_view kApiVersion = "1";

// Raised for invalid configuration or domain values; carries the offending key path.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& what)
      : std::runtime_error(key.empty() ? what : key + ": " + what), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

// A caller broke an operation's precondition.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class NotFound : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Conflict : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Fatal condition during an experiment (e.g. an arm with no resolved incidents).
class RuntimeAbort : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Mode { baseline, cpe };

enum class ActionKind { scale_up, scale_down, restart_pod, rollback_config };

enum class Risk { low, high };

inline std::string_view to_string(Mode m) { return m == Mode::baseline ? "baseline" : "cpe"; }

inline std::string_view to_string(ActionKind k) {
  switch (k) {
    case ActionKind::scale_up: return "scale_up";
    case ActionKind::scale_down: return "scale_down";
    case ActionKind::restart_pod: return "restart_pod";
    case ActionKind::rollback_config: return "rollback_config";
  }
  return "?";
}

inline std::string_view to_string(Risk r) { return r == Risk::low ? "low" : "high"; }

inline std::optional<Mode> parse_mode(std::string_view s) {
  if (s == "baseline") return Mode::baseline;
  if (s == "cpe") return Mode::cpe;
  return std::nullopt;
}

inline std::optional<ActionKind> parse_action_kind(std::string_view s) {
  if (s == "scale_up") return ActionKind::scale_up;
  if (s == "scale_down") return ActionKind::scale_down;
  if (s == "restart_pod") return ActionKind::restart_pod;
  if (s == "rollback_config") return ActionKind::rollback_config;
  return std::nullopt;
}

inline std::optional<Risk> parse_risk(std::string_view s) {
  if (s == "low") return Risk::low;
  if (s == "high") return Risk::high;
  return std::nullopt;
}

// A concrete control-plane operation against one service. `amount` is a replica
// count for scale/restart and unused for rollback.
struct ActionSpec {
  ActionKind kind = ActionKind::scale_up;
  std::string service;
  int amount = 1;

  bool operator==(const ActionSpec&) const = default;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Independent stream seed for a named purpose within one trial.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  return splitmix64(base ^ splitmix64(stream + 0x51ED270B27D5A3C1ULL));
}

namespace seed_stream {
inline constexpr std::uint64_t noise = 1;
inline constexpr std::uint64_t triage = 2;
inline constexpr std::uint64_t forest = 3;
inline constexpr std::uint64_t bootstrap = 4;
}  // namespace seed_stream

// Seeded generator whose derived draws are bit-identical across standard
// libraries: only the raw mt19937_64 output is used, never the
// implementation-defined <random> distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

  std::uint64_t next() { return engine_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Rejection sampling avoids modulo bias.
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  // Box-Muller; one call consumes exactly two raw draws.
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double lognormal(double median, double sigma) { return median * std::exp(sigma * normal()); }

 private:
  std::mt19937_64 engine_;
};

}  // namespace cpe

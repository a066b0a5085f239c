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

#include <CLI11.hpp>

#include <chrono>
#include <csignal>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "cpe/api.hpp"
#include "cpe/config.hpp"

namespace fs = std::filesystem;
using namespace cpe;

namespace {

struct Options {
  std::string config_path;
  std::string mode;
  std::optional<std::uint64_t> seed;
  int trials = 5;
  std::string scenario;
  std::string out = "out";
  int port = 8080;
  double realtime_factor = 10;
};

struct Resolved {
  experiment::TrialConfig cfg;
  std::string digest;
  bool approvals_set = false;
};

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

Resolved resolve(const Options& o) {
  Resolved r;
  if (!o.config_path.empty()) {
    const auto text = config::read_file(o.config_path);
    r.cfg = config::parse(text);
    r.digest = experiment::fnv1a_hex(text);
    r.approvals_set = static_cast<bool>(YAML::Load(text)["approvals"]);
    if (!o.scenario.empty() && o.scenario != r.cfg.scenario)
      throw ConfigError("scenario", "--scenario " + o.scenario + " conflicts with the config's " + r.cfg.scenario);
  } else {
    r.cfg = experiment::default_trial(experiment::scenario(o.scenario.empty() ? "S2" : o.scenario));
  }
  if (!o.mode.empty()) {
    const auto m = parse_mode(o.mode);
    if (!m) throw ConfigError("mode", "must be baseline or cpe");
    r.cfg.mode = *m;
  }
  if (o.seed) r.cfg.seed = *o.seed;
  r.cfg.validate();
  if (r.digest.empty()) r.digest = experiment::fnv1a_hex(experiment::to_json(r.cfg).dump());
  return r;
}

void write_file(const fs::path& p, const std::string& content) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw RuntimeAbort("cannot write " + p.string());
  f << content;
  if (!f) throw RuntimeAbort("failed writing " + p.string());
}

void write_manifest(const fs::path& dir, const std::string& command, const Options& o, const Resolved& r,
                    const nlohmann::json& seeds, const nlohmann::json& artifacts, const std::string& started) {
  nlohmann::json m = {{"command", command},
                      {"config_path", o.config_path},
                      {"config_digest", r.digest},
                      {"config", experiment::to_json(r.cfg)},
                      {"seeds", seeds},
                      {"artifacts", artifacts},
                      {"engine_version", std::string(kEngineVersion)},
                      {"started_at", started},
                      {"finished_at", utc_now()}};
  write_file(dir / "manifest.json", experiment::canonical(m));
}

int cmd_run(const Options& o) {
  const auto started = utc_now();
  const auto r = resolve(o);
  const fs::path dir = o.out;
  fs::create_directories(dir);
  auto run = experiment::run_trial_full(r.cfg);
  write_file(dir / "results.json", experiment::canonical(experiment::to_json(run.result)));
  run.engine->store().export_jsonl((dir / "telemetry.jsonl").string());
  run.engine->control().export_audit((dir / "audit.jsonl").string());
  write_manifest(dir, "run", o, r, {r.cfg.seed},
                 {{"results", "results.json"}, {"telemetry", "telemetry.jsonl"}, {"audit", "audit.jsonl"}}, started);
  const auto& t = run.result;
  std::cout << "scenario " << t.scenario << " mode " << to_string(t.mode) << " seed " << t.seed << "\n"
            << "incidents " << t.incidents.size() << " unresolved " << t.unresolved << " mean MTTR "
            << (t.mean_mttr_s ? std::to_string(*t.mean_mttr_s) : "n/a") << " s\n"
            << "violations/hr " << t.violations_per_hr << " actions executed " << t.actions_executed << "\n"
            << "wrote " << (dir / "results.json").string() << "\n";
  return 0;
}

nlohmann::json seeds_for(std::uint64_t base, int trials) {
  nlohmann::json s = nlohmann::json::array();
  for (int k = 0; k < trials; ++k) s.push_back(experiment::trial_seed(base, k));
  return s;
}

int cmd_compare(const Options& o) {
  const auto started = utc_now();
  if (o.trials < 1) throw ConfigError("trials", "must be >= 1");
  const auto r = resolve(o);
  const fs::path dir = o.out;
  fs::create_directories(dir);
  const auto rep = experiment::run_comparison(r.cfg, o.trials, r.cfg.seed);
  const auto j = experiment::to_json(rep);
  write_file(dir / "results.json", experiment::canonical(j));
  write_manifest(dir, "compare", o, r, seeds_for(r.cfg.seed, o.trials), {{"results", "results.json"}}, started);
  std::cout << experiment::summary_table(j);
  return 0;
}

int cmd_suite(const Options& o) {
  const auto started = utc_now();
  if (o.trials < 1) throw ConfigError("trials", "must be >= 1");
  if (!o.config_path.empty() || !o.scenario.empty())
    throw ConfigError("suite", "suite runs the four default scenarios; --config/--scenario are not accepted");
  const auto r = resolve(o);
  const fs::path dir = o.out;
  fs::create_directories(dir);
  nlohmann::json all = nlohmann::json::array();
  for (const auto& rep : experiment::scenario_suite(o.trials, r.cfg.seed)) {
    all.push_back(experiment::to_json(rep));
    std::cout << experiment::summary_table(all.back()) << "\n";
  }
  write_file(dir / "results.json", experiment::canonical(all));
  write_manifest(dir, "suite", o, r, seeds_for(r.cfg.seed, o.trials), {{"results", "results.json"}}, started);
  return 0;
}

int cmd_report(const Options& o) {
  fs::path p = o.out;
  if (fs::is_directory(p)) p /= "results.json";
  std::ifstream in(p);
  if (!in) throw ConfigError("out", "no results document at " + p.string());
  const auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("out", p.string() + " is not valid JSON");
  auto render = [](const nlohmann::json& doc) {
    if (doc.contains("arms")) return experiment::summary_table(doc);
    std::ostringstream os;
    os << "Scenario " << doc.value("scenario", "?") << ", mode " << doc.value("mode", "?") << ", seed "
       << doc.value("seed", 0) << "\n"
       << "incidents " << doc["incidents"].size() << ", mean MTTR " << doc["mean_mttr_s"].dump() << " s, RPS/vCPU "
       << doc["re_cpu"].dump() << ", violations/hr " << doc["violations_per_hr"].dump() << "\n";
    return os.str();
  };
  if (j.is_array())
    for (const auto& d : j) std::cout << render(d) << "\n";
  else
    std::cout << render(j);
  return 0;
}

std::atomic<bool> g_stop{false};

int cmd_serve(const Options& o) {
  auto r = resolve(o);
  // An interactive session has an operator: pending approvals expire to deny.
  if (!r.approvals_set) r.cfg.approvals = control::ApprovalSettings{};
  api::LiveSession session(r.cfg, o.realtime_factor);
  api::Server server(session);
  const int port = server.start("0.0.0.0", o.port);
  if (port < 0) throw RuntimeAbort("cannot listen on port " + std::to_string(o.port));
  std::signal(SIGINT, [](int) { g_stop = true; });
  std::signal(SIGTERM, [](int) { g_stop = true; });
  session.start();
  std::cout << "serving scenario " << r.cfg.scenario << " (" << to_string(r.cfg.mode) << ") on port " << port
            << " at " << o.realtime_factor << "x" << std::endl;
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  server.stop();
  session.stop();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Closed-loop remediation simulator and experiment harness"};
  app.require_subcommand(1);
  Options o;
  std::uint64_t seed = 0;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "YAML trial config");
    sub->add_option("--seed", seed, "base seed");
    sub->add_option("--scenario", o.scenario, "S1..S4 (default S2)")->check(CLI::IsMember({"S1", "S2", "S3", "S4"}));
  };
  auto* run = app.add_subcommand("run", "run one trial");
  add_common(run);
  run->add_option("--mode", o.mode, "baseline or cpe")->check(CLI::IsMember({"baseline", "cpe"}));
  run->add_option("--out", o.out, "output directory");
  auto* compare = app.add_subcommand("compare", "run K baseline/cpe trial pairs");
  add_common(compare);
  compare->add_option("--trials", o.trials, "trial pairs")->check(CLI::PositiveNumber);
  compare->add_option("--out", o.out, "output directory");
  auto* suite = app.add_subcommand("suite", "compare all four scenarios");
  suite->add_option("--seed", seed, "base seed");
  suite->add_option("--trials", o.trials, "trial pairs per scenario")->check(CLI::PositiveNumber);
  suite->add_option("--out", o.out, "output directory");
  auto* report = app.add_subcommand("report", "render stored results");
  report->add_option("--out", o.out, "results directory or file");
  auto* serve = app.add_subcommand("serve", "live engine with the HTTP API");
  add_common(serve);
  serve->add_option("--mode", o.mode, "baseline or cpe")->check(CLI::IsMember({"baseline", "cpe"}));
  serve->add_option("--port", o.port, "listen port")->check(CLI::Range(0, 65535));
  serve->add_option("--realtime-factor", o.realtime_factor, "simulated seconds per wall second")
      ->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }
  for (auto* sub : {run, compare, suite, serve})
    if (sub->parsed() && sub->count("--seed")) o.seed = seed;

  try {
    if (run->parsed()) return cmd_run(o);
    if (compare->parsed()) return cmd_compare(o);
    if (suite->parsed()) return cmd_suite(o);
    if (report->parsed()) return cmd_report(o);
    if (serve->parsed()) return cmd_serve(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const RuntimeAbort& e) {
    std::cerr << "aborted: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

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

#include <httplib.h>

#include <atomic>
#include <chrono>
#include <memory>
#include <mutex>
#include <string>
#include <thread>

#include "cpe/engine.hpp"
#include "cpe/experiment.hpp"

namespace cpe::api {

// Read-only view of the engine published between ticks.
struct Snapshot {
  double clock_s = 0;
  bool finished = false;
  nlohmann::json state;
  nlohmann::json approvals;
  nlohmann::json audit;
  nlohmann::json report;
  std::shared_ptr<const std::vector<engine::ScrapeRecord>> scrapes;
};

inline nlohmann::json to_json(const engine::ScrapeRecord& r) {
  nlohmann::json services = nlohmann::json::array();
  for (const auto& s : r.services)
    services.push_back({{"service", s.service},
                        {"rps", s.rps},
                        {"cpu_vcpu", s.cpu_vcpu},
                        {"mem_mb", s.mem_mb},
                        {"p95_latency_ms", s.p95_latency_ms},
                        {"error_rate", s.error_rate},
                        {"desired_replicas", s.desired},
                        {"available_replicas", s.available},
                        {"verdict", telemetry::to_string(s.verdict)}});
  return {{"ts_s", r.ts_s}, {"services", services}};
}

// Runs one engine on its own thread, paced at `realtime_factor` simulated
// seconds per wall second (<= 0 runs unpaced). Other threads see the engine
// only through snapshots, the event log and the command queue.
class LiveSession {
 public:
  LiveSession(experiment::TrialConfig cfg, double realtime_factor)
      : cfg_(std::move(cfg)), engine_(cfg_.engine_config()), factor_(realtime_factor) {
    cfg_.validate();
    // Answer writes only once a snapshot reflects them.
    engine_.set_on_commands_applied([this] { publish(); });
    publish();
  }

  ~LiveSession() { stop(); }

  void start() {
    if (thread_.joinable()) return;
    thread_ = std::thread([this] { loop(); });
  }

  void stop() {
    stop_ = true;
    if (thread_.joinable()) thread_.join();
  }

  std::shared_ptr<const Snapshot> snapshot() const {
    std::lock_guard lock(mu_);
    return snap_;
  }

  const engine::EventLog& events() const { return engine_.events(); }
  engine::CommandQueue& commands() { return engine_.commands(); }
  const experiment::TrialConfig& config() const { return cfg_; }
  bool finished() const { return finished_; }

 private:
  void loop() {
    using clock = std::chrono::steady_clock;
    const auto t0 = clock::now();
    std::uint64_t seen = engine_.events().last_seq();
    while (!stop_ && engine_.clock() < cfg_.duration_s) {
      engine_.tick();
      const std::uint64_t last = engine_.events().last_seq();
      if (last != seen || std::fmod(engine_.clock(), telemetry::kScrapeIntervalS) == 0) {
        seen = last;
        publish();
      }
      if (factor_ > 0) {
        const auto due = t0 + std::chrono::duration_cast<clock::duration>(
                                  std::chrono::duration<double>(engine_.clock() / factor_));
        std::this_thread::sleep_until(due);
      }
    }
    finished_ = true;
    publish();
    // The run is over; refuse late commands rather than leave callers hanging.
    while (!stop_) {
      for (auto& [cmd, promise] : engine_.commands().drain())
        promise.set_value({409, {{"error", "run finished"}}});
      std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
  }

  void publish() {
    auto s = std::make_shared<Snapshot>();
    s->clock_s = engine_.clock();
    s->finished = finished_;
    s->state = engine_.state_json();
    s->approvals = engine_.approvals_json();
    s->audit = nlohmann::json::array();
    for (const auto& e : engine_.control().audit_log()) s->audit.push_back(control::to_json(e));
    if (engine_.clock() > cfg_.warmup_s) {
      auto live = cfg_;
      live.duration_s = engine_.clock();
      s->report = experiment::to_json(experiment::summarize(engine_, live));
      s->report["warming_up"] = false;
    } else {
      s->report = {{"mode", to_string(cfg_.mode)}, {"scenario", cfg_.scenario}, {"warming_up", true}};
    }
    s->report["clock_s"] = engine_.clock();
    s->scrapes = std::make_shared<const std::vector<engine::ScrapeRecord>>(engine_.scrapes());
    std::lock_guard lock(mu_);
    snap_ = std::move(s);
  }

  experiment::TrialConfig cfg_;
  engine::Engine engine_;
  double factor_;
  std::thread thread_;
  std::atomic<bool> stop_{false};
  std::atomic<bool> finished_{false};
  mutable std::mutex mu_;
  std::shared_ptr<const Snapshot> snap_;
};

inline nlohmann::json version_json() {
  return {{"engine_version", std::string(kEngineVersion)},
          {"api_version", std::string(kApiVersion)},
          {"event_kinds",
           {"scrape", "anomaly", "action_proposed", "approval_pending", "action_decided", "action_executed",
            "incident_opened", "incident_detected", "incident_recovered", "violation", "model_fitted"}},
          {"endpoints",
           {"GET /state", "GET /metrics?window=", "GET /events?after_seq=", "GET /approvals",
            "POST /approvals/{id}", "POST /faults", "GET /audit", "GET /report", "GET /version"}}};
}

inline std::string sse_frame(const engine::ApiEvent& e) {
  return "id: " + std::to_string(e.seq) + "\nevent: " + e.kind + "\ndata: " + engine::to_json(e).dump() + "\n\n";
}

class Server {
 public:
  explicit Server(LiveSession& session, std::chrono::milliseconds command_timeout = std::chrono::seconds(10))
      : session_(session), timeout_(command_timeout) {
    routes();
  }

  ~Server() { stop(); }

  // Binds to host:port (0 picks a free port) and serves on a background
  // thread; returns the bound port or -1.
  int start(const std::string& host, int port) {
    port_ = port == 0 ? http_.bind_to_any_port(host) : (http_.bind_to_port(host, port) ? port : -1);
    if (port_ < 0) return -1;
    thread_ = std::thread([this] { http_.listen_after_bind(); });
    http_.wait_until_ready();
    return port_;
  }

  void stop() {
    closing_ = true;
    http_.stop();
    if (thread_.joinable()) thread_.join();
  }

 private:
  static void json_reply(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static void bad_request(httplib::Response& res, const std::string& field, const std::string& msg) {
    json_reply(res, 400, {{"error", msg}, {"field", field}});
  }

  void submit(httplib::Response& res, engine::Command cmd) {
    auto fut = session_.commands().push(std::move(cmd));
    if (fut.wait_for(timeout_) != std::future_status::ready) {
      json_reply(res, 503, {{"error", "engine did not apply the command in time"}});
      return;
    }
    const auto r = fut.get();
    json_reply(res, r.status, r.body);
  }

  void routes() {
    http_.Get("/version", [](const httplib::Request&, httplib::Response& res) { json_reply(res, 200, version_json()); });

    http_.Get("/state", [this](const httplib::Request&, httplib::Response& res) {
      const auto s = session_.snapshot();
      auto body = s->state;
      body["finished"] = s->finished;
      json_reply(res, 200, body);
    });

    http_.Get("/metrics", [this](const httplib::Request& req, httplib::Response& res) {
      const auto s = session_.snapshot();
      double window = 600;
      if (req.has_param("window")) {
        try {
          std::size_t used = 0;
          const auto text = req.get_param_value("window");
          window = std::stod(text, &used);
          if (used != text.size() || !(window > 0)) throw std::invalid_argument("window");
        } catch (const std::exception&) {
          return bad_request(res, "window", "window must be a positive number of seconds");
        }
      }
      nlohmann::json series = nlohmann::json::array();
      for (const auto& r : *s->scrapes)
        if (r.ts_s >= s->clock_s - window) series.push_back(to_json(r));
      json_reply(res, 200, {{"clock_s", s->clock_s}, {"window_s", window}, {"scrapes", series}});
    });

    http_.Get("/approvals", [this](const httplib::Request&, httplib::Response& res) {
      json_reply(res, 200, session_.snapshot()->approvals);
    });

    http_.Get("/audit", [this](const httplib::Request&, httplib::Response& res) {
      json_reply(res, 200, session_.snapshot()->audit);
    });

    http_.Get("/report", [this](const httplib::Request&, httplib::Response& res) {
      json_reply(res, 200, session_.snapshot()->report);
    });

    http_.Post(R"(/approvals/(\d+))", [this](const httplib::Request& req, httplib::Response& res) {
      const int id = std::stoi(req.matches[1]);
      const auto body = nlohmann::json::parse(req.body, nullptr, false);
      if (body.is_discarded() || !body.is_object()) return bad_request(res, "body", "body must be a JSON object");
      if (!body.contains("decision") || !body["decision"].is_string())
        return bad_request(res, "decision", "decision must be \"approve\" or \"deny\"");
      const auto d = control::parse_decision(body["decision"].get<std::string>());
      if (!d) return bad_request(res, "decision", "decision must be \"approve\" or \"deny\"");
      submit(res, engine::DecideCommand{id, *d});
    });

    http_.Post("/faults", [this](const httplib::Request& req, httplib::Response& res) {
      const auto body = nlohmann::json::parse(req.body, nullptr, false);
      if (body.is_discarded() || !body.is_object()) return bad_request(res, "body", "body must be a JSON object");
      for (const auto& [k, v] : body.items())
        if (k != "kind" && k != "service" && k != "magnitude" && k != "duration_s")
          return bad_request(res, k, "unknown field");
      sim::FaultEvent f;
      if (!body.contains("kind") || !body["kind"].is_string()) return bad_request(res, "kind", "required string");
      const auto kind = sim::parse_fault_kind(body["kind"].get<std::string>());
      if (!kind) return bad_request(res, "kind", "must be cpu_saturation, pod_eviction or config_drift");
      f.kind = *kind;
      if (!body.contains("service") || !body["service"].is_string())
        return bad_request(res, "service", "required string");
      f.target_service = body["service"].get<std::string>();
      if (!body.contains("magnitude") || !body["magnitude"].is_number())
        return bad_request(res, "magnitude", "required number");
      f.magnitude = body["magnitude"].get<double>();
      if (body.contains("duration_s") && !body["duration_s"].is_null()) {
        if (!body["duration_s"].is_number()) return bad_request(res, "duration_s", "must be a number");
        f.duration_s = body["duration_s"].get<double>();
      }
      submit(res, engine::InjectCommand{f});
    });

    // Server-sent events; `after_seq` (or Last-Event-ID) resumes a stream.
    // `stream=false` returns one JSON page instead.
    http_.Get("/events", [this](const httplib::Request& req, httplib::Response& res) {
      std::uint64_t after = 0;
      const std::string cursor = req.has_param("after_seq")          ? req.get_param_value("after_seq")
                                 : req.has_header("Last-Event-ID") ? req.get_header_value("Last-Event-ID")
                                                                    : "0";
      try {
        std::size_t used = 0;
        after = std::stoull(cursor, &used);
        if (used != cursor.size()) throw std::invalid_argument("after_seq");
      } catch (const std::exception&) {
        return bad_request(res, "after_seq", "after_seq must be a non-negative integer");
      }
      if (req.get_param_value("stream") == "false") {
        std::size_t limit = 1000;
        if (req.has_param("limit")) {
          try {
            std::size_t used = 0;
            const auto text = req.get_param_value("limit");
            limit = std::stoul(text, &used);
            if (used != text.size() || text.front() == '-' || limit == 0) throw std::invalid_argument("limit");
          } catch (const std::exception&) {
            return bad_request(res, "limit", "limit must be a positive integer");
          }
        }
        nlohmann::json page = nlohmann::json::array();
        for (const auto& e : session_.events().after(after, limit)) page.push_back(engine::to_json(e));
        return json_reply(res, 200, page);
      }
      res.set_header("Cache-Control", "no-cache");
      res.set_chunked_content_provider("text/event-stream", [this, after](std::size_t, httplib::DataSink& sink) mutable {
        while (!closing_) {
          const auto batch = session_.events().after(after, 256);
          if (!batch.empty()) {
            for (const auto& e : batch) {
              const auto frame = sse_frame(e);
              if (!sink.write(frame.data(), frame.size())) return false;
              after = e.seq;
            }
            return true;
          }
          if (!sink.is_writable()) return false;
          if (!session_.events().wait_after(after, std::chrono::milliseconds(500))) {
            static constexpr std::string_view ping = ": keep-alive\n\n";
            if (!sink.write(ping.data(), ping.size())) return false;
          }
        }
        sink.done();
        return true;
      });
    });
  }

  LiveSession& session_;
  std::chrono::milliseconds timeout_;
  httplib::Server http_;
  std::thread thread_;
  std::atomic<bool> closing_{false};
  int port_ = -1;
};

}  // namespace cpe::api

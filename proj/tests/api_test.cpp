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

#include "cpe/api.hpp"

#include <gtest/gtest.h>

#include <functional>
#include <sstream>

namespace cpe::api {
namespace {

using namespace std::chrono_literals;

class ApiTest : public ::testing::Test {
 protected:
  void SetUp() override {
    auto c = experiment::default_trial(experiment::scenario("S1"));
    c.mode = Mode::cpe;
    c.drift_admission = false;
    c.approvals = {600, control::Decision::deny};
    c.fault_schedule = std::vector<sim::FaultEvent>{};
    session_ = std::make_unique<LiveSession>(c, 400);
    server_ = std::make_unique<Server>(*session_);
    port_ = server_->start("127.0.0.1", 0);
    ASSERT_GT(port_, 0);
    session_->start();
    client_ = std::make_unique<httplib::Client>("127.0.0.1", port_);
    client_->set_read_timeout(10, 0);
  }

  void TearDown() override {
    server_->stop();
    session_->stop();
  }

  nlohmann::json GetJson(const std::string& path, int expect = 200) {
    auto r = client_->Get(path.c_str());
    EXPECT_TRUE(r) << path;
    if (!r) return nullptr;
    EXPECT_EQ(r->status, expect) << path << " " << r->body;
    return nlohmann::json::parse(r->body);
  }

  std::pair<int, nlohmann::json> Post(const std::string& path, const std::string& body) {
    auto r = client_->Post(path.c_str(), body, "application/json");
    EXPECT_TRUE(r) << path;
    if (!r) return {0, nullptr};
    return {r->status, nlohmann::json::parse(r->body)};
  }

  bool WaitFor(const std::function<bool()>& pred, std::chrono::milliseconds limit = 15s) {
    const auto end = std::chrono::steady_clock::now() + limit;
    while (std::chrono::steady_clock::now() < end) {
      if (pred()) return true;
      std::this_thread::sleep_for(20ms);
    }
    return false;
  }

  // Reads the event stream until `count` events have arrived.
  std::vector<std::uint64_t> StreamSeqs(std::uint64_t after, std::size_t count) {
    std::vector<std::uint64_t> seqs;
    std::string buf;
    httplib::Client c("127.0.0.1", port_);
    c.set_read_timeout(10, 0);
    const auto path = "/events?after_seq=" + std::to_string(after);
    c.Get(path.c_str(), [&](const char* data, std::size_t n) {
      buf.append(data, n);
      std::size_t pos;
      while ((pos = buf.find("\n\n")) != std::string::npos) {
        std::istringstream frame(buf.substr(0, pos));
        buf.erase(0, pos + 2);
        std::string line;
        while (std::getline(frame, line))
          if (line.rfind("id: ", 0) == 0) seqs.push_back(std::stoull(line.substr(4)));
      }
      return seqs.size() < count;
    });
    return seqs;
  }

  std::unique_ptr<LiveSession> session_;
  std::unique_ptr<Server> server_;
  std::unique_ptr<httplib::Client> client_;
  int port_ = -1;
};

TEST_F(ApiTest, VersionAndState) {
  auto v = GetJson("/version");
  EXPECT_EQ(v["api_version"], std::string(kApiVersion));
  EXPECT_EQ(v["endpoints"].size(), 9u);
  auto s = GetJson("/state");
  EXPECT_EQ(s["mode"], "cpe");
  EXPECT_EQ(s["services"].size(), 2u);
  EXPECT_TRUE(s.contains("finished"));
}

TEST_F(ApiTest, MetricsWindow) {
  ASSERT_TRUE(WaitFor([&] { return GetJson("/state")["clock_s"].get<double>() > 200; }));
  auto m = GetJson("/metrics?window=60");
  EXPECT_LE(m["scrapes"].size(), 3u);
  EXPECT_GE(m["scrapes"].size(), 2u);
  EXPECT_EQ(m["scrapes"][0]["services"].size(), 2u);
  EXPECT_EQ(GetJson("/metrics?window=abc", 400)["field"], "window");
  EXPECT_EQ(GetJson("/metrics?window=-5", 400)["field"], "window");
}

TEST_F(ApiTest, FaultValidation) {
  EXPECT_EQ(Post("/faults", "{").first, 400);
  auto [s1, b1] = Post("/faults", R"({"kind":"meltdown","service":"frontend","magnitude":1})");
  EXPECT_EQ(s1, 400);
  EXPECT_EQ(b1["field"], "kind");
  auto [s2, b2] = Post("/faults", R"({"kind":"pod_eviction","service":"frontend"})");
  EXPECT_EQ(s2, 400);
  EXPECT_EQ(b2["field"], "magnitude");
  auto [s3, b3] = Post("/faults", R"({"kind":"pod_eviction","service":"frontend","magnitude":2,"when":1})");
  EXPECT_EQ(s3, 400);
  EXPECT_EQ(b3["field"], "when");
  auto [s4, b4] = Post("/faults", R"({"kind":"cpu_saturation","service":"frontend","magnitude":1.5})");
  EXPECT_EQ(s4, 400);
  EXPECT_EQ(b4["field"], "fault.magnitude");
  EXPECT_EQ(Post("/faults", R"({"kind":"pod_eviction","service":"nope","magnitude":2})").first, 404);
}

TEST_F(ApiTest, InjectedFaultShowsUpOnTheStream) {
  const auto before = session_->events().last_seq();
  auto [status, body] = Post("/faults", R"({"kind":"pod_eviction","service":"checkout","magnitude":3})");
  ASSERT_EQ(status, 200);
  EXPECT_FALSE(body["rejected"].get<bool>());
  auto page = GetJson("/events?stream=false&after_seq=" + std::to_string(before));
  bool opened = false;
  for (const auto& e : page) opened = opened || e["kind"] == "incident_opened";
  EXPECT_TRUE(opened);
}

TEST_F(ApiTest, ApprovalRoundTrip) {
  EXPECT_EQ(Post("/approvals/999", R"({"decision":"approve"})").first, 404);
  EXPECT_EQ(Post("/approvals/1", R"({"decision":"maybe"})").second["field"], "decision");
  EXPECT_EQ(Post("/approvals/1", "[]").first, 400);

  auto [status, body] = Post("/faults", R"({"kind":"config_drift","service":"frontend","magnitude":1})");
  ASSERT_EQ(status, 200);
  int id = 0;
  ASSERT_TRUE(WaitFor([&] {
    for (const auto& a : GetJson("/approvals"))
      if (a["action"]["kind"] == "rollback_config") id = a["id"].get<int>();
    return id != 0;
  }));

  auto [s1, b1] = Post("/approvals/" + std::to_string(id), R"({"decision":"approve"})");
  EXPECT_EQ(s1, 200) << b1;
  EXPECT_EQ(Post("/approvals/" + std::to_string(id), R"({"decision":"deny"})").first, 409);

  ASSERT_TRUE(WaitFor([&] {
    for (const auto& row : GetJson("/audit"))
      if (row["action_id"] == id && row["verdict"] == "executed") return true;
    return false;
  }));
  bool approved_by_operator = false;
  for (const auto& row : GetJson("/audit"))
    if (row["action_id"] == id && row["verdict"] == "approved") approved_by_operator = row["actor"] == "operator";
  EXPECT_TRUE(approved_by_operator);
}

TEST_F(ApiTest, DenyIsAudited) {
  Post("/faults", R"({"kind":"config_drift","service":"checkout","magnitude":1})");
  int id = 0;
  ASSERT_TRUE(WaitFor([&] {
    for (const auto& a : GetJson("/approvals"))
      if (a["action"]["kind"] == "rollback_config") id = a["id"].get<int>();
    return id != 0;
  }));
  EXPECT_EQ(Post("/approvals/" + std::to_string(id), R"({"decision":"deny"})").first, 200);
  bool denied = false;
  for (const auto& row : GetJson("/audit"))
    denied = denied || (row["action_id"] == id && row["verdict"] == "denied" && row["actor"] == "operator");
  EXPECT_TRUE(denied);
}

TEST_F(ApiTest, StreamResumesWithoutGapsOrDuplicates) {
  const auto first = StreamSeqs(0, 15);
  ASSERT_GE(first.size(), 15u);
  for (std::size_t i = 0; i < first.size(); ++i) EXPECT_EQ(first[i], i + 1);
  const auto resumed = StreamSeqs(first.back(), 5);
  ASSERT_GE(resumed.size(), 5u);
  for (std::size_t i = 0; i < resumed.size(); ++i) EXPECT_EQ(resumed[i], first.back() + i + 1);

  auto page = GetJson("/events?stream=false&after_seq=5&limit=3");
  ASSERT_EQ(page.size(), 3u);
  EXPECT_EQ(page[0]["seq"], 6);
  EXPECT_EQ(page[2]["seq"], 8);
  EXPECT_EQ(GetJson("/events?after_seq=x", 400)["field"], "after_seq");
  EXPECT_EQ(GetJson("/events?stream=false&limit=abc", 400)["field"], "limit");
  EXPECT_EQ(GetJson("/events?stream=false&limit=0", 400)["field"], "limit");
}

TEST_F(ApiTest, ReportIsALiveRollup) {
  ASSERT_TRUE(WaitFor([&] { return GetJson("/state")["clock_s"].get<double>() > 700; }));
  auto r = GetJson("/report");
  EXPECT_EQ(r["mode"], "cpe");
  EXPECT_TRUE(r.contains("mean_mttr_s"));
  EXPECT_GE(r["clock_s"].get<double>(), 600);
}

}  // namespace
}  // namespace cpe::api

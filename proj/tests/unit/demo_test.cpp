#include "warden/demo.hpp"

#include <gtest/gtest.h>
#include <httplib.h>

#include "test_support.hpp"
#include "warden/client.hpp"
#include "warden/target.hpp"

namespace warden {
namespace {

using nlohmann::json;
using testing::read_file;
using testing::source_dir;
using testing::TempDir;

DemoPaths fixture_paths() {
  return {source_dir() / "templates", source_dir() / "fixtures" / "feed.json", source_dir() / "fixtures" / "manifests"};
}

ScenarioSpec load_scenario(const std::string& name) {
  const auto p = source_dir() / "fixtures" / "scenarios" / name;
  return scenario_from_json(json::parse(read_file(p)), p.parent_path());
}

ScenarioSpec login_rule_scenario(int attempts, double rate) {
  auto s = load_scenario("bruteforce-15.json");
  s.attempts = attempts;
  s.rate = rate;
  s.runs = 1;
  s.post_block_requests = 0;
  s.benign.reset();
  return s;
}

TEST(Scenario, ParsesFixtureAndResolvesReferences) {
  auto s = load_scenario("bruteforce-15.json");
  EXPECT_EQ(s.attempts, 15);
  EXPECT_DOUBLE_EQ(s.rate, 2.0);
  EXPECT_EQ(s.runs, 20);
  ASSERT_EQ(s.policies.size(), 1u);
  EXPECT_EQ(s.policies[0]["template_id"], "brute-force-login");
  ASSERT_EQ(s.nodes.size(), 1u);
  EXPECT_EQ(s.nodes[0]["node_name"], "node-a");
  ASSERT_TRUE(s.benign);
  EXPECT_FALSE(s.wall_clock);
  EXPECT_TRUE(load_scenario("wallclock-15.json").wall_clock);
  auto again = scenario_from_json(to_json(s));
  EXPECT_EQ(to_json(again), to_json(s));
}

TEST(Scenario, RejectsInvalidSpecs) {
  for (const auto& bad : {json{{"attempts", 0}}, json{{"rate", 0}}, json{{"rate", -1}}, json{{"attacker_ip", "x"}},
                          json{{"benign", {{"rate", 0}}}}, json{{"mode", "turbo"}}}) {
    try {
      scenario_from_json(bad);
      ADD_FAILURE() << bad;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::Validation) << bad;
    }
  }
}

TEST(Percentile, NearestRank) {
  EXPECT_FALSE(percentile({}, 95));
  EXPECT_EQ(percentile({5}, 95), 5);
  std::vector<double> v;
  for (int i = 100; i >= 1; --i) v.push_back(i);
  EXPECT_EQ(percentile(v, 95), 95);
  EXPECT_EQ(percentile(v, 50), 50);
  EXPECT_EQ(percentile(v, 100), 100);
}

class TargetTest : public ::testing::Test {
 protected:
  TargetTest() {
    TargetOptions o;
    o.log_path = dir.path() / "access.log";
    o.clock = clock;
    target = std::make_unique<TargetService>(o, [this](const std::string& ip) { return blocked.count(ip) > 0; });
    target->start();
    http = std::make_unique<httplib::Client>(target->base_url());
  }

  httplib::Result login(const std::string& ip, const std::string& user, const std::string& password) {
    return http->Post("/login", {{"X-Forwarded-For", ip}}, json{{"user", user}, {"password", password}}.dump(),
                      "application/json");
  }

  TempDir dir;
  std::shared_ptr<ManualClock> clock = std::make_shared<ManualClock>(1000);
  std::set<std::string> blocked;
  std::unique_ptr<TargetService> target;
  std::unique_ptr<httplib::Client> http;
};

TEST_F(TargetTest, AuthenticatesAndLogsInAgentFormat) {
  auto ok = login("10.1.1.1", "alice", "wonderland");
  ASSERT_TRUE(ok);
  EXPECT_EQ(ok->status, 200);
  const auto token = json::parse(ok->body)["token"].get<std::string>();
  EXPECT_EQ(token.size(), 32u);
  clock->advance(5);
  EXPECT_EQ(login("10.1.1.2", "alice", "nope")->status, 401);
  EXPECT_EQ(http->Get("/data", {{"X-Forwarded-For", "10.1.1.1"}})->status, 401);
  EXPECT_EQ(http->Get("/data", {{"X-Forwarded-For", "10.1.1.1"}, {"Authorization", "Bearer " + token}})->status, 200);

  EXPECT_EQ(read_file(dir.path() / "access.log"),
            "1000 10.1.1.1 POST /login 200 alice pat\n"
            "1005 10.1.1.2 POST /login 401 alice pat\n"
            "1005 10.1.1.1 GET /data 401 - pat\n"
            "1005 10.1.1.1 GET /data 200 alice pat\n");
  EXPECT_EQ(target->stats().by_status.at(401), 2u);
}

TEST_F(TargetTest, BlockedIpGetsForbiddenRegardlessOfCredentials) {
  blocked.insert("10.6.6.6");
  EXPECT_EQ(login("10.6.6.6", "alice", "wonderland")->status, 403);
  EXPECT_EQ(login("10.6.6.6", "alice", "bad")->status, 403);
  EXPECT_EQ(http->Get("/data", {{"X-Forwarded-For", "10.6.6.6"}})->status, 403);
  EXPECT_EQ(login("10.6.6.7", "alice", "wonderland")->status, 200);
  auto log = read_file(dir.path() / "access.log");
  EXPECT_NE(log.find("10.6.6.6 POST /login 403 alice pat"), std::string::npos);
}

TEST_F(TargetTest, SecondTargetOnSamePortFails) {
  TargetOptions o;
  o.port = target->port();
  TargetService other(o);
  try {
    other.start();
    ADD_FAILURE() << "bound twice";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::PortInUse);
  }
}

TEST(Demo, FifteenAttemptsAtTwoPerSecondBlockAfterEleventh) {
  TempDir dir;
  DemoEnvironment env(login_rule_scenario(15, 2), fixture_paths(), dir.path());
  env.setup();
  auto statuses = env.run_bruteforce();
  ASSERT_EQ(statuses.size(), 15u);
  for (int i = 0; i < 11; ++i) EXPECT_EQ(statuses[i], 401) << i;
  for (int i = 11; i < 15; ++i) EXPECT_EQ(statuses[i], 403) << i;
  auto run = env.collect();
  ASSERT_EQ(run.incidents.size(), 1u);
  EXPECT_EQ(run.incidents[0]["match"]["group_key"], "203.0.113.66");
  EXPECT_EQ(run.incidents[0]["match"]["evidence"].size(), 11u);
  ASSERT_EQ(run.blocklist.size(), 1u);
  EXPECT_EQ(run.blocklist[0]["ip"], "203.0.113.66");
}

TEST(Demo, BelowThresholdAndSpreadAttacksAreIgnored) {
  for (auto [attempts, rate] : {std::pair{8, 2.0}, std::pair{10, 1.0 / 6.0}, std::pair{11, 1.0 / 6.1}}) {
    TempDir dir;
    DemoEnvironment env(login_rule_scenario(attempts, rate), fixture_paths(), dir.path());
    env.setup();
    auto statuses = env.run_bruteforce();
    EXPECT_EQ(std::count(statuses.begin(), statuses.end(), 401), attempts);
    auto run = env.collect();
    EXPECT_TRUE(run.incidents.empty()) << attempts;
    EXPECT_TRUE(run.blocklist.empty()) << attempts;
  }
}

TEST(Demo, SingleTypoThenSuccessRaisesNothing) {
  TempDir dir;
  auto spec = login_rule_scenario(1, 1);
  DemoEnvironment env(spec, fixture_paths(), dir.path());
  env.setup();
  auto stats = env.run_benign({10, 1, 0.2, 0});
  EXPECT_EQ(stats.requests, 2u);
  httplib::Client c(env.target().base_url());
  EXPECT_EQ(c.Post("/login", {{"X-Forwarded-For", "10.2.2.2"}}, R"({"user":"bob","password":"x"})", "application/json")
                ->status,
            401);
  EXPECT_EQ(c.Post("/login", {{"X-Forwarded-For", "10.2.2.2"}}, R"({"user":"bob","password":"builder"})",
                   "application/json")
                ->status,
            200);
  auto run = env.collect();
  EXPECT_TRUE(run.incidents.empty());
}

TEST(Demo, BenignClientsAreNeverBlockedDuringAttack) {
  TempDir dir;
  auto spec = load_scenario("bruteforce-15.json");
  spec.runs = 1;
  spec.post_block_requests = 200;
  DemoEnvironment env(spec, fixture_paths(), dir.path());
  env.setup();
  env.run_bruteforce();
  auto [rejected, benign] = env.run_post_block(200);
  EXPECT_EQ(rejected, 200u);
  EXPECT_EQ(benign.rejected, 0u);
  EXPECT_EQ(benign.errors, 0u);
  auto run = env.collect();
  auto k = measure_kpis({run});
  EXPECT_EQ(k.attacks_expected, 1u);
  EXPECT_EQ(k.detection_rate, 1.0);
  EXPECT_EQ(k.false_positive_count, 0u);
  EXPECT_EQ(k.benign_rejected, 0u);
  EXPECT_GT(k.benign_requests, 100u);
  EXPECT_EQ(k.block_rate, 1.0);
  // 4 attack attempts after the block plus the 200 probes.
  EXPECT_EQ(k.post_block_requests, 204u);
  EXPECT_EQ(k.time_to_alert_ms, std::vector<std::int64_t>{0});
}

TEST(Demo, VirtualRunsAreReproducible) {
  auto spec = load_scenario("bruteforce-15.json");
  spec.runs = 2;
  spec.post_block_requests = 20;
  TempDir a;
  TempDir b;
  auto first = run_scenario(spec, fixture_paths(), a.path());
  auto second = run_scenario(spec, fixture_paths(), b.path());
  ASSERT_EQ(first.size(), 2u);
  for (std::size_t i = 0; i < first.size(); ++i) {
    EXPECT_EQ(first[i].incidents.size(), second[i].incidents.size());
    std::set<std::string> ips_a;
    std::set<std::string> ips_b;
    for (const auto& e : first[i].blocklist) ips_a.insert(e["ip"].get<std::string>());
    for (const auto& e : second[i].blocklist) ips_b.insert(e["ip"].get<std::string>());
    EXPECT_EQ(ips_a, ips_b);
    EXPECT_EQ(first[i].access_log, second[i].access_log);
  }
}

TEST(Demo, ScenarioWritesKpiReport) {
  auto spec = load_scenario("bruteforce-15.json");
  spec.runs = 3;
  spec.post_block_requests = 10;
  spec.benign->duration_s = 2;
  TempDir dir;
  auto k = run_and_measure(spec, fixture_paths(), dir.path());
  EXPECT_EQ(k.runs, 3u);
  EXPECT_EQ(k.detection_rate, 1.0);
  EXPECT_EQ(k.block_rate, 1.0);
  EXPECT_EQ(k.attack_attempts, 45u);
  EXPECT_EQ(k.attack_attempts_denied, 45u);
  auto saved = json::parse(read_file(dir.path() / "kpi-report.json"));
  EXPECT_EQ(saved["detection_rate"], 1.0);
  EXPECT_EQ(saved["scenario"]["name"], "bruteforce-15");
  auto table = kpi_table(k);
  EXPECT_NE(table.find("Percentage of packets not detected which match at least one of the detection rules  0%"),
            std::string::npos)
      << table;
  // Recomputing from disk gives the same numbers.
  std::vector<RunRecord> loaded;
  for (int i = 0; i < 3; ++i) loaded.push_back(load_run(dir.path() / ("run-" + std::to_string(i))));
  EXPECT_EQ(to_json(measure_kpis(loaded)), to_json(k));
}

TEST(Demo, ScanKeepsTargetServingAndCoversEveryComponent) {
  auto spec = load_scenario("scan.json");
  TempDir dir;
  DemoEnvironment env(spec, fixture_paths(), dir.path());
  env.setup();
  auto record = env.run_scan();
  EXPECT_EQ(record["status"], "completed");
  auto run = env.collect();
  auto k = measure_kpis({run});
  EXPECT_EQ(k.asset_coverage, 1.0);
  EXPECT_EQ(k.scan_duration_ms.size(), 5u);
  for (const auto& [c, v] : k.scan_duration_ms) EXPECT_LT(v, 60'000) << c;
  EXPECT_EQ(k.scan_probe_error_rate, 0.0);
  ASSERT_TRUE(k.vuln_alert_ms);
  EXPECT_GE(*k.vuln_alert_ms, 0);
  EXPECT_LT(*k.vuln_alert_ms, 2000);
}

// KPI arithmetic on a hand-built run, checked against values worked out by hand.
TEST(MeasureKpis, HandBuiltRun) {
  RunRecord r;
  r.ns = "pat";
  r.attacker_ip = "10.0.0.1";
  r.attempts = 4;
  r.benign_ips = {"10.0.0.2"};
  r.policies = json::array({{{"policy_id", "pol-1"},
                             {"enabled", true},
                             {"scope", {{"namespace", "pat"}}},
                             {"rule",
                              {{"window",
                                {{"event", {{"kind", "auth_failure"}}},
                                 {"group_by", "client_ip"},
                                 {"window_s", 10},
                                 {"cmp", ">="},
                                 {"threshold", 3}}}}}}});
  auto line = [](TimestampMs ts, const std::string& ip, int status, const std::string& path = "/login") {
    return AccessRecord{ts, ip, path == "/login" ? "POST" : "GET", path, status, std::nullopt, "pat"};
  };
  r.access_log = {line(0, "10.0.0.1", 401),     line(1000, "10.0.0.1", 401), line(2000, "10.0.0.2", 401),
                  line(3000, "10.0.0.1", 401),  line(3500, "10.0.0.2", 200), line(4000, "10.0.0.1", 403),
                  line(4100, "10.0.0.1", 403, "/data"), line(4200, "10.0.0.2", 200, "/data")};
  r.incidents = json::array({{{"policy_id", "pol-1"}, {"created_ts", 3250}, {"match", {{"group_key", "10.0.0.1"}}}},
                             {{"policy_id", "pol-1"}, {"created_ts", 3600}, {"match", {{"group_key", "10.0.0.2"}}}}});
  r.blocklist = json::array({{{"ip", "10.0.0.1"}, {"created_ts", 3300}}});
  auto k = measure_kpis({r});
  EXPECT_EQ(k.attacks_expected, 1u);
  EXPECT_EQ(k.attacks_detected, 1u);
  EXPECT_EQ(k.time_to_alert_ms, std::vector<std::int64_t>{250});
  EXPECT_EQ(k.time_to_block_ms, std::vector<std::int64_t>{300});
  EXPECT_EQ(k.false_positive_count, 1u);  // 10.0.0.2 failed only once
  EXPECT_EQ(k.post_block_requests, 2u);
  EXPECT_EQ(k.post_block_rejected, 2u);
  EXPECT_EQ(k.attack_attempts, 4u);
  EXPECT_EQ(k.attack_attempts_denied, 4u);
  EXPECT_EQ(k.benign_requests, 3u);
  EXPECT_EQ(k.benign_rejected, 0u);
  EXPECT_FALSE(k.asset_coverage);
}

}  // namespace
}  // namespace warden

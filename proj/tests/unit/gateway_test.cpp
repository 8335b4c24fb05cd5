#include "warden/gateway.hpp"

#include <gtest/gtest.h>
#include <httplib.h>

#include <set>

#include "test_support.hpp"

namespace warden {
namespace {

using nlohmann::json;
using testing::read_file;
using testing::source_dir;
using testing::TempDir;

StackOptions options_for(const std::filesystem::path& dir, std::shared_ptr<Clock> clock) {
  StackOptions o;
  o.data_dir = dir;
  o.templates_dir = source_dir() / "templates";
  o.feed_path = source_dir() / "fixtures" / "feed.json";
  o.manifests_dir = source_dir() / "fixtures" / "manifests";
  o.clock = std::move(clock);
  return o;
}

json failure_event(int i, TimestampMs ts, const std::string& ip = "10.0.0.66", const std::string& ns = "pat") {
  return {{"event_id", "ev-" + std::to_string(i)},
          {"ts", ts},
          {"source", {{"agent_id", "nla-1"}, {"node_name", "node-a"}, {"namespace", ns}}},
          {"kind", "auth_failure"},
          {"attrs", {{"client_ip", ip}, {"path", "/login"}, {"status_code", "401"}}}};
}

class GatewayTest : public ::testing::Test {
 protected:
  explicit GatewayTest(std::string token = "")
      : clock(std::make_shared<ManualClock>(1'700'000'000'000)),
        stack(std::make_unique<Stack>(options_for(dir.path(), clock))),
        server(std::make_unique<GatewayServer>(*stack, GatewayOptions{token})) {
    server->start();
    client = std::make_unique<httplib::Client>("127.0.0.1", server->port());
    if (!token.empty()) client->set_bearer_token_auth(token);
  }

  json post(const std::string& path, const json& body, int expected) {
    auto res = client->Post(path, body.dump(), "application/json");
    EXPECT_TRUE(res) << path;
    if (!res) return {};
    EXPECT_EQ(res->status, expected) << path << " " << res->body;
    return json::parse(res->body);
  }
  json get(const std::string& path, int expected = 200) {
    auto res = client->Get(path);
    EXPECT_TRUE(res) << path;
    if (!res) return {};
    EXPECT_EQ(res->status, expected) << path << " " << res->body;
    return json::parse(res->body);
  }

  void register_fixture_node() {
    post("/v1/infrastructure/nodes", json::parse(read_file(source_dir() / "fixtures" / "nodes.json"))[0], 201);
  }

  TempDir dir;
  std::shared_ptr<ManualClock> clock;
  std::unique_ptr<Stack> stack;
  std::unique_ptr<GatewayServer> server;
  std::unique_ptr<httplib::Client> client;
};

TEST_F(GatewayTest, RegisterNodeExposesNamespaces) {
  auto node = post("/v1/infrastructure/nodes", {{"node_name", "n1"}, {"namespaces", {"pat", "cat"}}}, 201);
  EXPECT_EQ(node["namespaces"], json({"pat", "cat"}));
  EXPECT_EQ(get("/v1/infrastructure/nodes")["items"].size(), 1u);
  auto dup = post("/v1/infrastructure/nodes", {{"node_name", "n1"}, {"namespaces", {"pat"}}}, 409);
  EXPECT_EQ(dup["error"], "DuplicateNode");
  auto empty = post("/v1/infrastructure/nodes", {{"node_name", "n2"}, {"namespaces", json::array()}}, 422);
  EXPECT_EQ(empty["details"][0]["path"], "/namespaces");
}

TEST_F(GatewayTest, OnboardFromTemplateAndRoundTrip) {
  register_fixture_node();
  auto created = post("/v1/policies",
                      {{"template_id", "brute-force-login"},
                       {"bindings", {{"threshold", 10}, {"window", "60s"}}},
                       {"scope", {{"namespace", "pat"}}}},
                      201);
  const auto id = created["policy_id"].get<std::string>();
  auto fetched = get("/v1/policies/" + id);
  EXPECT_EQ(fetched, created["policy"]);
  EXPECT_TRUE(fetched["enabled"].get<bool>());
  EXPECT_EQ(instance_from_json(fetched), instance_from_json(created["policy"]));
  auto listed = get("/v1/policies");
  ASSERT_EQ(listed["items"].size(), 1u);
  EXPECT_EQ(listed["items"][0], fetched);
}

TEST_F(GatewayTest, OnboardErrors) {
  register_fixture_node();
  auto bad = post("/v1/policies",
                  {{"rule", {{"window", {{"event", {{"kind", "auth_failure"}}}, {"window_s", 0}, {"cmp", ">"}, {"threshold", 0}}}}},
                   {"actions", json::array()}},
                  422);
  EXPECT_FALSE(bad["details"].empty());
  for (const auto& d : bad["details"]) EXPECT_EQ(d["path"].get<std::string>().rfind("/rule", 0), 0u) << d;

  json doc = {{"template_id", "brute-force-login"}, {"scope", {{"namespace", "pat"}}}};
  post("/v1/policies", doc, 201);
  EXPECT_EQ(post("/v1/policies", doc, 409)["error"], "Duplicate");
  EXPECT_EQ(post("/v1/policies", {{"template_id", "nope"}}, 404)["error"], "UnknownTemplate");
  EXPECT_EQ(post("/v1/policies", {{"template_id", "brute-force-login"}, {"scope", {{"namespace", "zzz"}}}}, 422)["error"],
            "UnknownNamespace");
  EXPECT_EQ(post("/v1/policies", {{"template_id", "brute-force-login"}, {"bindings", {{"threshold", 0}}}}, 422)["error"],
            "BindingError");
  get("/v1/policies/pol-999999", 404);
}

TEST_F(GatewayTest, DeletePolicyStopsDetection) {
  register_fixture_node();
  auto id = post("/v1/policies", {{"template_id", "brute-force-login"}}, 201)["policy_id"].get<std::string>();
  auto res = client->Delete("/v1/policies/" + id);
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  json batch = json::array();
  for (int i = 0; i < 20; ++i) batch.push_back(failure_event(i, 1000 + i));
  post("/v1/events", batch, 200);
  stack->flush();
  EXPECT_TRUE(get("/v1/incidents")["items"].empty());
}

TEST_F(GatewayTest, TemplatesSearchable) {
  EXPECT_EQ(get("/v1/templates")["items"].size(), 3u);
  auto runtime = get("/v1/templates?tag=runtime");
  EXPECT_EQ(runtime["items"].size(), 2u);
  EXPECT_EQ(get("/v1/templates?q=brute")["items"][0]["template_id"], "brute-force-login");
}

TEST_F(GatewayTest, EmptyIncidentStore) {
  auto page = get("/v1/incidents");
  EXPECT_TRUE(page["items"].empty());
  EXPECT_TRUE(page["next_cursor"].is_null());
  EXPECT_EQ(get("/v1/incidents/inc-000001", 404)["error"], "NotFound");
}

TEST_F(GatewayTest, EventsBatchPartialAcceptanceAndDedup) {
  json batch = json::array();
  for (int i = 0; i < 10; ++i) batch.push_back(failure_event(i, 1000 + i));
  auto r = post("/v1/events", batch, 200);
  EXPECT_EQ(r["accepted"], 10);
  EXPECT_TRUE(r["rejected"].empty());

  json mixed = json::array({failure_event(100, 5), json{{"ts", 1}}, failure_event(101, 6)});
  mixed.push_back(failure_event(102, 7, "", "pat"));
  mixed[3]["attrs"].erase("client_ip");
  auto m = post("/v1/events", mixed, 200);
  EXPECT_EQ(m["accepted"], 2);
  ASSERT_EQ(m["rejected"].size(), 2u);
  EXPECT_EQ(m["rejected"][0]["index"], 1);
  EXPECT_EQ(m["rejected"][1]["index"], 3);

  auto again = post("/v1/events", batch, 200);
  EXPECT_EQ(again["accepted"], 0);
  EXPECT_EQ(again["duplicates"], 10);
  EXPECT_EQ(get("/v1/metrics")["events"]["stored"], 12);

  json huge = json::array();
  for (int i = 0; i < 501; ++i) huge.push_back(failure_event(1000 + i, i));
  post("/v1/events", huge, 422);
}

TEST_F(GatewayTest, BruteForceIncidentVisibleWithBlockedIpAndUnblock) {
  register_fixture_node();
  post("/v1/policies", {{"template_id", "brute-force-login"}, {"scope", {{"namespace", "pat"}}}}, 201);
  json batch = json::array();
  for (int i = 0; i < 15; ++i) batch.push_back(failure_event(i, 1'000'000 + i * 500));
  batch.push_back(failure_event(99, 1'000'100, "10.0.0.77", "cat"));
  post("/v1/events", batch, 200);
  stack->flush();

  auto page = get("/v1/incidents");
  ASSERT_EQ(page["items"].size(), 1u);
  const auto id = page["items"][0]["incident_id"].get<std::string>();
  auto detail = get("/v1/incidents/" + id);
  EXPECT_EQ(detail["evidence_count"], 11);
  EXPECT_EQ(detail["blocked_ips"], json({"10.0.0.66"}));
  EXPECT_TRUE(get("/v1/incidents?namespace=cat")["items"].empty());
  EXPECT_EQ(get("/v1/incidents?namespace=pat")["items"].size(), 1u);

  EXPECT_TRUE(get("/v1/blocklist/check?ip=10.0.0.66")["blocked"].get<bool>());
  EXPECT_FALSE(get("/v1/blocklist/check?ip=10.0.0.77")["blocked"].get<bool>());
  EXPECT_EQ(get("/v1/blocklist")["items"].size(), 1u);

  auto res = client->Delete("/v1/blocklist/10.0.0.66");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  EXPECT_FALSE(get("/v1/blocklist/check?ip=10.0.0.66")["blocked"].get<bool>());
  res = client->Delete("/v1/blocklist/10.0.0.66");
  EXPECT_EQ(res->status, 404);
  EXPECT_EQ(get("/v1/blocklist/check?ip=garbage", 422)["error"], "InvalidIp");
}

TEST_F(GatewayTest, IncidentPaginationIsStable) {
  register_fixture_node();
  post("/v1/policies",
       {{"template_id", "brute-force-login"}, {"bindings", {{"threshold", 1}}}, {"scope", {{"namespace", "pat"}}}}, 201);
  json batch = json::array();
  for (int ip = 0; ip < 37; ++ip) {
    for (int k = 0; k < 2; ++k) batch.push_back(failure_event(ip * 2 + k, 5000 + ip, "10.9.0." + std::to_string(ip)));
  }
  post("/v1/events", batch, 200);
  stack->flush();
  std::set<std::string> seen;
  std::string cursor;
  int pages = 0;
  while (true) {
    auto p = get("/v1/incidents?limit=5" + (cursor.empty() ? "" : "&cursor=" + httplib::detail::encode_url(cursor)));
    for (const auto& i : p["items"]) EXPECT_TRUE(seen.insert(i["incident_id"].get<std::string>()).second);
    ++pages;
    if (p["next_cursor"].is_null()) break;
    cursor = p["next_cursor"];
  }
  EXPECT_EQ(seen.size(), 37u);
  EXPECT_EQ(pages, 8);

  std::set<std::string> blocked;
  for (int i = 0; i < 3; ++i) {
    auto p = get("/v1/blocklist?limit=13&cursor=" + std::to_string(i * 13));
    for (const auto& b : p["items"]) EXPECT_TRUE(blocked.insert(b["ip"].get<std::string>()).second);
  }
  EXPECT_EQ(blocked.size(), 37u);
}

TEST_F(GatewayTest, ScanReportMatchesFixtureAndVulnPolicyAlerts) {
  register_fixture_node();
  auto s = post("/v1/scans", {{"scope", {"pat", "cat"}}}, 202);
  const auto id = s["scan_id"].get<std::string>();
  ASSERT_TRUE(stack->wait_scan(id, std::chrono::seconds(10)));
  auto record = get("/v1/scans/" + id);
  EXPECT_EQ(record["status"], "completed");
  EXPECT_EQ(record["report"]["findings"].size(), 19u);
  EXPECT_EQ(record["report"]["components_scanned"].size(), 5u);
  EXPECT_TRUE(record["report"]["namespaces"].contains("pat"));
  EXPECT_TRUE(record["report"]["namespaces"].contains("cat"));
  get("/v1/scans/scan-999999", 404);

  // The vulnerability template for pat fires (5 critical findings); cat does not.
  auto pat = post("/v1/policies", {{"template_id", "vulnerability-alert"}, {"scope", {{"namespace", "pat"}}}}, 201);
  auto cat = post("/v1/policies", {{"template_id", "vulnerability-alert"}, {"scope", {{"namespace", "cat"}}}}, 201);
  ASSERT_TRUE(stack->wait_scan(pat["scan_id"], std::chrono::seconds(10)));
  ASSERT_TRUE(stack->wait_scan(cat["scan_id"], std::chrono::seconds(10)));
  auto incidents = get("/v1/incidents");
  ASSERT_EQ(incidents["items"].size(), 1u);
  EXPECT_EQ(incidents["items"][0]["namespace"], "pat");
  EXPECT_EQ(incidents["items"][0]["policy_id"], pat["policy_id"]);
  // 5 critical findings plus 10 scoring above 5.3; evidence is their union.
  EXPECT_EQ(incidents["items"][0]["match"]["evidence"].size(), 10u);
}

TEST_F(GatewayTest, ScanWithUncoveredComponentFails) {
  post("/v1/infrastructure/nodes",
       {{"node_name", "n"}, {"namespaces", {"pat"}}, {"components", {{{"component", "ghost"}, {"namespace", "pat"}}}}}, 201);
  EXPECT_EQ(post("/v1/scans", {{"namespace", "pat"}}, 422)["error"], "CoverageError");
  EXPECT_EQ(post("/v1/scans", {{"namespace", "nowhere"}}, 422)["error"], "UnknownNamespace");
}

TEST_F(GatewayTest, MetricsAndMalformedBodies) {
  auto res = client->Post("/v1/policies", "{not json", "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 422);
  auto m = get("/v1/metrics");
  EXPECT_TRUE(m.contains("detection"));
  EXPECT_GE(m["gateway"]["errors"].get<int>(), 1);
}

TEST_F(GatewayTest, StateSurvivesRestart) {
  register_fixture_node();
  auto id = post("/v1/policies", {{"template_id", "brute-force-login"}, {"scope", {{"namespace", "pat"}}}}, 201)["policy_id"];
  server.reset();
  stack.reset();
  stack = std::make_unique<Stack>(options_for(dir.path(), clock));
  server = std::make_unique<GatewayServer>(*stack, GatewayOptions{});
  server->start();
  client = std::make_unique<httplib::Client>("127.0.0.1", server->port());
  EXPECT_EQ(get("/v1/policies")["items"][0]["policy_id"], id);
  EXPECT_EQ(get("/v1/infrastructure/nodes")["items"].size(), 1u);
  json batch = json::array();
  for (int i = 0; i < 11; ++i) batch.push_back(failure_event(i, 2000 + i));
  post("/v1/events", batch, 200);
  stack->flush();
  EXPECT_EQ(get("/v1/incidents")["items"].size(), 1u);
}

class AuthGatewayTest : public GatewayTest {
 protected:
  AuthGatewayTest() : GatewayTest("s3cret") {}
};

TEST_F(AuthGatewayTest, AdminEndpointsNeedBearerToken) {
  httplib::Client anonymous("127.0.0.1", server->port());
  auto res = anonymous.Get("/v1/policies");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 401);
  res = anonymous.Get("/v1/blocklist/check?ip=10.0.0.1");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  get("/v1/policies");
}

TEST(Gateway, PortInUse) {
  Stack stack(StackOptions{});
  GatewayServer first(stack, GatewayOptions{});
  first.start();
  GatewayServer second(stack, GatewayOptions{"", "127.0.0.1", first.port()});
  try {
    second.start();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::PortInUse);
  }
}

TEST(Replay, TwoRunsAgree) {
  TempDir dir;
  {
    auto opts = options_for(dir.path(), std::make_shared<ManualClock>(1));
    Stack stack(opts);
    stack.register_node(json::parse(read_file(source_dir() / "fixtures" / "nodes.json"))[0]);
    stack.onboard_policy({{"template_id", "brute-force-login"}, {"scope", {{"namespace", "pat"}}}});
    json batch = json::array();
    for (int i = 0; i < 40; ++i) batch.push_back(failure_event(i, 10'000 + i * 700, "10.1.1." + std::to_string(i % 3)));
    stack.ingest_events(batch);
    stack.flush();
  }
  auto a = replay_log(dir.path());
  auto b = replay_log(dir.path());
  EXPECT_EQ(a.events, 40u);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.incidents.size(), 3u);
  EXPECT_EQ(a.blocklist.size(), 3u);
}

}  // namespace
}  // namespace warden

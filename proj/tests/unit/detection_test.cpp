#include "warden/detection.hpp"

#include <gtest/gtest.h>

#include <random>

#include "../support/oracles.hpp"
#include "test_support.hpp"

namespace warden {
namespace {

using testing::make_event;
using testing::read_file;
using testing::source_dir;

PolicyInstance brute_force(std::string id, std::string ns = "pat", std::int64_t threshold = 10,
                           std::int64_t window_s = 60) {
  auto t = parse_template(read_file(source_dir() / "templates" / "bruteforce.template.json"));
  return instantiate(t, {{"threshold", threshold}, {"window", window_s}}, Scope{std::move(ns), std::nullopt},
                     std::move(id), 0);
}

PolicyInstance alert_only(std::string id, std::int64_t threshold, std::int64_t window_s, Comparator cmp) {
  PolicyInstance p;
  p.policy_id = std::move(id);
  WindowCondition w;
  w.event.kind = EventKind::AuthFailure;
  w.group_by = "client_ip";
  w.window_s = window_s;
  w.cmp = cmp;
  w.threshold = threshold;
  p.rule = RuleExpr::of(w);
  p.actions = {ActionSpec{ActionKind::Alert, nlohmann::json::object()}};
  return p;
}

class RuntimeTest : public ::testing::Test {
 protected:
  explicit RuntimeTest(DetectionOptions options = {})
      : clock(std::make_shared<ManualClock>(0)),
        enactor(blocklist, incidents, clock),
        runtime(enactor, incidents, blocklist, clock, options) {}

  SecurityEvent failure(int i, TimestampMs ts, std::string ip = "10.0.0.9", std::string ns = "pat") {
    return make_event("f" + std::to_string(i), EventKind::AuthFailure, ts, std::move(ip), std::move(ns));
  }

  std::shared_ptr<ManualClock> clock;
  Blocklist blocklist;
  IncidentStore incidents;
  Enactor enactor;
  DetectionRuntime runtime;
};

TEST_F(RuntimeTest, EleventhFailureInsideMinuteMatches) {
  runtime.deploy(brute_force("bf"));
  for (int i = 0; i < 10; ++i) EXPECT_TRUE(runtime.ingest(failure(i, 1000 + i * 500)).empty()) << i;
  auto matches = runtime.ingest(failure(10, 6000));
  ASSERT_EQ(matches.size(), 1u);
  EXPECT_EQ(matches[0].group_key, "10.0.0.9");
  EXPECT_EQ(matches[0].matched_at, 6000);
  EXPECT_EQ(matches[0].evidence.size(), 11u);
  EXPECT_EQ(matches[0].evidence.front(), "f0");
  EXPECT_EQ(matches[0].evidence.back(), "f10");
}

TEST_F(RuntimeTest, ExactlyTenFailuresDoNotMatch) {
  runtime.deploy(brute_force("bf"));
  for (int i = 0; i < 10; ++i) EXPECT_TRUE(runtime.ingest(failure(i, i * 5900)).empty());
}

TEST_F(RuntimeTest, ElevenFailuresSpanningSixtyOneSecondsDoNotMatch) {
  runtime.deploy(brute_force("bf"));
  std::vector<std::int64_t> ts;
  for (int i = 0; i < 11; ++i) ts.push_back(i * 6100);
  ASSERT_FALSE(oracle::any_window_exceeds(ts, 60'000, 10));
  for (int i = 0; i < 11; ++i) EXPECT_TRUE(runtime.ingest(failure(i, ts[i])).empty());
}

TEST_F(RuntimeTest, WindowBoundaryIsHalfOpen) {
  runtime.deploy(alert_only("p", 2, 10, Comparator::GreaterEqual));
  EXPECT_TRUE(runtime.ingest(failure(0, 0)).empty());
  // ts 10000 - 10s == 0: the first event has left the window (0, 10000].
  EXPECT_TRUE(runtime.ingest(failure(1, 10'000)).empty());
  EXPECT_EQ(runtime.ingest(failure(2, 19'999)).size(), 1u);
}

TEST_F(RuntimeTest, NamespaceScopeIsolatesPolicies) {
  runtime.deploy(brute_force("bf-pat", "pat"));
  for (int i = 0; i < 20; ++i) EXPECT_TRUE(runtime.ingest(failure(i, i * 100, "10.0.0.9", "cat")).empty());
  EXPECT_EQ(runtime.window_count("bf-pat", "10.0.0.9", 2000), 0);
}

TEST_F(RuntimeTest, DeployTwiceIsRejected) {
  runtime.deploy(brute_force("bf"));
  try {
    runtime.deploy(brute_force("bf"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::AlreadyDeployed);
  }
}

TEST_F(RuntimeTest, ReportOnlyRuleIsNotRuntime) {
  PolicyInstance p;
  p.policy_id = "vuln";
  p.rule = RuleExpr::of(ReportCondition{});
  try {
    runtime.deploy(p);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NotRuntimeRule);
  }
}

TEST_F(RuntimeTest, DeployEnablesInstance) { EXPECT_TRUE(runtime.deploy(brute_force("bf")).enabled); }

TEST_F(RuntimeTest, OnMatchBlocksAndAlerts) {
  runtime.deploy(brute_force("bf"));
  std::vector<Incident> created;
  for (int i = 0; i < 11; ++i) {
    auto out = runtime.process(failure(i, i * 1000));
    created.insert(created.end(), out.begin(), out.end());
  }
  ASSERT_EQ(created.size(), 1u);
  const auto& inc = created[0];
  ASSERT_EQ(inc.actions_taken.size(), 2u);
  EXPECT_EQ(inc.actions_taken[0].action, "alert");
  EXPECT_EQ(inc.actions_taken[1].action, "block_ip");
  EXPECT_EQ(inc.blocked_ips(), std::vector<std::string>{"10.0.0.9"});
  EXPECT_TRUE(blocklist.is_blocked("10.0.0.9", clock->now_ms()));
  EXPECT_EQ(incidents.get(inc.incident_id)->actions_taken.size(), 2u);
  EXPECT_EQ(incidents.alerts().size(), 1u);
}

TEST_F(RuntimeTest, AlertOnlyMatchLeavesBlocklistUntouched) {
  runtime.deploy(alert_only("a", 1, 60, Comparator::Greater));
  runtime.process(failure(0, 0));
  auto out = runtime.process(failure(1, 1));
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].actions_taken.size(), 1u);
  EXPECT_TRUE(blocklist.active(0).empty());
}

struct DownHook : EnforcementHook {
  void on_block(const BlockEntry&) override { throw std::runtime_error("target hook down"); }
  void on_unblock(const std::string&) override {}
};

TEST_F(RuntimeTest, EnactmentFailureIsRecordedOnPersistedIncident) {
  enactor.set_hook(std::make_shared<DownHook>());
  runtime.deploy(brute_force("bf", "pat", 1));
  runtime.process(failure(0, 0));
  auto out = runtime.process(failure(1, 1));
  ASSERT_EQ(out.size(), 1u);
  auto stored = incidents.get(out[0].incident_id);
  ASSERT_TRUE(stored);
  ASSERT_EQ(stored->errors.size(), 1u);
  EXPECT_NE(stored->errors[0].find("EnactmentError"), std::string::npos);
  EXPECT_EQ(stored->actions_taken[1].outcome, Outcome::Failed);
}

TEST_F(RuntimeTest, BlockSuppressesFurtherIncidents) {
  runtime.deploy(brute_force("bf", "pat", 2, 60));
  int incidents_seen = 0;
  for (int i = 0; i < 40; ++i) incidents_seen += runtime.process(failure(i, i * 10'000)).size();
  EXPECT_EQ(incidents_seen, 1);
  EXPECT_GT(runtime.metrics().suppressed, 0u);
}

TEST_F(RuntimeTest, PerGroupIsolation) {
  runtime.deploy(brute_force("bf", "pat", 3, 60));
  for (int i = 0; i < 3; ++i) runtime.ingest(failure(i, i, "10.0.0.1"));
  for (int i = 0; i < 3; ++i) EXPECT_TRUE(runtime.ingest(failure(10 + i, 10 + i, "10.0.0.2")).empty());
  EXPECT_EQ(runtime.window_count("bf", "10.0.0.1", 100), 3);
  EXPECT_EQ(runtime.window_count("bf", "10.0.0.2", 100), 3);
  EXPECT_EQ(runtime.ingest(failure(20, 20, "10.0.0.1")).size(), 1u);
}

TEST_F(RuntimeTest, WindowCountTracksAndPrunes) {
  runtime.deploy(brute_force("bf"));
  EXPECT_EQ(runtime.window_count("bf", "10.0.0.9", 0), 0);
  for (int i = 0; i < 3; ++i) runtime.ingest(failure(i, 1000 + i));
  EXPECT_EQ(runtime.window_count("bf", "10.0.0.9", 1002), 3);
  EXPECT_EQ(runtime.window_count("bf", "10.0.0.9", 1000 + 60'000 + 5), 0);
  EXPECT_THROW(runtime.window_count("nope", "x", 0), Error);
}

TEST_F(RuntimeTest, MissingGroupKeyIsSkippedAndCounted) {
  runtime.deploy(alert_only("a", 1, 60, Comparator::GreaterEqual));
  auto e = make_event("no-ip", EventKind::AuthFailure, 5, "");
  e.attrs["client_ip"] = "";
  // Fails broker validation; a direct ingest counts it as malformed.
  EXPECT_TRUE(runtime.ingest(e).empty());
  EXPECT_EQ(runtime.metrics().dropped_malformed, 1u);

  runtime.undeploy("a");
  PolicyInstance by_user = alert_only("u", 1, 60, Comparator::GreaterEqual);
  by_user.rule.window.group_by = "user";
  runtime.deploy(by_user);
  EXPECT_TRUE(runtime.ingest(failure(1, 10)).empty());
  EXPECT_EQ(runtime.metrics().skipped_no_group, 1u);
}

TEST_F(RuntimeTest, LateEventsWithinBoundCountOnlyInFutureWindows) {
  runtime.deploy(alert_only("a", 3, 60, Comparator::GreaterEqual));
  runtime.ingest(failure(0, 10'000));
  runtime.ingest(failure(1, 20'000));
  // 4 s late: recorded, but does not itself trigger even though count reaches 3.
  EXPECT_TRUE(runtime.ingest(failure(2, 16'000)).empty());
  EXPECT_EQ(runtime.window_count("a", "10.0.0.9", 20'000), 3);
  // 6 s late: dropped.
  EXPECT_TRUE(runtime.ingest(failure(3, 14'000)).empty());
  EXPECT_EQ(runtime.metrics().late_dropped, 1u);
  auto next = runtime.ingest(failure(4, 20'001));
  ASSERT_EQ(next.size(), 1u);
  EXPECT_EQ(next[0].evidence.size(), 4u);
}

TEST_F(RuntimeTest, DisjunctionOfWindowsCollectsEvidenceFromSatisfiedLeaves) {
  PolicyInstance p;
  p.policy_id = "or";
  WindowCondition fast;
  fast.event.kind = EventKind::AuthFailure;
  fast.window_s = 1;
  fast.threshold = 3;
  fast.cmp = Comparator::GreaterEqual;
  WindowCondition slow = fast;
  slow.window_s = 600;
  slow.threshold = 100;
  p.rule = RuleExpr::any_of({RuleExpr::of(fast), RuleExpr::of(slow)});
  p.actions = {ActionSpec{}};
  runtime.deploy(p);
  runtime.ingest(failure(0, 0));
  runtime.ingest(failure(1, 2000));
  runtime.ingest(failure(2, 2100));
  auto m = runtime.ingest(failure(3, 2200));
  ASSERT_EQ(m.size(), 1u);
  EXPECT_EQ(m[0].evidence, (std::vector<std::string>{"f1", "f2", "f3"}));
}

class UnsuppressedRuntimeTest : public RuntimeTest {
 protected:
  UnsuppressedRuntimeTest() : RuntimeTest(DetectionOptions{false, 5'000}) {}
};

// Randomized streams against the quadratic all-windows oracle.
TEST_F(UnsuppressedRuntimeTest, MatchesAllWindowsOracle) {
  std::mt19937_64 rng(20240611);
  for (int trial = 0; trial < 100; ++trial) {
    const auto threshold = std::uniform_int_distribution<std::int64_t>(2, 50)(rng);
    const auto window_s = std::uniform_int_distribution<std::int64_t>(5, 600)(rng);
    const bool strict = trial % 2 == 0;
    const auto id = "p" + std::to_string(trial);
    runtime.deploy(alert_only(id, threshold, window_s, strict ? Comparator::Greater : Comparator::GreaterEqual));
    const int n = std::uniform_int_distribution<int>(1, 300)(rng);
    const auto max_gap = std::max<std::int64_t>(1, 2 * window_s * 1000 / threshold);
    std::vector<oracle::StreamEvent> stream;
    std::int64_t ts = 1'000'000;
    for (int i = 0; i < n; ++i) {
      ts += std::uniform_int_distribution<std::int64_t>(0, max_gap)(rng);
      stream.push_back({ts, "10.0.0." + std::to_string(std::uniform_int_distribution<int>(1, 3)(rng))});
    }
    auto expected = oracle::window_satisfied(stream, window_s * 1000, threshold, strict);
    for (std::size_t j = 0; j < stream.size(); ++j) {
      auto e = failure(static_cast<int>(j), stream[j].ts, stream[j].group);
      e.event_id = id + "-" + std::to_string(j);
      const auto matches = runtime.ingest(e);
      ASSERT_EQ(!matches.empty(), static_cast<bool>(expected[j])) << "trial " << trial << " event " << j;
    }
    runtime.undeploy(id);
  }
}

}  // namespace
}  // namespace warden

#include "warden/mitigation.hpp"

#include <gtest/gtest.h>

#include <thread>

#include "test_support.hpp"

namespace warden {
namespace {

using testing::TempDir;

RuleMatch match_for(std::string ip) {
  RuleMatch m;
  m.policy_id = "pol-1";
  m.group_key = std::move(ip);
  m.matched_at = 1000;
  m.ns = "pat";
  return m;
}

class EnactorTest : public ::testing::Test {
 protected:
  EnactorTest()
      : clock(std::make_shared<ManualClock>(10'000)),
        blocklist(dir.path()),
        incidents(dir.path()),
        enactor(blocklist, incidents, clock, dir.path()) {}

  Incident incident_for(const RuleMatch& m) { return incidents.create(m, clock->now_ms()); }

  TempDir dir;
  std::shared_ptr<ManualClock> clock;
  Blocklist blocklist;
  IncidentStore incidents;
  Enactor enactor;
};

TEST(CanonicalIp, AcceptsV4AndV6RejectsGarbage) {
  EXPECT_EQ(canonical_ip("10.0.0.9"), "10.0.0.9");
  EXPECT_EQ(canonical_ip("2001:DB8::0:1"), "2001:db8::1");
  EXPECT_FALSE(canonical_ip("not-an-ip"));
  EXPECT_FALSE(canonical_ip("10.0.0.256"));
  EXPECT_FALSE(canonical_ip(""));
}

TEST_F(EnactorTest, BlockIpActivatesEntry) {
  auto m = match_for("10.0.0.9");
  auto r = enactor.enact({ActionKind::BlockIp, nlohmann::json::object()}, m, incident_for(m));
  EXPECT_EQ(r.outcome, Outcome::Applied);
  EXPECT_EQ(r.target, "10.0.0.9");
  EXPECT_TRUE(blocklist.is_blocked("10.0.0.9", clock->now_ms()));
  EXPECT_FALSE(blocklist.find("10.0.0.9", clock->now_ms())->expires_ts);
}

TEST_F(EnactorTest, BlockIsIdempotent) {
  auto m = match_for("10.0.0.9");
  auto inc = incident_for(m);
  enactor.enact({ActionKind::BlockIp, nlohmann::json::object()}, m, inc);
  auto again = enactor.enact({ActionKind::BlockIp, nlohmann::json::object()}, m, inc);
  EXPECT_EQ(again.outcome, Outcome::Applied);
  EXPECT_EQ(blocklist.active(clock->now_ms()).size(), 1u);
}

TEST_F(EnactorTest, InvalidGroupKeyFailsWithInvalidIp) {
  auto m = match_for("not-an-ip");
  auto r = enactor.enact({ActionKind::BlockIp, nlohmann::json::object()}, m, incident_for(m));
  EXPECT_EQ(r.outcome, Outcome::Failed);
  EXPECT_EQ(r.error, ErrorCode::InvalidIp);
  EXPECT_TRUE(blocklist.active(clock->now_ms()).empty());
}

TEST_F(EnactorTest, TimedBlockExpires) {
  auto m = match_for("10.0.0.7");
  enactor.enact({ActionKind::BlockIp, {{"duration_s", 30}}}, m, incident_for(m));
  const auto expires = *blocklist.find("10.0.0.7", clock->now_ms())->expires_ts;
  EXPECT_EQ(expires, clock->now_ms() + 30'000);
  EXPECT_TRUE(blocklist.is_blocked("10.0.0.7", expires - 1));
  EXPECT_FALSE(blocklist.is_blocked("10.0.0.7", expires));
  EXPECT_FALSE(blocklist.is_blocked("10.0.0.7", expires + 1));
  // Lazily purged after the expired read.
  EXPECT_TRUE(blocklist.active(0).empty());
}

TEST_F(EnactorTest, UnblockThenReblockLinksNewIncident) {
  auto m = match_for("10.0.0.9");
  auto first = incident_for(m);
  enactor.enact({ActionKind::BlockIp, nlohmann::json::object()}, m, first);
  auto audit = enactor.unblock("10.0.0.9", "admin");
  EXPECT_EQ(audit.action, "unblock");
  EXPECT_EQ(audit.operator_, "admin");
  EXPECT_EQ(audit.incident_id, first.incident_id);
  EXPECT_FALSE(blocklist.is_blocked("10.0.0.9", clock->now_ms()));

  auto second = incident_for(m);
  enactor.enact({ActionKind::BlockIp, nlohmann::json::object()}, m, second);
  EXPECT_TRUE(blocklist.is_blocked("10.0.0.9", clock->now_ms()));
  EXPECT_EQ(blocklist.find("10.0.0.9", clock->now_ms())->incident_id, second.incident_id);
}

TEST_F(EnactorTest, UnblockUnknownIpIsNotBlocked) {
  try {
    enactor.unblock("10.9.9.9", "admin");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NotBlocked);
  }
}

TEST_F(EnactorTest, AlertWritesTimelineRow) {
  auto m = match_for("10.0.0.9");
  auto inc = incident_for(m);
  auto r = enactor.enact({ActionKind::Alert, nlohmann::json::object()}, m, inc);
  ASSERT_EQ(incidents.alerts().size(), 1u);
  EXPECT_EQ(incidents.alerts()[0].incident_id, inc.incident_id);
  EXPECT_EQ(r.target, incidents.alerts()[0].alert_id);
}

TEST_F(EnactorTest, ReportPersistsDocument) {
  auto m = match_for("10.0.0.9");
  auto r = enactor.enact({ActionKind::Report, nlohmann::json::object()}, m, incident_for(m));
  EXPECT_EQ(r.outcome, Outcome::Applied);
  EXPECT_TRUE(std::filesystem::exists(r.target));
}

struct FailingHook : EnforcementHook {
  void on_block(const BlockEntry&) override { throw std::runtime_error("target hook down"); }
  void on_unblock(const std::string&) override {}
};

TEST_F(EnactorTest, HookFailureYieldsFailedRecordAndNoBlock) {
  enactor.set_hook(std::make_shared<FailingHook>());
  auto m = match_for("10.0.0.9");
  auto r = enactor.enact({ActionKind::BlockIp, nlohmann::json::object()}, m, incident_for(m));
  EXPECT_EQ(r.outcome, Outcome::Failed);
  EXPECT_EQ(r.error, ErrorCode::Enactment);
  EXPECT_FALSE(blocklist.is_blocked("10.0.0.9", clock->now_ms()));
}

TEST_F(EnactorTest, EveryMutationIsAudited) {
  auto m = match_for("10.0.0.9");
  auto inc = incident_for(m);
  enactor.enact({ActionKind::Alert, nlohmann::json::object()}, m, inc);
  enactor.enact({ActionKind::BlockIp, nlohmann::json::object()}, m, inc);
  enactor.unblock("10.0.0.9", "ops");
  EXPECT_EQ(enactor.records().size(), 3u);
  // Records survive a restart.
  Enactor reopened(blocklist, incidents, clock, dir.path());
  EXPECT_EQ(reopened.records().size(), 3u);
}

TEST(Blocklist, PersistsAcrossRestart) {
  TempDir dir;
  {
    Blocklist b(dir.path());
    b.block({"192.168.1.5", "inc-000001", 100, std::nullopt}, 100);
    b.block({"192.168.1.6", "inc-000002", 100, 5000}, 100);
  }
  Blocklist reopened(dir.path());
  EXPECT_TRUE(reopened.is_blocked("192.168.1.5", 200));
  EXPECT_TRUE(reopened.is_blocked("192.168.1.6", 200));
  EXPECT_FALSE(reopened.is_blocked("192.168.1.6", 5000));
}

TEST(Blocklist, RejectsBadInput) {
  Blocklist b;
  EXPECT_THROW(b.is_blocked("bogus", 0), Error);
  EXPECT_THROW(b.block({"10.0.0.1", "i", 100, 100}, 100), Error);
}

TEST(Blocklist, ConcurrentReadersNeverSeePartialState) {
  Blocklist b;
  std::atomic<bool> stop{false};
  std::atomic<int> inconsistent{0};
  std::thread reader([&] {
    while (!stop) {
      for (const auto& e : b.active(0)) {
        if (e.ip.empty() || e.incident_id.empty()) ++inconsistent;
      }
    }
  });
  for (int i = 0; i < 200; ++i) {
    const auto ip = "10.1.0." + std::to_string(i % 250);
    b.block({ip, "inc-" + std::to_string(i), 0, std::nullopt}, 0);
    if (i % 3 == 0) b.unblock(ip, 0);
  }
  stop = true;
  reader.join();
  EXPECT_EQ(inconsistent.load(), 0);
}

}  // namespace
}  // namespace warden

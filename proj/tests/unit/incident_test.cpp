#include "warden/incident.hpp"

#include <gtest/gtest.h>

#include <set>

#include "test_support.hpp"

namespace warden {
namespace {

using testing::TempDir;

RuleMatch match(std::string ns, TimestampMs at, std::string key = "10.0.0.9") {
  return RuleMatch{"pol-1", std::move(key), at, {"e1", "e2"}, nlohmann::json::object(), std::move(ns)};
}

TEST(IncidentStore, EmptyStoreListsNothing) {
  IncidentStore store;
  auto page = store.list({});
  EXPECT_TRUE(page.items.empty());
  EXPECT_FALSE(page.next_cursor);
}

TEST(IncidentStore, CreatedTsNeverPrecedesMatch) {
  IncidentStore store;
  auto inc = store.create(match("pat", 5000), 1000);
  EXPECT_EQ(inc.created_ts, 5000);
  EXPECT_EQ(inc.status, IncidentStatus::Open);
}

TEST(IncidentStore, ReverseChronologicalWithNamespaceFilter) {
  IncidentStore store;
  store.create(match("pat", 1), 10);
  store.create(match("cat", 2), 20);
  store.create(match("pat", 3), 30);
  auto all = store.list({});
  ASSERT_EQ(all.items.size(), 3u);
  EXPECT_EQ(all.items[0].created_ts, 30);
  EXPECT_EQ(all.items[2].created_ts, 10);

  IncidentFilter cat;
  cat.ns = "cat";
  auto only_cat = store.list(cat);
  ASSERT_EQ(only_cat.items.size(), 1u);
  EXPECT_EQ(only_cat.items[0].ns, "cat");

  IncidentFilter since;
  since.since_ts = 20;
  EXPECT_EQ(store.list(since).items.size(), 2u);
}

TEST(IncidentStore, PaginationUnionIsCompleteWithoutDuplicates) {
  IncidentStore store;
  for (int i = 0; i < 23; ++i) store.create(match(i % 2 ? "pat" : "cat", 0), 100 + (i % 5));
  std::set<std::string> seen;
  std::optional<std::string> cursor;
  int pages = 0;
  do {
    auto page = store.list({}, 4, cursor);
    for (const auto& inc : page.items) EXPECT_TRUE(seen.insert(inc.incident_id).second);
    cursor = page.next_cursor;
    ++pages;
  } while (cursor);
  EXPECT_EQ(seen.size(), 23u);
  EXPECT_EQ(pages, 6);
}

TEST(IncidentStore, StatusTransitionsAreForwardOnly) {
  IncidentStore store;
  auto inc = store.create(match("pat", 1), 1);
  EXPECT_THROW(store.set_status(inc.incident_id, IncidentStatus::Closed), Error);
  EXPECT_EQ(store.set_status(inc.incident_id, IncidentStatus::Acknowledged).status, IncidentStatus::Acknowledged);
  EXPECT_THROW(store.set_status(inc.incident_id, IncidentStatus::Open), Error);
  EXPECT_EQ(store.set_status(inc.incident_id, IncidentStatus::Closed).status, IncidentStatus::Closed);
  EXPECT_THROW(store.set_status("inc-999999", IncidentStatus::Acknowledged), Error);
}

TEST(IncidentStore, LatestSnapshotWinsAfterRestart) {
  TempDir dir;
  std::string id;
  {
    IncidentStore store(dir.path());
    auto inc = store.create(match("pat", 1), 1);
    id = inc.incident_id;
    inc.actions_taken.push_back({"enr-000001", id, "block_ip", Outcome::Applied, "blocked", 2, std::nullopt,
                                 "10.0.0.9", ""});
    store.update(inc);
    store.append_alert(inc, "hello", 3);
  }
  IncidentStore reopened(dir.path());
  auto inc = reopened.get(id);
  ASSERT_TRUE(inc);
  EXPECT_EQ(inc->blocked_ips(), std::vector<std::string>{"10.0.0.9"});
  EXPECT_EQ(reopened.alerts().size(), 1u);
  EXPECT_NE(reopened.create(match("pat", 2), 2).incident_id, id);
}

TEST(IncidentJson, RoundTrip) {
  IncidentStore store;
  auto inc = store.create(match("pat", 7), 9);
  inc.errors.push_back("EnactmentError: x");
  inc.actions_taken.push_back({"enr-000004", inc.incident_id, "alert", Outcome::Failed, "d", 3, ErrorCode::Storage, "", ""});
  EXPECT_EQ(incident_from_json(to_json(inc)), inc);
}

}  // namespace
}  // namespace warden

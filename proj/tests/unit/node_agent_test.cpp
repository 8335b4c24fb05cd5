#include "warden/node_agent.hpp"

#include <gtest/gtest.h>

#include <fstream>

#include "test_support.hpp"
#include "warden/stack.hpp"

namespace warden {
namespace {

using nlohmann::json;
using testing::read_file;
using testing::source_dir;
using testing::TempDir;

class RecordingSink : public EventSink {
 public:
  std::size_t deliver(const std::vector<SecurityEvent>& batch) override {
    std::lock_guard lock(mutex);
    ++calls;
    if (down) throw Error(ErrorCode::StackUnreachable, "down");
    sizes.push_back(batch.size());
    events.insert(events.end(), batch.begin(), batch.end());
    return batch.size();
  }
  std::size_t received() {
    std::lock_guard lock(mutex);
    return events.size();
  }

  std::mutex mutex;
  bool down = false;
  int calls = 0;
  std::vector<std::size_t> sizes;
  std::vector<SecurityEvent> events;
};

std::vector<SecurityEvent> events(int n, int first = 0) {
  std::vector<SecurityEvent> out;
  for (int i = first; i < first + n; ++i) {
    out.push_back(testing::make_event("e-" + std::to_string(i), EventKind::AuthFailure, 1000 + i));
  }
  return out;
}

void append(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::app | std::ios::binary);
  out << text;
}

std::string failure_line(TimestampMs ts, const std::string& ip = "10.0.0.66") {
  return std::to_string(ts) + " " + ip + " POST /login 401 alice pat\n";
}

TEST(AccessRecord, ParsesValidLine) {
  auto r = parse_access_record("1700000000123 10.0.0.66 POST /login 401 alice pat");
  EXPECT_EQ(r.ts, 1700000000123);
  EXPECT_EQ(r.client_ip, "10.0.0.66");
  EXPECT_EQ(r.method, "POST");
  EXPECT_EQ(r.path, "/login");
  EXPECT_EQ(r.status_code, 401);
  EXPECT_EQ(r.user, "alice");
  EXPECT_EQ(r.ns, "pat");
  EXPECT_EQ(parse_access_record(format_access_record(r)), r);

  auto anon = parse_access_record("5 ::1 GET /data 200 - cat\r");
  EXPECT_FALSE(anon.user);
  EXPECT_EQ(format_access_record(anon), "5 ::1 GET /data 200 - cat");
}

TEST(AccessRecord, RejectsMalformedLines) {
  for (const char* bad : {"", "garbage", "1 10.0.0.1 GET /x 200 - pat extra", "1 10.0.0.1 GET /x 600 - pat",
                          "1 10.0.0.1 GET /x 99 - pat", "x 10.0.0.1 GET /x 200 - pat", "-4 10.0.0.1 GET /x 200 - pat",
                          "1 10.0.0.300 GET /x 200 - pat", "1 10.0.0.1 get /x 200 - pat", "1 10.0.0.1 GET x 200 - pat",
                          "1 10.0.0.1  GET /x 200 - pat"}) {
    try {
      parse_access_record(bad);
      ADD_FAILURE() << "accepted: " << bad;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::Parse) << bad;
    }
  }
}

TEST(Normalize, MapsLoginOutcomesToKinds) {
  AgentIdentity id{"nla-7", "node-x"};
  auto fail = normalize(parse_access_record("10 10.0.0.1 POST /login 401 bob pat"), id, 42);
  EXPECT_EQ(fail.kind, EventKind::AuthFailure);
  EXPECT_EQ(fail.event_id, "nla-7-42");
  EXPECT_EQ(fail.source, (AgentRef{"nla-7", "node-x", "pat"}));
  EXPECT_EQ(*fail.attr(attr::kClientIp), "10.0.0.1");
  EXPECT_EQ(*fail.attr(attr::kUser), "bob");
  EXPECT_EQ(*fail.attr(attr::kStatusCode), "401");
  EXPECT_TRUE(validate_event(fail).empty());

  EXPECT_EQ(normalize(parse_access_record("10 10.0.0.1 POST /login 200 bob pat"), id, 1).kind, EventKind::AuthSuccess);
  auto req = normalize(parse_access_record("10 10.0.0.1 GET /data 403 - pat"), id, 2);
  EXPECT_EQ(req.kind, EventKind::HttpRequest);
  EXPECT_EQ(req.attr(attr::kUser), nullptr);
}

TEST(RetryPolicy, DoublesUpToCap) {
  RetryPolicy p;
  std::vector<long> got;
  for (int i = 1; i <= 7; ++i) got.push_back(static_cast<long>(p.delay(i).count()));
  EXPECT_EQ(got, (std::vector<long>{200, 400, 800, 1600, 3200, 5000, 5000}));
}

TEST(Forwarder, SplitsOversizedBatches) {
  RecordingSink sink;
  Forwarder f(sink);
  EXPECT_EQ(f.forward(events(1001)), 1001u);
  EXPECT_EQ(sink.sizes, (std::vector<std::size_t>{500, 500, 1}));
}

TEST(Forwarder, RidesOutTwoSecondOutageWithBackoff) {
  RecordingSink sink;
  std::int64_t virtual_ms = 0;
  std::vector<long> sleeps;
  struct OutageSink : EventSink {
    RecordingSink& inner;
    std::int64_t& now;
    OutageSink(RecordingSink& s, std::int64_t& n) : inner(s), now(n) {}
    std::size_t deliver(const std::vector<SecurityEvent>& b) override {
      inner.down = now < 2000;
      return inner.deliver(b);
    }
  } outage(sink, virtual_ms);
  Forwarder f(outage, {}, {}, [&](std::chrono::milliseconds d) {
    sleeps.push_back(static_cast<long>(d.count()));
    virtual_ms += d.count();
  });
  EXPECT_EQ(f.forward(events(20)), 20u);
  EXPECT_EQ(sleeps, (std::vector<long>{200, 400, 800, 1600}));
  EXPECT_EQ(f.attempts_made(), 5u);
  EXPECT_EQ(sink.events.size(), 20u);
  EXPECT_EQ(f.spooled(), 0u);
}

TEST(Forwarder, SpoolsAfterExhaustionAndFlushesLater) {
  TempDir dir;
  RecordingSink sink;
  sink.down = true;
  int sleeps = 0;
  Forwarder f(sink, {}, dir.path() / "spool.jsonl", [&](auto) { ++sleeps; });
  try {
    f.forward(events(600));
    ADD_FAILURE() << "expected DeliveryExhausted";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DeliveryExhausted);
  }
  EXPECT_EQ(sleeps, 5);
  EXPECT_EQ(f.attempts_made(), 6u);
  EXPECT_EQ(f.spooled(), 600u);

  sink.down = false;
  EXPECT_EQ(f.flush_spool(), 600u);
  EXPECT_EQ(f.spooled(), 0u);
  ASSERT_EQ(sink.events.size(), 600u);
  EXPECT_EQ(sink.events[599].event_id, "e-599");
}

TEST(Forwarder, NonTransportErrorsAreNotRetried) {
  struct Rejecting : EventSink {
    std::size_t deliver(const std::vector<SecurityEvent>&) override { throw Error(ErrorCode::Validation, "bad"); }
  } sink;
  int sleeps = 0;
  Forwarder f(sink, {}, {}, [&](auto) { ++sleeps; });
  EXPECT_THROW(f.forward(events(1)), Error);
  EXPECT_EQ(sleeps, 0);
}

StackOptions stack_options(const std::filesystem::path& dir) {
  StackOptions o;
  o.data_dir = dir;
  o.templates_dir = source_dir() / "templates";
  o.feed_path = source_dir() / "fixtures" / "feed.json";
  o.manifests_dir = source_dir() / "fixtures" / "manifests";
  o.clock = std::make_shared<ManualClock>(1'700'000'000'000);
  return o;
}

TEST(Forwarder, LostAcknowledgementsDeliverExactlyOnceAfterDedup) {
  TempDir dir;
  Stack stack(stack_options(dir.path()));
  StackSink inner(stack);
  // Delivers, then pretends the response was lost for the first two calls.
  struct LossySink : EventSink {
    EventSink& inner;
    int lost = 2;
    explicit LossySink(EventSink& s) : inner(s) {}
    std::size_t deliver(const std::vector<SecurityEvent>& b) override {
      auto n = inner.deliver(b);
      if (lost-- > 0) throw Error(ErrorCode::StackUnreachable, "timeout");
      return n;
    }
  } lossy(inner);
  Forwarder f(lossy, {}, {}, [](auto) {});
  EXPECT_EQ(f.forward(events(50)), 50u);
  stack.flush();
  EXPECT_EQ(stack.metrics()["events"]["stored"], 50);
}

class AgentTest : public ::testing::Test {
 protected:
  AgentOptions options() {
    AgentOptions o;
    o.log_path = dir.path() / "access.log";
    o.data_dir = dir.path() / "agent";
    o.flush_interval = std::chrono::milliseconds(20);
    o.poll_interval = std::chrono::milliseconds(5);
    return o;
  }
  TempDir dir;
  RecordingSink sink;
};

TEST_F(AgentTest, PartialLinesWaitForTheirNewline) {
  NodeAgent agent(options(), sink);
  EXPECT_EQ(agent.poll(), 0u);  // log does not exist yet
  append(dir.path() / "access.log", "1000 10.0.0.66 POST /lo");
  EXPECT_EQ(agent.poll(), 0u);
  append(dir.path() / "access.log", "gin 401 alice pat\n1001 10.0.0.66 POST");
  EXPECT_EQ(agent.poll(), 1u);
  ASSERT_TRUE(agent.flush());
  ASSERT_EQ(sink.events.size(), 1u);
  EXPECT_EQ(*sink.events[0].attr(attr::kPath), "/login");
  append(dir.path() / "access.log", " /login 401 alice pat\n");
  EXPECT_EQ(agent.poll(), 1u);
  agent.flush();
  ASSERT_EQ(sink.events.size(), 2u);
  EXPECT_EQ(sink.events[1].event_id, "nla-1-2");
}

TEST_F(AgentTest, GarbageGoesToDeadLetterAndCountersTrackIps) {
  NodeAgent agent(options(), sink);
  const auto log = dir.path() / "access.log";
  append(log, failure_line(1) + "this is not a record\n" + failure_line(2) + failure_line(3, "10.0.0.7") +
                  "4 10.0.0.1 GET /x 600 - pat\n" + "5 10.0.0.66 GET /data 200 - pat\n");
  EXPECT_EQ(agent.poll(), 6u);
  agent.flush();
  auto m = agent.metrics();
  EXPECT_EQ(m.lines, 6u);
  EXPECT_EQ(m.parsed, 4u);
  EXPECT_EQ(m.parse_errors, 2u);
  EXPECT_EQ(m.forwarded, 4u);
  EXPECT_EQ(m.failures_by_ip, (std::map<std::string, std::uint64_t>{{"10.0.0.66", 2}, {"10.0.0.7", 1}}));
  EXPECT_EQ(read_file(agent.deadletter_path()), "this is not a record\n4 10.0.0.1 GET /x 600 - pat\n");
  EXPECT_EQ(to_json(m)["failures_by_ip"]["10.0.0.66"], 2);
  // Line numbers count every line, so ids are stable across restarts.
  EXPECT_EQ(sink.events[1].event_id, "nla-1-3");
}

TEST_F(AgentTest, BackgroundLoopFlushesWithinInterval) {
  NodeAgent agent(options(), sink);
  agent.start();
  for (int i = 0; i < 30; ++i) append(dir.path() / "access.log", failure_line(100 + i));
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(5);
  while (sink.received() < 30 && std::chrono::steady_clock::now() < deadline) {
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
  EXPECT_EQ(sink.received(), 30u);
  agent.stop();
  EXPECT_EQ(agent.metrics().forwarded, 30u);
}

TEST_F(AgentTest, StopDrainsUnflushedLines) {
  auto o = options();
  o.flush_interval = std::chrono::hours(1);
  NodeAgent agent(o, sink);
  agent.start();
  for (int i = 0; i < 7; ++i) append(dir.path() / "access.log", failure_line(i));
  agent.stop();
  EXPECT_EQ(sink.received(), 7u);
}

TEST_F(AgentTest, RestartLosesNothingAndDuplicatesAreDropped) {
  TempDir stack_dir;
  Stack stack(stack_options(stack_dir.path()));
  StackSink to_stack(stack);
  const auto log = dir.path() / "access.log";
  for (int i = 0; i < 10; ++i) append(log, failure_line(1000 + i));
  {
    NodeAgent first(options(), to_stack);
    first.poll();
    first.flush();
  }
  for (int i = 10; i < 25; ++i) append(log, failure_line(1000 + i));
  {
    NodeAgent second(options(), to_stack);
    EXPECT_EQ(second.poll(), 25u);
    EXPECT_TRUE(second.flush());
  }
  stack.flush();
  EXPECT_EQ(stack.metrics()["events"]["stored"], 25);
}

TEST_F(AgentTest, OutageSpoolsThenRecovers) {
  auto o = options();
  o.retry.attempts = 2;
  NodeAgent agent(o, sink, [](auto) {});
  sink.down = true;
  for (int i = 0; i < 5; ++i) append(dir.path() / "access.log", failure_line(i));
  agent.poll();
  EXPECT_FALSE(agent.flush());
  EXPECT_EQ(agent.metrics().delivery_failures, 1u);
  EXPECT_TRUE(std::filesystem::exists(dir.path() / "agent" / "agent-spool.jsonl"));
  sink.down = false;
  EXPECT_TRUE(agent.flush());
  EXPECT_EQ(sink.events.size(), 5u);
}

}  // namespace
}  // namespace warden

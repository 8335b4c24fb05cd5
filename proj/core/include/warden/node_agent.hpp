#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "warden/event.hpp"

namespace warden {

class Stack;

// One access-log line: `<epoch_ms> <client_ip> <METHOD> <path> <status> <user|-> <namespace>`.
struct AccessRecord {
  TimestampMs ts = 0;
  std::string client_ip;
  std::string method;
  std::string path;
  int status_code = 0;
  std::optional<std::string> user;
  std::string ns;

  bool operator==(const AccessRecord&) const = default;
};

// Throws Error{Parse}.
AccessRecord parse_access_record(std::string_view line);
std::string format_access_record(const AccessRecord& r);

struct AgentIdentity {
  std::string agent_id = "nla-1";
  std::string node_name = "node-a";
};

// POST /login 401 -> auth_failure, POST /login 200 -> auth_success, anything
// else -> http_request. The event id `<agent_id>-<line_no>` is stable across
// agent restarts, so re-sent lines are deduplicated by the broker.
SecurityEvent normalize(const AccessRecord& r, const AgentIdentity& id, std::uint64_t line_no);

// Destination for event batches. deliver() returns the number of events the
// broker acknowledged (accepted or already known) and throws on failure.
class EventSink {
 public:
  virtual ~EventSink() = default;
  virtual std::size_t deliver(const std::vector<SecurityEvent>& batch) = 0;
};

// POSTs to `<base_url>/v1/events`. Transport errors and 5xx raise StackUnreachable.
// With `wait`, each call returns once the stack has evaluated the batch.
class HttpSink final : public EventSink {
 public:
  HttpSink(std::string base_url, std::string token = {}, bool wait = false);
  std::size_t deliver(const std::vector<SecurityEvent>& batch) override;

 private:
  std::string base_url_;
  std::string token_;
  bool wait_ = false;
};

// Same ingestion path as the HTTP endpoint, without the transport.
class StackSink final : public EventSink {
 public:
  explicit StackSink(Stack& stack) : stack_(stack) {}
  std::size_t deliver(const std::vector<SecurityEvent>& batch) override;

 private:
  Stack& stack_;
};

struct RetryPolicy {
  std::chrono::milliseconds base{200};
  std::chrono::milliseconds cap{5'000};
  int attempts = 6;

  // Delay before retry number `retry` (1-based): base * 2^(retry-1), capped.
  std::chrono::milliseconds delay(int retry) const;
};

inline constexpr std::size_t kMaxForwardBatch = 500;

// At-least-once delivery with exponential backoff. Batches that exhaust every
// attempt are appended to the spool file and retried by flush_spool().
class Forwarder {
 public:
  using Sleep = std::function<void(std::chrono::milliseconds)>;

  Forwarder(EventSink& sink, RetryPolicy policy = {}, std::filesystem::path spool_path = {}, Sleep sleep = {});

  // Splits batches above kMaxForwardBatch. Returns acknowledged events; throws
  // DeliveryExhausted after spooling whatever could not be delivered.
  std::size_t forward(const std::vector<SecurityEvent>& batch);
  // Re-sends spooled events; returns how many were acknowledged.
  std::size_t flush_spool();
  std::size_t spooled() const;
  std::uint64_t attempts_made() const { return attempts_; }

 private:
  std::size_t deliver_with_retry(const std::vector<SecurityEvent>& chunk);
  void spool(const std::vector<SecurityEvent>& chunk);

  EventSink& sink_;
  RetryPolicy policy_;
  std::filesystem::path spool_path_;
  Sleep sleep_;
  mutable std::mutex spool_mutex_;
  std::vector<SecurityEvent> memory_spool_;  // used when no spool path is set
  std::atomic<std::uint64_t> attempts_{0};
};

struct AgentOptions {
  AgentIdentity identity;
  std::filesystem::path log_path;
  std::filesystem::path data_dir;  // dead-letter and spool files
  std::chrono::milliseconds flush_interval{100};
  std::size_t max_batch = 100;
  std::chrono::milliseconds poll_interval{10};
  RetryPolicy retry;
};

struct AgentMetrics {
  std::uint64_t lines = 0;
  std::uint64_t parsed = 0;
  std::uint64_t parse_errors = 0;
  std::uint64_t forwarded = 0;
  std::uint64_t delivery_failures = 0;
  std::map<std::string, std::uint64_t> failures_by_ip;  // local auth-failure counter
};

nlohmann::json to_json(const AgentMetrics& m);

// Tails one access log and forwards normalized events in batches of at most
// max_batch, flushed at least every flush_interval.
class NodeAgent {
 public:
  NodeAgent(AgentOptions options, EventSink& sink, Forwarder::Sleep sleep = {});
  ~NodeAgent();
  NodeAgent(const NodeAgent&) = delete;
  NodeAgent& operator=(const NodeAgent&) = delete;

  void start();
  // Drains what has been written so far, then stops the background thread.
  void stop();

  // Reads newly appended complete lines; returns how many were read.
  std::size_t poll();
  // Forwards buffered events now. Returns false if delivery was exhausted.
  bool flush();

  AgentMetrics metrics() const;
  std::filesystem::path deadletter_path() const;

 private:
  void loop();

  AgentOptions options_;
  Forwarder forwarder_;
  std::mutex mutex_;  // guards the tail state and buffer
  std::uint64_t offset_ = 0;
  std::uint64_t line_no_ = 0;
  std::string partial_;
  std::vector<SecurityEvent> buffer_;
  std::chrono::steady_clock::time_point first_buffered_{};
  mutable std::mutex metrics_mutex_;
  AgentMetrics metrics_;
  std::atomic<bool> running_{false};
  std::mutex wake_mutex_;
  std::condition_variable wake_;
  std::thread thread_;
};

}  // namespace warden

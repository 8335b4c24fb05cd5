#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "warden/event.hpp"

namespace warden {

struct EventFilter {
  std::vector<EventKind> kinds;       // empty: any kind
  std::vector<std::string> namespaces;  // empty: any namespace

  bool matches(const SecurityEvent& e) const;
};

struct PublishResult {
  std::uint64_t seq = 0;
  bool duplicate = false;  // event_id already persisted; nothing appended
};

struct BrokerOptions {
  std::size_t max_pending_per_subscriber = 10'000;
  std::chrono::milliseconds backpressure_timeout{5'000};
};

class Broker;

// Handle for one subscription. Each subscription consumes on its own thread;
// destroying the handle cancels delivery.
class Subscription {
 public:
  ~Subscription();
  Subscription(const Subscription&) = delete;
  Subscription& operator=(const Subscription&) = delete;

  std::uint64_t id() const { return id_; }
  // Blocks until every event enqueued so far has been handed to the callback.
  void wait_idle() const;
  std::size_t delivered() const;

 private:
  friend class Broker;
  struct State;
  Subscription(Broker* broker, std::uint64_t id, std::shared_ptr<State> state);

  Broker* broker_;
  std::uint64_t id_;
  std::shared_ptr<State> state_;
};

// In-process context broker: validates and sequences events, appends them to
// `<data_dir>/events.jsonl`, and fans them out to subscribers in seq order.
class Broker {
 public:
  using Callback = std::function<void(const SecurityEvent&)>;

  // An empty data_dir keeps the log in memory only.
  explicit Broker(std::filesystem::path data_dir = {}, BrokerOptions options = {});
  ~Broker();
  Broker(const Broker&) = delete;
  Broker& operator=(const Broker&) = delete;

  // Throws Error{Validation} or Error{Storage}. Events whose event_id was
  // already accepted are reported as duplicates and not re-delivered.
  PublishResult publish(SecurityEvent event);

  std::unique_ptr<Subscription> subscribe(EventFilter filter, Callback callback);

  // Events with seq in [from_seq, to_seq]; to_seq past the end is clamped.
  std::vector<SecurityEvent> replay(std::uint64_t from_seq, std::uint64_t to_seq) const;

  std::uint64_t last_seq() const;
  std::size_t size() const;
  // Waits until all current subscribers have drained their queues.
  void flush() const;

  const std::filesystem::path& log_path() const { return log_path_; }

 private:
  friend class Subscription;
  void unsubscribe(std::uint64_t id);
  void load_log();

  BrokerOptions options_;
  std::filesystem::path log_path_;
  std::ofstream log_;

  mutable std::mutex mutex_;
  std::uint64_t last_seq_ = 0;
  std::vector<SecurityEvent> events_;
  std::unordered_map<std::string, std::uint64_t> seq_by_event_id_;

  std::uint64_t next_subscription_id_ = 1;
  std::unordered_map<std::uint64_t, std::shared_ptr<Subscription::State>> subscribers_;
};

}  // namespace warden

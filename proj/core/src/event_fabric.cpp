#include "warden/event_fabric.hpp"

#include <algorithm>

namespace warden {

bool EventFilter::matches(const SecurityEvent& e) const {
  if (!kinds.empty() && std::find(kinds.begin(), kinds.end(), e.kind) == kinds.end()) return false;
  if (!namespaces.empty() &&
      std::find(namespaces.begin(), namespaces.end(), e.source.ns) == namespaces.end()) {
    return false;
  }
  return true;
}

struct Subscription::State {
  EventFilter filter;
  Broker::Callback callback;

  mutable std::mutex mutex;
  mutable std::condition_variable cv;  // signalled on enqueue, dequeue and idle
  std::deque<SecurityEvent> queue;
  bool in_flight = false;
  bool stopping = false;
  std::size_t delivered = 0;
  std::thread worker;

  void run() {
    std::unique_lock lock(mutex);
    for (;;) {
      cv.wait(lock, [&] { return stopping || !queue.empty(); });
      if (stopping) return;
      SecurityEvent next = std::move(queue.front());
      queue.pop_front();
      in_flight = true;
      cv.notify_all();
      lock.unlock();
      try {
        callback(next);
      } catch (...) {
        // A failing consumer must not take the broker down with it.
      }
      lock.lock();
      in_flight = false;
      ++delivered;
      cv.notify_all();
    }
  }
};

Subscription::Subscription(Broker* broker, std::uint64_t id, std::shared_ptr<State> state)
    : broker_(broker), id_(id), state_(std::move(state)) {}

Subscription::~Subscription() {
  broker_->unsubscribe(id_);
  {
    std::lock_guard lock(state_->mutex);
    state_->stopping = true;
  }
  state_->cv.notify_all();
  if (state_->worker.joinable()) state_->worker.join();
}

void Subscription::wait_idle() const {
  std::unique_lock lock(state_->mutex);
  state_->cv.wait(lock, [&] { return state_->stopping || (state_->queue.empty() && !state_->in_flight); });
}

std::size_t Subscription::delivered() const {
  std::lock_guard lock(state_->mutex);
  return state_->delivered;
}

Broker::Broker(std::filesystem::path data_dir, BrokerOptions options) : options_(options) {
  if (data_dir.empty()) return;
  std::error_code ec;
  std::filesystem::create_directories(data_dir, ec);
  log_path_ = data_dir / "events.jsonl";
  load_log();
  log_.open(log_path_, std::ios::app);
  if (!log_) throw Error(ErrorCode::Storage, "cannot open event log " + log_path_.string());
}

Broker::~Broker() = default;

void Broker::load_log() {
  std::ifstream in(log_path_);
  if (!in) return;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) {
      // A torn final line from a crash is tolerated; anything else is corruption.
      if (in.peek() == std::char_traits<char>::eof()) break;
      throw Error(ErrorCode::Storage, "corrupt event log line " + std::to_string(line_no));
    }
    SecurityEvent e = event_from_json(j);
    if (e.seq != last_seq_ + 1) {
      throw Error(ErrorCode::Storage, "event log seq gap at line " + std::to_string(line_no));
    }
    last_seq_ = e.seq;
    seq_by_event_id_.emplace(e.event_id, e.seq);
    events_.push_back(std::move(e));
  }
}

PublishResult Broker::publish(SecurityEvent event) {
  event.seq = 0;
  if (auto errors = validate_event(event); !errors.empty()) {
    std::string message = "invalid event";
    for (const auto& e : errors) message += "; " + e.path + ": " + e.message;
    throw Error(ErrorCode::Validation, message, std::move(errors));
  }

  std::unique_lock lock(mutex_);
  if (auto it = seq_by_event_id_.find(event.event_id); it != seq_by_event_id_.end()) {
    return {it->second, true};
  }

  // Backpressure: hold the sequencer until every matching subscriber has room.
  const auto deadline = std::chrono::steady_clock::now() + options_.backpressure_timeout;
  for (auto& [id, state] : subscribers_) {
    if (!state->filter.matches(event)) continue;
    std::unique_lock sub_lock(state->mutex);
    if (!state->cv.wait_until(sub_lock, deadline, [&] {
          return state->stopping || state->queue.size() < options_.max_pending_per_subscriber;
        })) {
      throw Error(ErrorCode::Storage, "subscriber backlog exceeded; publish timed out");
    }
  }

  event.seq = last_seq_ + 1;
  if (log_.is_open()) {
    log_ << nlohmann::json(event).dump() << '\n';
    log_.flush();
    if (!log_) {
      log_.clear();
      throw Error(ErrorCode::Storage, "event log write failed");
    }
  }
  last_seq_ = event.seq;
  seq_by_event_id_.emplace(event.event_id, event.seq);
  events_.push_back(event);

  for (auto& [id, state] : subscribers_) {
    if (!state->filter.matches(event)) continue;
    {
      std::lock_guard sub_lock(state->mutex);
      state->queue.push_back(event);
    }
    state->cv.notify_all();
  }
  return {event.seq, false};
}

std::unique_ptr<Subscription> Broker::subscribe(EventFilter filter, Callback callback) {
  auto state = std::make_shared<Subscription::State>();
  state->filter = std::move(filter);
  state->callback = std::move(callback);
  state->worker = std::thread([raw = state.get()] { raw->run(); });
  std::lock_guard lock(mutex_);
  const auto id = next_subscription_id_++;
  subscribers_.emplace(id, state);
  return std::unique_ptr<Subscription>(new Subscription(this, id, std::move(state)));
}

void Broker::unsubscribe(std::uint64_t id) {
  std::lock_guard lock(mutex_);
  subscribers_.erase(id);
}

std::vector<SecurityEvent> Broker::replay(std::uint64_t from_seq, std::uint64_t to_seq) const {
  if (from_seq < 1) throw Error(ErrorCode::Range, "from_seq must be >= 1");
  if (from_seq > to_seq) throw Error(ErrorCode::Range, "from_seq must not exceed to_seq");
  std::lock_guard lock(mutex_);
  std::vector<SecurityEvent> out;
  const auto last = std::min<std::uint64_t>(to_seq, last_seq_);
  for (auto seq = from_seq; seq <= last; ++seq) out.push_back(events_[seq - 1]);
  return out;
}

std::uint64_t Broker::last_seq() const {
  std::lock_guard lock(mutex_);
  return last_seq_;
}

std::size_t Broker::size() const {
  std::lock_guard lock(mutex_);
  return events_.size();
}

void Broker::flush() const {
  std::vector<std::shared_ptr<Subscription::State>> states;
  {
    std::lock_guard lock(mutex_);
    for (const auto& [id, state] : subscribers_) states.push_back(state);
  }
  for (const auto& state : states) {
    std::unique_lock lock(state->mutex);
    state->cv.wait(lock, [&] { return state->stopping || (state->queue.empty() && !state->in_flight); });
  }
}

}  // namespace warden

#pragma once

#include <atomic>
#include <cstdint>
#include <memory>

namespace warden {

// Milliseconds since the Unix epoch, UTC.
using TimestampMs = std::int64_t;

class Clock {
 public:
  virtual ~Clock() = default;
  virtual TimestampMs now_ms() const = 0;
};

class SystemClock final : public Clock {
 public:
  TimestampMs now_ms() const override;
};

// Manually driven clock shared by the target, the agents and the runtime so
// window semantics can be exercised without real-time waits.
class ManualClock final : public Clock {
 public:
  explicit ManualClock(TimestampMs start = 0) : now_(start) {}

  TimestampMs now_ms() const override { return now_.load(); }
  void set(TimestampMs t) { now_.store(t); }
  void advance(TimestampMs delta) { now_.fetch_add(delta); }

 private:
  std::atomic<TimestampMs> now_;
};

std::shared_ptr<Clock> system_clock();

}  // namespace warden

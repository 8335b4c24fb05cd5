#pragma once

#include <atomic>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include "warden/event_fabric.hpp"
#include "warden/incident.hpp"
#include "warden/mitigation.hpp"
#include "warden/policy.hpp"

namespace warden {

struct DetectionOptions {
  // Alert-storm suppression after a (policy, group) fires.
  bool suppression = true;
  // Events older than the newest seen ts minus this bound are dropped.
  TimestampMs lateness_ms = 5'000;
};

struct DetectionMetrics {
  std::uint64_t events_evaluated = 0;
  std::uint64_t matches = 0;
  std::uint64_t suppressed = 0;
  std::uint64_t dropped_malformed = 0;
  std::uint64_t skipped_no_group = 0;
  std::uint64_t late_dropped = 0;
  std::uint64_t incidents = 0;
};

nlohmann::json to_json(const DetectionMetrics& m);

// Evaluates deployed runtime policies over the event stream with per-group
// sliding windows over event time: an event at ts counts toward the window
// (ts - W, ts] of every later evaluation.
class DetectionRuntime {
 public:
  using PolicyLookup = std::function<std::optional<PolicyInstance>(const std::string& policy_id)>;

  DetectionRuntime(Enactor& enactor, IncidentStore& incidents, Blocklist& blocklist, std::shared_ptr<Clock> clock,
                   DetectionOptions options = {});
  ~DetectionRuntime();
  DetectionRuntime(const DetectionRuntime&) = delete;
  DetectionRuntime& operator=(const DetectionRuntime&) = delete;

  // Starts evaluating `instance` with empty window state. With a broker, the
  // runtime subscribes to the policy's events and turns matches into
  // incidents on the subscription's thread. Throws NotRuntimeRule or
  // AlreadyDeployed. Returns the deployed (enabled) instance.
  PolicyInstance deploy(PolicyInstance instance, Broker* broker = nullptr);
  void undeploy(const std::string& policy_id);
  bool is_deployed(const std::string& policy_id) const;
  std::vector<PolicyInstance> deployed() const;

  // Resolves policies that are not deployed here (report policies) for on_match.
  void set_policy_lookup(PolicyLookup lookup);

  // Evaluates one event against every deployed policy in scope.
  std::vector<RuleMatch> ingest(const SecurityEvent& event);
  // Persists an incident and dispatches each policy action before returning.
  Incident on_match(const RuleMatch& match);
  // ingest followed by on_match for every match.
  std::vector<Incident> process(const SecurityEvent& event);

  // Events in the first window condition's window (at_ts - W, at_ts] for the
  // group. Throws UnknownPolicy.
  std::int64_t window_count(const std::string& policy_id, const std::string& group_key, TimestampMs at_ts) const;

  DetectionMetrics metrics() const;

 private:
  struct Deployment;

  std::vector<RuleMatch> evaluate(Deployment& d, const SecurityEvent& event);
  std::shared_ptr<Deployment> find(const std::string& policy_id) const;
  std::optional<PolicyInstance> policy(const std::string& policy_id) const;

  Enactor& enactor_;
  IncidentStore& incidents_;
  Blocklist& blocklist_;
  std::shared_ptr<Clock> clock_;
  DetectionOptions options_;

  mutable std::shared_mutex mutex_;
  std::map<std::string, std::shared_ptr<Deployment>> deployments_;
  PolicyLookup lookup_;

  struct Counters {
    std::atomic<std::uint64_t> events_evaluated{0}, matches{0}, suppressed{0}, dropped_malformed{0},
        skipped_no_group{0}, late_dropped{0}, incidents{0};
  };
  mutable Counters counters_;
};

}  // namespace warden

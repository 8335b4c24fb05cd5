#pragma once

#include <atomic>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "warden/clock.hpp"
#include "warden/detection.hpp"
#include "warden/event_fabric.hpp"
#include "warden/incident.hpp"
#include "warden/mitigation.hpp"
#include "warden/policy.hpp"
#include "warden/registry.hpp"
#include "warden/vuln_scanner.hpp"

namespace warden {

struct StackOptions {
  std::filesystem::path data_dir;  // empty keeps every store in memory
  std::filesystem::path templates_dir;
  std::filesystem::path feed_path;
  std::filesystem::path manifests_dir;
  std::shared_ptr<Clock> clock = system_clock();
  DetectionOptions detection;
  BrokerOptions broker;
};

inline constexpr std::size_t kMaxEventBatch = 500;

struct OnboardResult {
  PolicyInstance policy;
  std::optional<std::string> scan_id;     // vulnerability policies trigger a scan
  std::optional<std::string> scan_error;  // e.g. CoverageError
};

struct IngestResult {
  std::size_t accepted = 0;
  std::size_t duplicates = 0;
  std::vector<std::pair<std::size_t, std::vector<FieldError>>> rejected;  // batch index -> errors
};

nlohmann::json to_json(const IngestResult& r);

// The whole stack wired together: broker, detection, mitigation, scanning and
// the registries. Every gateway endpoint maps onto one member function.
class Stack {
 public:
  explicit Stack(StackOptions options);
  ~Stack();
  Stack(const Stack&) = delete;
  Stack& operator=(const Stack&) = delete;

  InfrastructureNode register_node(const nlohmann::json& descriptor);
  std::vector<InfrastructureNode> nodes() const;

  // Accepts either {template_id, bindings, scope} or a full instance document.
  // Throws Validation/Schema/Binding/UnknownTemplate/UnknownNamespace/Duplicate.
  OnboardResult onboard_policy(const nlohmann::json& document);
  std::vector<PolicyInstance> policies() const;
  std::optional<PolicyInstance> policy(const std::string& policy_id) const;
  PolicyInstance remove_policy(const std::string& policy_id);
  std::vector<PolicyTemplate> templates(std::string_view query = {}, const std::vector<std::string>& tags = {}) const;

  // Accepts a JSON array (or {"events": [...]}) of at most kMaxEventBatch events.
  IngestResult ingest_events(const nlohmann::json& batch);
  PublishResult publish(SecurityEvent event);

  IncidentPage incidents(const IncidentFilter& filter, std::size_t limit = 50,
                         const std::optional<std::string>& cursor = std::nullopt) const;
  std::optional<Incident> incident(const std::string& incident_id) const;
  Incident set_incident_status(const std::string& incident_id, IncidentStatus status);
  std::vector<AlertRow> alerts() const;

  // Scope: namespaces to scan; empty scans every registered namespace.
  std::string trigger_scan(std::vector<std::string> scope);
  std::optional<ScanRecord> scan(const std::string& scan_id) const;
  bool wait_scan(const std::string& scan_id, std::chrono::milliseconds timeout) const;

  std::vector<BlockEntry> blocklist() const;
  bool is_blocked(std::string_view ip) const;
  EnactmentRecord unblock(std::string_view ip, const std::string& operator_name);
  void set_enforcement_hook(std::shared_ptr<EnforcementHook> hook);

  nlohmann::json metrics() const;
  // Waits until every published event has been evaluated.
  void flush() const;

  const Clock& clock() const { return *options_.clock; }
  const StackOptions& options() const { return options_; }

 private:
  void deploy(const PolicyInstance& p);
  void on_scan_complete(const VulnReport& report);
  PolicyInstance build_instance(const nlohmann::json& document) const;

  StackOptions options_;
  Broker broker_;
  IncidentStore incidents_;
  Blocklist blocklist_;
  Enactor enactor_;
  DetectionRuntime runtime_;
  InfrastructureRegistry registry_;
  PolicyStore policies_;
  TemplateCatalog catalog_;
  std::shared_ptr<const VulnDatabase> feed_;
  std::atomic<std::uint64_t> events_rejected_{0};
  // Declared last: scan workers call back into the members above.
  ScanService scans_;
};

// Normalized detection outcome of a replay; identifiers assigned at runtime
// (incident and record ids, report paths) are left out.
struct ReplayState {
  std::size_t events = 0;
  nlohmann::json incidents = nlohmann::json::array();
  nlohmann::json blocklist = nlohmann::json::array();

  bool operator==(const ReplayState&) const = default;
};

// Re-evaluates `<source_dir>/events.jsonl` in seq order against the runtime
// policies in `<source_dir>/policies.json`, on a fresh in-memory stack whose
// clock follows event time.
ReplayState replay_log(const std::filesystem::path& source_dir, const DetectionOptions& options = {});

}  // namespace warden

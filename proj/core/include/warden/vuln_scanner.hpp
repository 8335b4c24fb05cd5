#pragma once

#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "warden/clock.hpp"
#include "warden/incident.hpp"
#include "warden/policy.hpp"
#include "warden/rule.hpp"

namespace warden {

// Dot-separated non-negative integers, e.g. "1.2.3".
struct Version {
  std::vector<std::uint64_t> parts;
};

std::optional<Version> parse_version(std::string_view text);
// Left-to-right numeric comparison, the shorter side padded with zeros.
int compare_versions(const Version& a, const Version& b);
int compare_versions(std::string_view a, std::string_view b);

struct PackageRef {
  std::string name;
  std::string version;

  bool operator==(const PackageRef&) const = default;
};

struct ComponentManifest {
  std::string component;
  std::string ns;
  std::vector<PackageRef> packages;

  bool operator==(const ComponentManifest&) const = default;
};

ComponentManifest manifest_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ComponentManifest& m);
// Reads every `*.manifest.json` under `dir`, sorted by file name.
std::vector<ComponentManifest> load_manifests(const std::filesystem::path& dir);

struct VulnEntry {
  std::string package;
  std::string lo;  // inclusive; equal to hi for an exact version
  std::string hi;
  std::string advisory_id;
  double score = 0.0;
  std::optional<Severity> severity;

  bool affects(std::string_view version) const;
  bool operator==(const VulnEntry&) const = default;
};

// Immutable after construction.
class VulnDatabase {
 public:
  VulnDatabase() = default;
  explicit VulnDatabase(std::vector<VulnEntry> entries);

  const std::vector<VulnEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::vector<const VulnEntry*> for_package(const std::string& package) const;

 private:
  std::vector<VulnEntry> entries_;
  std::map<std::string, std::vector<std::size_t>> by_package_;
};

// Throws SchemaError or DuplicateEntry.
VulnDatabase parse_feed(const nlohmann::json& j);
VulnDatabase load_feed(const std::filesystem::path& path);

// CVSS v3 bands. Throws RangeError outside [0, 10].
Severity severity_from_score(double score);

struct VulnFinding {
  std::string finding_id;  // <ns>/<component>/<package>@<version>/<advisory>
  std::string component;
  std::string ns;
  std::string advisory_id;
  std::string package;
  std::string version;
  Severity severity = Severity::None;
  double score = 0.0;

  bool operator==(const VulnFinding&) const = default;
};

struct ComponentRef {
  std::string component;
  std::string ns;

  auto operator<=>(const ComponentRef&) const = default;
};

struct VulnReport {
  std::string scan_id;
  TimestampMs started_ts = 0;
  TimestampMs finished_ts = 0;
  std::vector<std::string> scope;  // namespaces; empty means every namespace
  std::vector<VulnFinding> findings;
  std::vector<ComponentRef> components_scanned;
  std::map<std::string, std::int64_t> component_duration_ms;  // keyed "<ns>/<component>"
  std::int64_t duration_ms = 0;

  bool in_scope(const std::string& ns) const;
  bool operator==(const VulnReport&) const = default;
};

nlohmann::json to_json(const VulnFinding& f);
VulnFinding finding_from_json(const nlohmann::json& j);
nlohmann::json to_json(const VulnReport& r);
VulnReport report_from_json(const nlohmann::json& j);

struct ScanRequest {
  std::string scan_id;
  std::vector<std::string> scope;
  std::vector<ComponentManifest> manifests;
  std::vector<ComponentRef> registered;  // components that must be covered
};

// Matches every in-scope manifest against the feed. Throws CoverageError when
// a registered in-scope component has no manifest.
VulnReport scan(const ScanRequest& request, const VulnDatabase& db, const Clock& clock);

// Evaluates a report-only rule over the report's findings (filtered by the
// policy scope). Throws ScopeMismatch or NotRuntimeRule-style SemanticError.
std::optional<RuleMatch> match_report(const VulnReport& report, const PolicyInstance& policy);

enum class ScanStatus { Running, Completed, Failed };
std::string_view to_string(ScanStatus s);

struct ScanRecord {
  std::string scan_id;
  ScanStatus status = ScanStatus::Running;
  std::vector<std::string> scope;
  TimestampMs requested_ts = 0;
  std::optional<VulnReport> report;
  std::optional<std::string> error;
};

nlohmann::json to_json(const ScanRecord& r);

// Runs scans on background threads and persists reports to
// `<data_dir>/scans/<scan_id>.json`.
class ScanService {
 public:
  using Completion = std::function<void(const VulnReport&)>;

  ScanService(std::shared_ptr<const VulnDatabase> db, std::shared_ptr<Clock> clock, std::filesystem::path data_dir = {});
  ~ScanService();
  ScanService(const ScanService&) = delete;
  ScanService& operator=(const ScanService&) = delete;

  // Validation (coverage included) happens synchronously; matching runs in
  // the background. Returns the scan id.
  std::string start(std::vector<std::string> scope, std::vector<ComponentManifest> manifests,
                    std::vector<ComponentRef> registered, Completion on_complete = {});
  std::optional<ScanRecord> get(const std::string& scan_id) const;
  // Blocks until the scan leaves Running. False on timeout or unknown id.
  bool wait(const std::string& scan_id, std::chrono::milliseconds timeout) const;
  std::vector<ScanRecord> list() const;

 private:
  void persist(const ScanRecord& record) const;

  std::shared_ptr<const VulnDatabase> db_;
  std::shared_ptr<Clock> clock_;
  std::filesystem::path scans_dir_;
  mutable std::mutex mutex_;
  mutable std::condition_variable changed_;
  std::map<std::string, ScanRecord> records_;
  std::uint64_t next_id_ = 1;
  std::vector<std::thread> workers_;
};

}  // namespace warden

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "warden/node_agent.hpp"

namespace warden {

// Background traffic from well-behaved clients.
struct BenignProfile {
  double rate = 10;        // requests per second over all clients
  int ips = 5;
  double duration_s = 10;
  int failures_per_ip = 0;  // wrong passwords allowed per client per minute
};

struct ScenarioSpec {
  std::string name = "scenario";
  std::string ns = "pat";
  std::string attacker_ip = "203.0.113.66";
  int attempts = 15;
  double rate = 2.0;  // attempts per second
  std::optional<BenignProfile> benign;
  std::vector<nlohmann::json> policies;  // onboarding documents
  nlohmann::json nodes = nlohmann::json::array();
  int post_block_requests = 0;
  int runs = 1;
  bool scan = false;
  bool wall_clock = false;
  std::uint64_t seed = 1;
};

// `policies` and `nodes` entries may be file names, resolved against base_dir.
// Throws Validation when attempts < 1, rate <= 0 or the benign profile is invalid.
ScenarioSpec scenario_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
nlohmann::json to_json(const ScenarioSpec& s);

// Everything one scenario run leaves behind, as persisted in its directory
// (run.json + access.log).
struct RunRecord {
  int index = 0;
  std::string ns;
  std::string attacker_ip;
  int attempts = 0;
  std::vector<std::string> benign_ips;
  bool wall_clock = false;
  std::vector<AccessRecord> access_log;
  nlohmann::json nodes = nlohmann::json::array();
  nlohmann::json policies = nlohmann::json::array();
  nlohmann::json incidents = nlohmann::json::array();
  nlohmann::json blocklist = nlohmann::json::array();
  nlohmann::json scans = nlohmann::json::object();  // scan_id -> scan record
  std::optional<std::string> probed_scan;           // scan run while probing the target
  std::uint64_t probe_requests = 0;
  std::uint64_t probe_errors = 0;
};

void save_run(const RunRecord& r, const std::filesystem::path& dir);
RunRecord load_run(const std::filesystem::path& dir);

struct KpiReport {
  std::size_t runs = 0;
  std::size_t attacks_expected = 0;  // runs whose attacker crosses the rule
  std::size_t attacks_detected = 0;
  std::optional<double> detection_rate;
  std::size_t false_positive_count = 0;  // incidents for clients that never crossed the rule
  std::size_t post_block_requests = 0;
  std::size_t post_block_rejected = 0;
  std::optional<double> block_rate;
  std::size_t attack_attempts = 0;
  std::size_t attack_attempts_denied = 0;
  std::size_t benign_requests = 0;
  std::size_t benign_rejected = 0;  // 403 answers to benign clients
  std::vector<std::int64_t> time_to_alert_ms;  // crossing log line -> incident created
  std::vector<std::int64_t> time_to_block_ms;  // crossing log line -> block enacted
  std::optional<double> time_to_alert_p95_ms;
  std::optional<double> time_to_block_p95_ms;
  std::optional<double> asset_coverage;
  std::map<std::string, std::int64_t> scan_duration_ms;  // "<ns>/<component>"
  std::optional<std::int64_t> vuln_alert_ms;               // scan finished -> vulnerability incident
  std::optional<double> scan_probe_error_rate;
  std::size_t incidents = 0;
};

// Nearest-rank percentile; nullopt for an empty sample.
std::optional<double> percentile(std::vector<double> values, double p);

// Pure function of the persisted runs.
KpiReport measure_kpis(const std::vector<RunRecord>& runs);
nlohmann::json to_json(const KpiReport& k);
// Human-readable table, one row per KPI with its measured value.
std::string kpi_table(const KpiReport& k);

struct DemoPaths {
  std::filesystem::path templates_dir;
  std::filesystem::path feed_path;
  std::filesystem::path manifests_dir;
};

struct BenignStats {
  std::uint64_t requests = 0;
  std::uint64_t ok = 0;
  std::uint64_t rejected = 0;  // 403
  std::uint64_t denied = 0;    // 401
  std::uint64_t errors = 0;    // transport failures and 5xx
};

class StackClient;
class TargetService;

// One stack + gateway + target + agent, wired over HTTP. In virtual mode a
// manual clock drives the stack and the target, and every request is pumped
// through the agent before the next one, so runs are deterministic.
class DemoEnvironment {
 public:
  DemoEnvironment(const ScenarioSpec& spec, const DemoPaths& paths, std::filesystem::path dir, int index = 0);
  ~DemoEnvironment();
  DemoEnvironment(const DemoEnvironment&) = delete;
  DemoEnvironment& operator=(const DemoEnvironment&) = delete;

  // Registers the scenario nodes and onboards its policies.
  void setup();
  // Failed logins from the attacker at the scenario rate, with the benign
  // profile running alongside when one is set. Returns the attacker's statuses.
  std::vector<int> run_bruteforce();
  BenignStats run_benign(const BenignProfile& profile);
  // Waits (wall mode) until the attacker is blocked, then sends `n` requests
  // from it while benign clients keep working. Returns {rejected, benign stats}.
  std::pair<std::size_t, BenignStats> run_post_block(int n);
  // Triggers a scan over every registered namespace while probing the target.
  nlohmann::json run_scan();
  // Drains the agent and snapshots the stack through the API.
  RunRecord collect();

  StackClient& api();
  TargetService& target();
  std::string gateway_url() const;
  const std::vector<std::string>& benign_ips() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Each run gets a fresh stack, gateway, target and agent under
// `out_dir/run-<n>`, all talking HTTP. Returns the records in run order.
std::vector<RunRecord> run_scenario(const ScenarioSpec& spec, const DemoPaths& paths,
                                    const std::filesystem::path& out_dir);

// run_scenario + measure_kpis, writing out_dir/kpi-report.json.
KpiReport run_and_measure(const ScenarioSpec& spec, const DemoPaths& paths, const std::filesystem::path& out_dir);

}  // namespace warden

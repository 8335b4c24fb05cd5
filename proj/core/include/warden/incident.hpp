#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "warden/clock.hpp"
#include "warden/error.hpp"

namespace warden {

// A rule firing: which policy, for which group key, and the evidence that
// satisfied it (event ids for runtime rules, finding ids for report rules).
struct RuleMatch {
  std::string policy_id;
  std::string group_key;
  TimestampMs matched_at = 0;
  std::vector<std::string> evidence;
  nlohmann::json condition_snapshot;
  std::string ns;

  bool operator==(const RuleMatch&) const = default;
};

enum class Outcome { Applied, Failed };

struct EnactmentRecord {
  std::string record_id;
  std::string incident_id;
  std::string action;  // alert | block_ip | report | unblock
  Outcome outcome = Outcome::Applied;
  std::string detail;
  TimestampMs ts = 0;
  std::optional<ErrorCode> error;
  std::string target;    // blocked/unblocked ip, report path, ...
  std::string operator_;  // unblock only

  bool operator==(const EnactmentRecord&) const = default;
};

enum class IncidentStatus { Open, Acknowledged, Closed };

std::string_view to_string(IncidentStatus s);
std::optional<IncidentStatus> parse_incident_status(std::string_view text);

struct Incident {
  std::string incident_id;
  std::string policy_id;
  TimestampMs created_ts = 0;
  RuleMatch match;
  std::vector<EnactmentRecord> actions_taken;
  IncidentStatus status = IncidentStatus::Open;
  std::string ns;
  std::vector<std::string> errors;  // e.g. "EnactmentError: ..."

  // IPs blocked by this incident's enactments.
  std::vector<std::string> blocked_ips() const;
  bool operator==(const Incident&) const = default;
};

struct AlertRow {
  std::string alert_id;
  std::string incident_id;
  std::string policy_id;
  std::string ns;
  std::string group_key;
  TimestampMs ts = 0;
  std::string message;
};

nlohmann::json to_json(const RuleMatch& m);
RuleMatch match_from_json(const nlohmann::json& j);
nlohmann::json to_json(const EnactmentRecord& r);
EnactmentRecord record_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Incident& i);
Incident incident_from_json(const nlohmann::json& j);
nlohmann::json to_json(const AlertRow& a);

struct IncidentFilter {
  std::optional<std::string> ns;
  std::optional<TimestampMs> since_ts;  // created_ts >= since_ts
  std::optional<IncidentStatus> status;
};

struct IncidentPage {
  std::vector<Incident> items;
  std::optional<std::string> next_cursor;
};

// Append-oriented incident store: every mutation appends the incident's full
// snapshot to `<data_dir>/incidents.jsonl`; the latest snapshot wins on load.
class IncidentStore {
 public:
  explicit IncidentStore(std::filesystem::path data_dir = {});

  Incident create(RuleMatch match, TimestampMs created_ts);
  void update(const Incident& incident);
  std::optional<Incident> get(const std::string& incident_id) const;
  // Only open -> acknowledged -> closed. Throws NotFound or InvalidTransition.
  Incident set_status(const std::string& incident_id, IncidentStatus next);

  // Reverse-chronological (created_ts, then id). The cursor is opaque.
  IncidentPage list(const IncidentFilter& filter, std::size_t limit = 50,
                    const std::optional<std::string>& cursor = std::nullopt) const;
  std::vector<Incident> all() const;
  std::size_t size() const;

  AlertRow append_alert(const Incident& incident, std::string message, TimestampMs ts);
  std::vector<AlertRow> alerts() const;

 private:
  void persist(const Incident& incident);
  void load();

  std::filesystem::path incidents_path_;
  std::filesystem::path alerts_path_;
  mutable std::shared_mutex mutex_;
  std::ofstream incidents_log_;
  std::ofstream alerts_log_;
  std::uint64_t next_id_ = 1;
  std::uint64_t next_alert_ = 1;
  std::map<std::string, Incident> incidents_;
  std::vector<AlertRow> alerts_;
};

}  // namespace warden

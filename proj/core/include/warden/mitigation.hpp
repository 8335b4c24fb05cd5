#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <vector>

#include "warden/clock.hpp"
#include "warden/incident.hpp"
#include "warden/rule.hpp"

namespace warden {

// Canonical text form of an IPv4/IPv6 address, or nullopt if it does not parse.
std::optional<std::string> canonical_ip(std::string_view text);

struct BlockEntry {
  std::string ip;
  std::string incident_id;
  TimestampMs created_ts = 0;
  std::optional<TimestampMs> expires_ts;  // absent: until manual unblock

  bool active_at(TimestampMs now) const { return !expires_ts || now < *expires_ts; }
  bool operator==(const BlockEntry&) const = default;
};

nlohmann::json to_json(const BlockEntry& b);
BlockEntry block_entry_from_json(const nlohmann::json& j);

// Downstream enforcement point notified on every blocklist mutation. The
// in-process blocklist is always authoritative; a hook lets an external
// datapath mirror it. Throwing from a hook fails the enactment.
class EnforcementHook {
 public:
  virtual ~EnforcementHook() = default;
  virtual void on_block(const BlockEntry& entry) = 0;
  virtual void on_unblock(const std::string& ip) = 0;
};

// Active blocks keyed by canonical IP, persisted to `<data_dir>/blocklist.json`.
// Reads take a shared lock so per-request checks stay cheap.
class Blocklist {
 public:
  explicit Blocklist(std::filesystem::path data_dir = {});

  // Throws Error{InvalidIp}.
  bool is_blocked(std::string_view ip, TimestampMs now) const;
  // Inserts unless an active entry already exists; returns whether it inserted.
  // Throws Error{InvalidIp} or Error{Storage}.
  bool block(BlockEntry entry, TimestampMs now);
  // Throws Error{NotBlocked}.
  BlockEntry unblock(std::string_view ip, TimestampMs now);
  std::optional<BlockEntry> find(std::string_view ip, TimestampMs now) const;
  std::vector<BlockEntry> active(TimestampMs now) const;

 private:
  void persist_locked() const;
  void purge_expired(const std::string& ip, TimestampMs now) const;

  std::filesystem::path path_;
  mutable std::shared_mutex mutex_;
  mutable std::map<std::string, BlockEntry> entries_;
};

// Turns policy actions into effects and keeps the audit trail
// (`<data_dir>/enactments.jsonl`).
class Enactor {
 public:
  Enactor(Blocklist& blocklist, IncidentStore& incidents, std::shared_ptr<Clock> clock,
          std::filesystem::path data_dir = {});

  void set_hook(std::shared_ptr<EnforcementHook> hook);

  // Never throws: failures come back as an Outcome::Failed record.
  EnactmentRecord enact(const ActionSpec& action, const RuleMatch& match, const Incident& incident);
  // Throws Error{NotBlocked} or Error{InvalidIp}.
  EnactmentRecord unblock(std::string_view ip, const std::string& operator_name);

  std::vector<EnactmentRecord> records() const;

 private:
  EnactmentRecord record(EnactmentRecord r);
  void block(const ActionSpec& action, const RuleMatch& match, const Incident& incident, EnactmentRecord& r);
  void write_report(const RuleMatch& match, const Incident& incident, EnactmentRecord& r);

  Blocklist& blocklist_;
  IncidentStore& incidents_;
  std::shared_ptr<Clock> clock_;
  std::filesystem::path data_dir_;

  mutable std::mutex mutex_;
  std::shared_ptr<EnforcementHook> hook_;
  std::ofstream log_;
  std::uint64_t next_id_ = 1;
  std::vector<EnactmentRecord> records_;
};

}  // namespace warden

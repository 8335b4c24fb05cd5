#include "warden/mitigation.hpp"

#include <arpa/inet.h>

#include <cstdio>

namespace warden {
namespace {

std::string record_id(std::uint64_t n) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "enr-%06llu", static_cast<unsigned long long>(n));
  return buf;
}

std::string require_ip(std::string_view text) {
  auto ip = canonical_ip(text);
  if (!ip) throw Error(ErrorCode::InvalidIp, "not an IP address: '" + std::string(text) + "'");
  return *ip;
}

}  // namespace

std::optional<std::string> canonical_ip(std::string_view text) {
  const std::string s(text);
  char out[INET6_ADDRSTRLEN] = {};
  unsigned char buf[sizeof(struct in6_addr)];
  if (inet_pton(AF_INET, s.c_str(), buf) == 1) {
    inet_ntop(AF_INET, buf, out, sizeof out);
    return std::string(out);
  }
  if (inet_pton(AF_INET6, s.c_str(), buf) == 1) {
    inet_ntop(AF_INET6, buf, out, sizeof out);
    return std::string(out);
  }
  return std::nullopt;
}

nlohmann::json to_json(const BlockEntry& b) {
  nlohmann::json j{{"ip", b.ip}, {"incident_id", b.incident_id}, {"created_ts", b.created_ts}};
  j["expires_ts"] = b.expires_ts ? nlohmann::json(*b.expires_ts) : nlohmann::json(nullptr);
  return j;
}

BlockEntry block_entry_from_json(const nlohmann::json& j) {
  BlockEntry b;
  b.ip = j.at("ip").get<std::string>();
  b.incident_id = j.value("incident_id", "");
  b.created_ts = j.value("created_ts", TimestampMs{0});
  if (auto e = j.find("expires_ts"); e != j.end() && !e->is_null()) b.expires_ts = e->get<TimestampMs>();
  return b;
}

Blocklist::Blocklist(std::filesystem::path data_dir) {
  if (data_dir.empty()) return;
  std::error_code ec;
  std::filesystem::create_directories(data_dir, ec);
  path_ = data_dir / "blocklist.json";
  std::ifstream in(path_);
  if (!in) return;
  auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_array()) throw Error(ErrorCode::Storage, "corrupt blocklist " + path_.string());
  for (const auto& item : j) {
    auto entry = block_entry_from_json(item);
    entries_[entry.ip] = std::move(entry);
  }
}

void Blocklist::persist_locked() const {
  if (path_.empty()) return;
  nlohmann::json j = nlohmann::json::array();
  for (const auto& [ip, entry] : entries_) j.push_back(to_json(entry));
  const auto tmp = path_.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    out << j.dump(2) << '\n';
    out.flush();
    if (!out) throw Error(ErrorCode::Storage, "cannot write " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path_, ec);
  if (ec) throw Error(ErrorCode::Storage, "cannot replace " + path_.string() + ": " + ec.message());
}

void Blocklist::purge_expired(const std::string& ip, TimestampMs now) const {
  std::unique_lock lock(mutex_);
  auto it = entries_.find(ip);
  if (it == entries_.end() || it->second.active_at(now)) return;
  entries_.erase(it);
  try {
    persist_locked();
  } catch (const Error&) {
    // Expired entries are inert; the next successful write drops them.
  }
}

bool Blocklist::is_blocked(std::string_view ip, TimestampMs now) const {
  const auto key = require_ip(ip);
  {
    std::shared_lock lock(mutex_);
    auto it = entries_.find(key);
    if (it == entries_.end()) return false;
    if (it->second.active_at(now)) return true;
  }
  purge_expired(key, now);
  return false;
}

std::optional<BlockEntry> Blocklist::find(std::string_view ip, TimestampMs now) const {
  const auto key = require_ip(ip);
  std::shared_lock lock(mutex_);
  auto it = entries_.find(key);
  if (it == entries_.end() || !it->second.active_at(now)) return std::nullopt;
  return it->second;
}

bool Blocklist::block(BlockEntry entry, TimestampMs now) {
  entry.ip = require_ip(entry.ip);
  if (entry.expires_ts && *entry.expires_ts <= entry.created_ts) {
    throw Error(ErrorCode::Validation, "block expiry must be after creation");
  }
  std::unique_lock lock(mutex_);
  auto it = entries_.find(entry.ip);
  if (it != entries_.end() && it->second.active_at(now)) return false;
  std::optional<BlockEntry> previous;
  if (it != entries_.end()) previous = it->second;
  const auto key = entry.ip;
  entries_[key] = std::move(entry);
  try {
    persist_locked();
  } catch (...) {
    if (previous) {
      entries_[key] = *previous;
    } else {
      entries_.erase(key);
    }
    throw;
  }
  return true;
}

BlockEntry Blocklist::unblock(std::string_view ip, TimestampMs now) {
  const auto key = require_ip(ip);
  std::unique_lock lock(mutex_);
  auto it = entries_.find(key);
  if (it == entries_.end() || !it->second.active_at(now)) {
    throw Error(ErrorCode::NotBlocked, key + " is not blocked");
  }
  BlockEntry removed = it->second;
  entries_.erase(it);
  try {
    persist_locked();
  } catch (...) {
    entries_[key] = removed;
    throw;
  }
  return removed;
}

std::vector<BlockEntry> Blocklist::active(TimestampMs now) const {
  std::shared_lock lock(mutex_);
  std::vector<BlockEntry> out;
  for (const auto& [ip, entry] : entries_) {
    if (entry.active_at(now)) out.push_back(entry);
  }
  return out;
}

Enactor::Enactor(Blocklist& blocklist, IncidentStore& incidents, std::shared_ptr<Clock> clock,
                 std::filesystem::path data_dir)
    : blocklist_(blocklist), incidents_(incidents), clock_(std::move(clock)), data_dir_(std::move(data_dir)) {
  if (data_dir_.empty()) return;
  std::error_code ec;
  std::filesystem::create_directories(data_dir_, ec);
  const auto path = data_dir_ / "enactments.jsonl";
  {
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) {
      auto j = nlohmann::json::parse(line, nullptr, false);
      if (j.is_discarded()) continue;
      records_.push_back(record_from_json(j));
      ++next_id_;
    }
  }
  log_.open(path, std::ios::app);
  if (!log_) throw Error(ErrorCode::Storage, "cannot open " + path.string());
}

void Enactor::set_hook(std::shared_ptr<EnforcementHook> hook) {
  std::lock_guard lock(mutex_);
  hook_ = std::move(hook);
}

EnactmentRecord Enactor::record(EnactmentRecord r) {
  std::lock_guard lock(mutex_);
  r.record_id = record_id(next_id_++);
  if (log_.is_open()) {
    log_ << to_json(r).dump() << '\n';
    log_.flush();
    if (!log_) log_.clear();
  }
  records_.push_back(r);
  return r;
}

void Enactor::block(const ActionSpec& action, const RuleMatch& match, const Incident& incident,
                    EnactmentRecord& r) {
  auto ip = canonical_ip(match.group_key);
  if (!ip) throw Error(ErrorCode::InvalidIp, "group key '" + match.group_key + "' is not an IP address");
  r.target = *ip;
  const auto now = clock_->now_ms();
  BlockEntry entry{*ip, incident.incident_id, now, std::nullopt};
  if (auto secs = action.block_duration_s()) entry.expires_ts = now + *secs * 1000;

  if (blocklist_.is_blocked(*ip, now)) {
    r.detail = *ip + " already blocked";
    return;
  }
  std::shared_ptr<EnforcementHook> hook;
  {
    std::lock_guard lock(mutex_);
    hook = hook_;
  }
  if (hook) {
    try {
      hook->on_block(entry);
    } catch (const std::exception& e) {
      throw Error(ErrorCode::Enactment, "enforcement hook failed: " + std::string(e.what()));
    }
  }
  if (blocklist_.block(entry, now)) {
    r.detail = "blocked " + *ip + (entry.expires_ts ? " until " + std::to_string(*entry.expires_ts) : " until manual unblock");
  } else {
    r.detail = *ip + " already blocked";
  }
}

void Enactor::write_report(const RuleMatch& match, const Incident& incident, EnactmentRecord& r) {
  if (data_dir_.empty()) {
    r.detail = "report kept in incident detail only";
    return;
  }
  const auto dir = data_dir_ / "reports";
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  const auto path = dir / (incident.incident_id + ".json");
  std::ofstream out(path, std::ios::trunc);
  nlohmann::json doc{{"incident", to_json(incident)}, {"match", to_json(match)}, {"generated_ts", clock_->now_ms()}};
  out << doc.dump(2) << '\n';
  out.flush();
  if (!out) throw Error(ErrorCode::Storage, "cannot write report " + path.string());
  r.target = path.string();
  r.detail = "report written";
}

EnactmentRecord Enactor::enact(const ActionSpec& action, const RuleMatch& match, const Incident& incident) {
  EnactmentRecord r;
  r.incident_id = incident.incident_id;
  r.action = std::string(to_string(action.kind));
  r.ts = clock_->now_ms();
  try {
    switch (action.kind) {
      case ActionKind::Alert: {
        auto row = incidents_.append_alert(
            incident, "policy " + match.policy_id + " matched for " + match.group_key, r.ts);
        r.target = row.alert_id;
        r.detail = "alert raised on timeline";
        break;
      }
      case ActionKind::BlockIp:
        block(action, match, incident, r);
        break;
      case ActionKind::Report:
        write_report(match, incident, r);
        break;
    }
    r.outcome = Outcome::Applied;
  } catch (const Error& e) {
    r.outcome = Outcome::Failed;
    r.error = e.code();
    r.detail = std::string(to_string(e.code())) + ": " + e.what();
  } catch (const std::exception& e) {
    r.outcome = Outcome::Failed;
    r.error = ErrorCode::Enactment;
    r.detail = std::string("EnactmentError: ") + e.what();
  }
  return record(std::move(r));
}

EnactmentRecord Enactor::unblock(std::string_view ip, const std::string& operator_name) {
  const auto now = clock_->now_ms();
  auto removed = blocklist_.unblock(ip, now);
  EnactmentRecord r;
  r.incident_id = removed.incident_id;
  r.action = "unblock";
  r.ts = now;
  r.target = removed.ip;
  r.operator_ = operator_name;
  r.detail = "unblocked by " + operator_name;
  std::shared_ptr<EnforcementHook> hook;
  {
    std::lock_guard lock(mutex_);
    hook = hook_;
  }
  if (hook) {
    try {
      hook->on_unblock(removed.ip);
    } catch (const std::exception& e) {
      r.detail += "; hook failed: " + std::string(e.what());
    }
  }
  return record(std::move(r));
}

std::vector<EnactmentRecord> Enactor::records() const {
  std::lock_guard lock(mutex_);
  return records_;
}

}  // namespace warden

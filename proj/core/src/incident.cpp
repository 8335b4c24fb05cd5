#include "warden/incident.hpp"

#include <algorithm>
#include <cstdio>
#include <tuple>

namespace warden {
namespace {

std::string padded_id(const char* prefix, std::uint64_t n) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s-%06llu", prefix, static_cast<unsigned long long>(n));
  return buf;
}

std::uint64_t id_number(const std::string& id) {
  auto dash = id.rfind('-');
  if (dash == std::string::npos) return 0;
  try {
    return std::stoull(id.substr(dash + 1));
  } catch (...) {
    return 0;
  }
}

// Newest first.
bool timeline_before(const Incident& a, const Incident& b) {
  return std::tie(a.created_ts, a.incident_id) > std::tie(b.created_ts, b.incident_id);
}

std::string cursor_of(const Incident& i) { return std::to_string(i.created_ts) + ":" + i.incident_id; }

std::optional<std::pair<TimestampMs, std::string>> parse_cursor(const std::string& c) {
  auto colon = c.find(':');
  if (colon == std::string::npos) return std::nullopt;
  try {
    return std::pair{std::stoll(c.substr(0, colon)), c.substr(colon + 1)};
  } catch (...) {
    return std::nullopt;
  }
}

std::string_view outcome_name(Outcome o) { return o == Outcome::Applied ? "applied" : "failed"; }

}  // namespace

std::string_view to_string(IncidentStatus s) {
  switch (s) {
    case IncidentStatus::Open: return "open";
    case IncidentStatus::Acknowledged: return "acknowledged";
    case IncidentStatus::Closed: return "closed";
  }
  return "open";
}

std::optional<IncidentStatus> parse_incident_status(std::string_view text) {
  if (text == "open") return IncidentStatus::Open;
  if (text == "acknowledged") return IncidentStatus::Acknowledged;
  if (text == "closed") return IncidentStatus::Closed;
  return std::nullopt;
}

std::vector<std::string> Incident::blocked_ips() const {
  std::vector<std::string> out;
  for (const auto& r : actions_taken) {
    if (r.action == "block_ip" && r.outcome == Outcome::Applied) out.push_back(r.target);
  }
  return out;
}

nlohmann::json to_json(const RuleMatch& m) {
  return {{"policy_id", m.policy_id},   {"group_key", m.group_key},
          {"matched_at", m.matched_at}, {"evidence", m.evidence},
          {"condition_snapshot", m.condition_snapshot}, {"namespace", m.ns}};
}

RuleMatch match_from_json(const nlohmann::json& j) {
  RuleMatch m;
  m.policy_id = j.at("policy_id").get<std::string>();
  m.group_key = j.at("group_key").get<std::string>();
  m.matched_at = j.at("matched_at").get<TimestampMs>();
  m.evidence = j.at("evidence").get<std::vector<std::string>>();
  m.condition_snapshot = j.value("condition_snapshot", nlohmann::json());
  m.ns = j.value("namespace", "");
  return m;
}

nlohmann::json to_json(const EnactmentRecord& r) {
  nlohmann::json j{{"record_id", r.record_id}, {"incident_id", r.incident_id}, {"action", r.action},
                   {"outcome", outcome_name(r.outcome)}, {"detail", r.detail}, {"ts", r.ts},
                   {"target", r.target}};
  if (r.error) j["error"] = to_string(*r.error);
  if (!r.operator_.empty()) j["operator"] = r.operator_;
  return j;
}

EnactmentRecord record_from_json(const nlohmann::json& j) {
  EnactmentRecord r;
  r.record_id = j.at("record_id").get<std::string>();
  r.incident_id = j.value("incident_id", "");
  r.action = j.at("action").get<std::string>();
  r.outcome = j.value("outcome", "applied") == "applied" ? Outcome::Applied : Outcome::Failed;
  r.detail = j.value("detail", "");
  r.ts = j.value("ts", TimestampMs{0});
  r.target = j.value("target", "");
  r.operator_ = j.value("operator", "");
  if (auto e = j.find("error"); e != j.end()) {
    for (int c = 0; c <= static_cast<int>(ErrorCode::InvalidTransition); ++c) {
      if (to_string(static_cast<ErrorCode>(c)) == e->get<std::string>()) r.error = static_cast<ErrorCode>(c);
    }
  }
  return r;
}

nlohmann::json to_json(const Incident& i) {
  nlohmann::json actions = nlohmann::json::array();
  for (const auto& r : i.actions_taken) actions.push_back(to_json(r));
  return {{"incident_id", i.incident_id}, {"policy_id", i.policy_id},
          {"created_ts", i.created_ts},   {"match", to_json(i.match)},
          {"actions_taken", actions},     {"status", to_string(i.status)},
          {"namespace", i.ns},            {"errors", i.errors},
          {"blocked_ips", i.blocked_ips()}};
}

Incident incident_from_json(const nlohmann::json& j) {
  Incident i;
  i.incident_id = j.at("incident_id").get<std::string>();
  i.policy_id = j.at("policy_id").get<std::string>();
  i.created_ts = j.at("created_ts").get<TimestampMs>();
  i.match = match_from_json(j.at("match"));
  for (const auto& r : j.value("actions_taken", nlohmann::json::array())) i.actions_taken.push_back(record_from_json(r));
  i.status = parse_incident_status(j.value("status", "open")).value_or(IncidentStatus::Open);
  i.ns = j.value("namespace", "");
  i.errors = j.value("errors", std::vector<std::string>{});
  return i;
}

nlohmann::json to_json(const AlertRow& a) {
  return {{"alert_id", a.alert_id}, {"incident_id", a.incident_id}, {"policy_id", a.policy_id},
          {"namespace", a.ns},      {"group_key", a.group_key},     {"ts", a.ts},
          {"message", a.message}};
}

IncidentStore::IncidentStore(std::filesystem::path data_dir) {
  if (data_dir.empty()) return;
  std::error_code ec;
  std::filesystem::create_directories(data_dir, ec);
  incidents_path_ = data_dir / "incidents.jsonl";
  alerts_path_ = data_dir / "alerts.jsonl";
  load();
  incidents_log_.open(incidents_path_, std::ios::app);
  alerts_log_.open(alerts_path_, std::ios::app);
  if (!incidents_log_ || !alerts_log_) throw Error(ErrorCode::Storage, "cannot open incident store in " + data_dir.string());
}

void IncidentStore::load() {
  std::ifstream in(incidents_path_);
  std::string line;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) continue;
    auto incident = incident_from_json(j);
    next_id_ = std::max(next_id_, id_number(incident.incident_id) + 1);
    incidents_[incident.incident_id] = std::move(incident);
  }
  std::ifstream alerts(alerts_path_);
  while (std::getline(alerts, line)) {
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) continue;
    AlertRow a{j.value("alert_id", ""), j.value("incident_id", ""), j.value("policy_id", ""),
               j.value("namespace", ""), j.value("group_key", ""), j.value("ts", TimestampMs{0}),
               j.value("message", "")};
    next_alert_ = std::max(next_alert_, id_number(a.alert_id) + 1);
    alerts_.push_back(std::move(a));
  }
}

void IncidentStore::persist(const Incident& incident) {
  if (!incidents_log_.is_open()) return;
  incidents_log_ << to_json(incident).dump() << '\n';
  incidents_log_.flush();
  if (!incidents_log_) {
    incidents_log_.clear();
    throw Error(ErrorCode::Storage, "incident log write failed");
  }
}

Incident IncidentStore::create(RuleMatch match, TimestampMs created_ts) {
  std::unique_lock lock(mutex_);
  Incident incident;
  incident.incident_id = padded_id("inc", next_id_++);
  incident.policy_id = match.policy_id;
  incident.ns = match.ns;
  incident.created_ts = std::max(created_ts, match.matched_at);
  incident.match = std::move(match);
  persist(incident);
  incidents_[incident.incident_id] = incident;
  return incident;
}

void IncidentStore::update(const Incident& incident) {
  std::unique_lock lock(mutex_);
  if (!incidents_.contains(incident.incident_id)) {
    throw Error(ErrorCode::NotFound, "no incident " + incident.incident_id);
  }
  persist(incident);
  incidents_[incident.incident_id] = incident;
}

std::optional<Incident> IncidentStore::get(const std::string& incident_id) const {
  std::shared_lock lock(mutex_);
  auto it = incidents_.find(incident_id);
  if (it == incidents_.end()) return std::nullopt;
  return it->second;
}

Incident IncidentStore::set_status(const std::string& incident_id, IncidentStatus next) {
  std::unique_lock lock(mutex_);
  auto it = incidents_.find(incident_id);
  if (it == incidents_.end()) throw Error(ErrorCode::NotFound, "no incident " + incident_id);
  const auto current = static_cast<int>(it->second.status);
  if (static_cast<int>(next) != current + 1) {
    throw Error(ErrorCode::InvalidTransition, "cannot move incident from " +
                                                  std::string(to_string(it->second.status)) + " to " +
                                                  std::string(to_string(next)));
  }
  Incident updated = it->second;
  updated.status = next;
  persist(updated);
  it->second = updated;
  return updated;
}

IncidentPage IncidentStore::list(const IncidentFilter& filter, std::size_t limit,
                                 const std::optional<std::string>& cursor) const {
  std::vector<Incident> matching;
  {
    std::shared_lock lock(mutex_);
    for (const auto& [id, incident] : incidents_) {
      if (filter.ns && incident.ns != *filter.ns) continue;
      if (filter.since_ts && incident.created_ts < *filter.since_ts) continue;
      if (filter.status && incident.status != *filter.status) continue;
      matching.push_back(incident);
    }
  }
  std::sort(matching.begin(), matching.end(), timeline_before);

  auto start = matching.begin();
  if (cursor) {
    if (auto c = parse_cursor(*cursor)) {
      Incident pivot;
      pivot.created_ts = c->first;
      pivot.incident_id = c->second;
      start = std::upper_bound(matching.begin(), matching.end(), pivot, timeline_before);
    } else {
      throw Error(ErrorCode::Range, "malformed cursor");
    }
  }
  IncidentPage page;
  if (limit == 0) limit = 1;
  for (auto it = start; it != matching.end() && page.items.size() < limit; ++it) page.items.push_back(*it);
  if (!page.items.empty() && start + static_cast<std::ptrdiff_t>(page.items.size()) != matching.end()) {
    page.next_cursor = cursor_of(page.items.back());
  }
  return page;
}

std::vector<Incident> IncidentStore::all() const {
  std::shared_lock lock(mutex_);
  std::vector<Incident> out;
  for (const auto& [id, incident] : incidents_) out.push_back(incident);
  std::sort(out.begin(), out.end(), timeline_before);
  return out;
}

std::size_t IncidentStore::size() const {
  std::shared_lock lock(mutex_);
  return incidents_.size();
}

AlertRow IncidentStore::append_alert(const Incident& incident, std::string message, TimestampMs ts) {
  std::unique_lock lock(mutex_);
  AlertRow row{padded_id("alert", next_alert_++), incident.incident_id, incident.policy_id, incident.ns,
               incident.match.group_key, ts, std::move(message)};
  if (alerts_log_.is_open()) {
    alerts_log_ << to_json(row).dump() << '\n';
    alerts_log_.flush();
    if (!alerts_log_) {
      alerts_log_.clear();
      throw Error(ErrorCode::Storage, "alert timeline write failed");
    }
  }
  alerts_.push_back(row);
  return row;
}

std::vector<AlertRow> IncidentStore::alerts() const {
  std::shared_lock lock(mutex_);
  return alerts_;
}

}  // namespace warden

#include "warden/event.hpp"

#include <array>
#include <utility>

namespace warden {
namespace {

constexpr std::array<std::pair<EventKind, std::string_view>, 5> kKindNames{{
    {EventKind::AuthFailure, "auth_failure"},
    {EventKind::AuthSuccess, "auth_success"},
    {EventKind::HttpRequest, "http_request"},
    {EventKind::VulnFindingBatch, "vuln_finding_batch"},
    {EventKind::System, "system"},
}};

[[noreturn]] void schema_error(const std::string& path, const std::string& message) {
  throw Error(ErrorCode::Schema, "malformed event: " + path + ": " + message,
              {FieldError{path, message}});
}

std::string required_string(const nlohmann::json& j, const char* key, const std::string& path) {
  auto it = j.find(key);
  if (it == j.end() || !it->is_string()) schema_error(path + "/" + key, "expected string");
  return it->get<std::string>();
}

}  // namespace

std::string_view to_string(EventKind kind) {
  for (const auto& [k, name] : kKindNames) {
    if (k == kind) return name;
  }
  return "system";
}

std::optional<EventKind> parse_event_kind(std::string_view text) {
  for (const auto& [k, name] : kKindNames) {
    if (name == text) return k;
  }
  return std::nullopt;
}

const std::string* SecurityEvent::attr(const std::string& key) const {
  auto it = attrs.find(key);
  return it == attrs.end() ? nullptr : &it->second;
}

std::vector<FieldError> validate_event(const SecurityEvent& event) {
  std::vector<FieldError> errors;
  if (event.event_id.empty()) errors.push_back({"/event_id", "must be nonempty"});
  if (event.ts < 0) errors.push_back({"/ts", "must be >= 0"});
  if (event.source.agent_id.empty()) errors.push_back({"/source/agent_id", "must be nonempty"});
  if (event.source.node_name.empty()) errors.push_back({"/source/node_name", "must be nonempty"});
  if (event.source.ns.empty()) errors.push_back({"/source/namespace", "must be nonempty"});
  for (const auto& [key, value] : event.attrs) {
    if (key.empty()) errors.push_back({"/attrs", "attribute keys must be nonempty"});
  }
  if (event.kind == EventKind::AuthFailure || event.kind == EventKind::AuthSuccess) {
    const auto* ip = event.attr(attr::kClientIp);
    if (ip == nullptr || ip->empty()) {
      errors.push_back({"/attrs/client_ip", "required for " + std::string(to_string(event.kind))});
    }
  }
  return errors;
}

void to_json(nlohmann::json& j, const AgentRef& a) {
  j = nlohmann::json{{"agent_id", a.agent_id}, {"node_name", a.node_name}, {"namespace", a.ns}};
}

void from_json(const nlohmann::json& j, AgentRef& a) {
  if (!j.is_object()) schema_error("/source", "expected object");
  a.agent_id = required_string(j, "agent_id", "/source");
  a.node_name = required_string(j, "node_name", "/source");
  a.ns = required_string(j, "namespace", "/source");
}

void to_json(nlohmann::json& j, const SecurityEvent& e) {
  j = nlohmann::json{{"event_id", e.event_id},
                     {"seq", e.seq},
                     {"ts", e.ts},
                     {"source", e.source},
                     {"kind", to_string(e.kind)},
                     {"attrs", e.attrs}};
}

SecurityEvent event_from_json(const nlohmann::json& j) {
  if (!j.is_object()) schema_error("", "expected object");
  SecurityEvent e;
  e.event_id = required_string(j, "event_id", "");
  if (auto it = j.find("seq"); it != j.end() && !it->is_null()) {
    if (!it->is_number_unsigned() && !it->is_number_integer()) schema_error("/seq", "expected integer");
    e.seq = it->get<std::uint64_t>();
  }
  auto ts = j.find("ts");
  if (ts == j.end() || !ts->is_number_integer()) schema_error("/ts", "expected integer epoch millis");
  e.ts = ts->get<TimestampMs>();
  auto src = j.find("source");
  if (src == j.end()) schema_error("/source", "missing");
  e.source = src->get<AgentRef>();
  const auto kind_text = required_string(j, "kind", "");
  auto kind = parse_event_kind(kind_text);
  if (!kind) schema_error("/kind", "unknown kind '" + kind_text + "'");
  e.kind = *kind;
  if (auto it = j.find("attrs"); it != j.end() && !it->is_null()) {
    if (!it->is_object()) schema_error("/attrs", "expected object");
    for (const auto& [key, value] : it->items()) {
      if (value.is_string()) {
        e.attrs[key] = value.get<std::string>();
      } else if (value.is_number() || value.is_boolean()) {
        e.attrs[key] = value.dump();
      } else {
        schema_error("/attrs/" + key, "expected scalar");
      }
    }
  }
  return e;
}

}  // namespace warden

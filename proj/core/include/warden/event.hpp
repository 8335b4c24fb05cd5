#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "warden/clock.hpp"
#include "warden/error.hpp"

namespace warden {

enum class EventKind { AuthFailure, AuthSuccess, HttpRequest, VulnFindingBatch, System };

std::string_view to_string(EventKind kind);
std::optional<EventKind> parse_event_kind(std::string_view text);

struct AgentRef {
  std::string agent_id;
  std::string node_name;
  std::string ns;

  bool operator==(const AgentRef&) const = default;
};

// One normalized observation. `seq` is zero until the broker assigns it.
struct SecurityEvent {
  std::string event_id;
  std::uint64_t seq = 0;
  TimestampMs ts = 0;
  AgentRef source;
  EventKind kind = EventKind::System;
  std::map<std::string, std::string> attrs;

  const std::string* attr(const std::string& key) const;

  bool operator==(const SecurityEvent&) const = default;
};

// Conventional attribute keys.
namespace attr {
inline constexpr const char* kClientIp = "client_ip";
inline constexpr const char* kPath = "path";
inline constexpr const char* kUser = "user";
inline constexpr const char* kStatusCode = "status_code";
inline constexpr const char* kComponent = "component";
inline constexpr const char* kMethod = "method";
}  // namespace attr

// Returns every type-invariant violation; empty means valid.
std::vector<FieldError> validate_event(const SecurityEvent& event);

void to_json(nlohmann::json& j, const AgentRef& a);
void from_json(const nlohmann::json& j, AgentRef& a);
void to_json(nlohmann::json& j, const SecurityEvent& e);
// Throws Error{Schema} on missing or mistyped fields.
SecurityEvent event_from_json(const nlohmann::json& j);

}  // namespace warden

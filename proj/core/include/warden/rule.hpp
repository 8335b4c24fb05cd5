#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "warden/error.hpp"
#include "warden/event.hpp"

namespace warden {

enum class Comparator { Greater, GreaterEqual };

std::string_view to_string(Comparator cmp);
std::optional<Comparator> parse_comparator(std::string_view text);

constexpr bool satisfies(Comparator cmp, std::int64_t value, std::int64_t threshold) {
  return cmp == Comparator::Greater ? value > threshold : value >= threshold;
}

// Ordered none < low < medium < high < critical.
enum class Severity { None, Low, Medium, High, Critical };

std::string_view to_string(Severity s);
std::optional<Severity> parse_severity(std::string_view text);

struct EventPredicate {
  EventKind kind = EventKind::AuthFailure;
  std::map<std::string, std::string> attrs;  // equality constraints

  bool matches(const SecurityEvent& e) const;
  bool operator==(const EventPredicate&) const = default;
};

// Count of predicate-matching events per group key within a sliding window.
struct WindowCondition {
  EventPredicate event;
  std::string group_by = attr::kClientIp;
  std::int64_t window_s = 60;
  Comparator cmp = Comparator::Greater;
  std::int64_t threshold = 1;

  bool operator==(const WindowCondition&) const = default;
};

struct ReportSelector {
  enum class Kind { SeverityLabel, ScoreAbove };
  Kind kind = Kind::SeverityLabel;
  Severity label = Severity::Critical;  // SeverityLabel
  double score = 0.0;                   // ScoreAbove: counts findings with score > this

  bool operator==(const ReportSelector&) const = default;
};

// Count of report findings picked by the selector, compared against `count`.
struct ReportCondition {
  ReportSelector selector;
  Comparator cmp = Comparator::Greater;
  std::int64_t count = 1;

  bool operator==(const ReportCondition&) const = default;
};

// Boolean tree over window and report conditions. Only the member matching
// `kind` is meaningful.
struct RuleExpr {
  enum class Kind { AnyOf, AllOf, Window, Report };

  Kind kind = Kind::AnyOf;
  std::vector<RuleExpr> children;
  WindowCondition window;
  ReportCondition report;

  static RuleExpr any_of(std::vector<RuleExpr> children);
  static RuleExpr all_of(std::vector<RuleExpr> children);
  static RuleExpr of(WindowCondition c);
  static RuleExpr of(ReportCondition c);

  bool is_leaf() const { return kind == Kind::Window || kind == Kind::Report; }
  std::size_t depth() const;
  // Leaves in depth-first order.
  std::vector<const WindowCondition*> window_conditions() const;
  std::vector<const ReportCondition*> report_conditions() const;

  bool operator==(const RuleExpr&) const = default;
};

inline constexpr std::size_t kMaxRuleDepth = 8;
inline constexpr std::int64_t kMinWindowSeconds = 1;
inline constexpr std::int64_t kMaxWindowSeconds = 24 * 60 * 60;

// Enforces the structural invariants of a rule tree; never throws.
std::vector<FieldError> validate_rule(const RuleExpr& rule, const std::string& path = "/rule");

nlohmann::json to_json(const RuleExpr& rule);
// Throws Error{Schema} carrying every problem found.
RuleExpr rule_from_json(const nlohmann::json& j, const std::string& path = "/rule");

enum class ActionKind { Alert, BlockIp, Report };

std::string_view to_string(ActionKind kind);
std::optional<ActionKind> parse_action_kind(std::string_view text);

struct ActionSpec {
  ActionKind kind = ActionKind::Alert;
  nlohmann::json params = nlohmann::json::object();

  // block_ip only: absent means the block lasts until a manual unblock.
  std::optional<std::int64_t> block_duration_s() const;

  bool operator==(const ActionSpec&) const = default;
};

nlohmann::json to_json(const ActionSpec& action);
ActionSpec action_from_json(const nlohmann::json& j, const std::string& path);
std::vector<ActionSpec> actions_from_json(const nlohmann::json& j, const std::string& path = "/actions");

// block_ip needs a client_ip group key to act upon.
std::vector<FieldError> validate_actions(const std::vector<ActionSpec>& actions, const RuleExpr& rule);

}  // namespace warden

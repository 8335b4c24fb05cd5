#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "warden/clock.hpp"
#include "warden/rule.hpp"

namespace warden {

enum class AttackClass { BruteForce, VulnAlert, GenericThreshold };

std::string_view to_string(AttackClass c);
std::optional<AttackClass> parse_attack_class(std::string_view text);

enum class ParamType { Int, Float, Duration, String };

std::string_view to_string(ParamType t);
std::optional<ParamType> parse_param_type(std::string_view text);

struct ParamSpec {
  std::string name;
  ParamType type = ParamType::Int;
  nlohmann::json default_value;
  std::optional<double> min;
  std::optional<double> max;

  bool operator==(const ParamSpec&) const = default;
};

// A parameterized rule and action skeleton addressing one attack class.
// Skeletons are kept as JSON because `${param}` placeholders may stand in for
// values of any type until instantiation.
struct PolicyTemplate {
  std::string template_id;
  std::string name;
  AttackClass attack_class = AttackClass::GenericThreshold;
  std::string description;
  std::vector<ParamSpec> params;
  nlohmann::json rule_skeleton;
  nlohmann::json action_skeleton = nlohmann::json::array();
  std::vector<std::string> tags;

  const ParamSpec* param(std::string_view name) const;
  bool operator==(const PolicyTemplate&) const = default;
};

struct Scope {
  std::optional<std::string> ns;
  std::optional<std::string> component;

  bool operator==(const Scope&) const = default;
};

struct PolicyInstance {
  std::string policy_id;
  std::string template_id;
  std::string name;
  AttackClass attack_class = AttackClass::GenericThreshold;
  std::map<std::string, nlohmann::json> bindings;  // resolved, defaults included
  Scope scope;
  RuleExpr rule;
  std::vector<ActionSpec> actions;
  std::vector<std::string> tags;
  bool enabled = false;
  TimestampMs created_ts = 0;

  bool is_runtime() const { return !rule.window_conditions().empty(); }
  bool has_action(ActionKind kind) const;
  bool operator==(const PolicyInstance&) const = default;
};

// Names of every `${name}` placeholder found anywhere in `j`.
std::vector<std::string> collect_placeholders(const nlohmann::json& j);

// Converts "90", 90, "90s", "5m", "1h" to seconds. Returns nullopt when the
// value is not a duration.
std::optional<std::int64_t> parse_duration_seconds(const nlohmann::json& value);

// Throws Error{Schema} for malformed documents and Error{Semantic} for
// undeclared placeholders or bounds violations; details carry every problem.
PolicyTemplate parse_template(std::string_view text);
PolicyTemplate template_from_json(const nlohmann::json& j);
nlohmann::json to_json(const PolicyTemplate& t);

// Pure: binds parameters (missing ones take defaults), substitutes every
// placeholder and validates the result. The instance comes back disabled.
// Throws Error{Binding}.
PolicyInstance instantiate(const PolicyTemplate& t, const nlohmann::json& bindings, Scope scope,
                           std::string policy_id, TimestampMs created_ts);

nlohmann::json to_json(const Scope& s);
Scope scope_from_json(const nlohmann::json& j);
nlohmann::json to_json(const PolicyInstance& p);
// Reads a fully bound instance document (`*.policy.json`). Throws Error{Schema}
// or Error{Semantic}.
PolicyInstance instance_from_json(const nlohmann::json& j);

// Everything that identifies an onboarded policy apart from its id, enabled
// flag and creation time; used to reject duplicate onboarding.
std::string instance_identity(const PolicyInstance& p);

// Searchable, read-mostly set of templates.
class TemplateCatalog {
 public:
  // Throws Error{Duplicate} if template_id already exists.
  void add(PolicyTemplate t);
  // Loads every `*.template.json` under `dir`; returns how many were added.
  std::size_t load_directory(const std::filesystem::path& dir);

  std::optional<PolicyTemplate> get(std::string_view template_id) const;
  // Templates carrying every tag in `tags` whose name, description or tags
  // contain `query` (case-insensitive), ordered by name.
  std::vector<PolicyTemplate> search(std::string_view query, const std::vector<std::string>& tags) const;
  std::size_t size() const;

 private:
  mutable std::shared_mutex mutex_;
  std::map<std::string, PolicyTemplate, std::less<>> templates_;
};

}  // namespace warden

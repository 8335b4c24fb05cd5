#include "warden/policy.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <mutex>
#include <regex>
#include <set>
#include <sstream>

namespace warden {
namespace {

constexpr std::array<std::pair<AttackClass, std::string_view>, 3> kAttackClassNames{{
    {AttackClass::BruteForce, "brute_force"},
    {AttackClass::VulnAlert, "vuln_alert"},
    {AttackClass::GenericThreshold, "generic_threshold"},
}};

constexpr std::array<std::pair<ParamType, std::string_view>, 4> kParamTypeNames{{
    {ParamType::Int, "int"},
    {ParamType::Float, "float"},
    {ParamType::Duration, "duration"},
    {ParamType::String, "string"},
}};

const std::regex& placeholder_pattern() {
  static const std::regex re(R"(\$\{([A-Za-z_][A-Za-z0-9_]*)\})");
  return re;
}

const std::regex& whole_placeholder_pattern() {
  static const std::regex re(R"(^\$\{([A-Za-z_][A-Za-z0-9_]*)\}$)");
  return re;
}

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

// Typed value for `raw` under `spec`, or nullopt if the type does not fit.
std::optional<nlohmann::json> coerce(const ParamSpec& spec, const nlohmann::json& raw) {
  switch (spec.type) {
    case ParamType::Int:
      if (raw.is_number_integer()) return nlohmann::json(raw.get<std::int64_t>());
      if (raw.is_number_float()) {
        const double v = raw.get<double>();
        if (std::floor(v) == v && std::isfinite(v)) return nlohmann::json(static_cast<std::int64_t>(v));
      }
      if (raw.is_string()) {
        const auto s = raw.get<std::string>();
        std::int64_t v = 0;
        std::istringstream in(s);
        if (in >> v && in.eof()) return nlohmann::json(v);
      }
      return std::nullopt;
    case ParamType::Float:
      if (raw.is_number()) return nlohmann::json(raw.get<double>());
      if (raw.is_string()) {
        std::istringstream in(raw.get<std::string>());
        double v = 0;
        if (in >> v && in.eof()) return nlohmann::json(v);
      }
      return std::nullopt;
    case ParamType::Duration:
      if (auto secs = parse_duration_seconds(raw)) return nlohmann::json(*secs);
      return std::nullopt;
    case ParamType::String:
      if (raw.is_string()) return nlohmann::json(raw);
      return std::nullopt;
  }
  return std::nullopt;
}

std::optional<std::string> bounds_problem(const ParamSpec& spec, const nlohmann::json& typed) {
  if (!typed.is_number()) return std::nullopt;
  const double v = typed.get<double>();
  if (spec.min && v < *spec.min) {
    std::ostringstream os;
    os << "value " << typed.dump() << " below minimum " << *spec.min;
    return os.str();
  }
  if (spec.max && v > *spec.max) {
    std::ostringstream os;
    os << "value " << typed.dump() << " above maximum " << *spec.max;
    return os.str();
  }
  return std::nullopt;
}

std::string placeholder_text(const nlohmann::json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

nlohmann::json substitute(const nlohmann::json& j, const std::map<std::string, nlohmann::json>& values) {
  if (j.is_string()) {
    const auto& s = j.get_ref<const std::string&>();
    std::smatch m;
    if (std::regex_match(s, m, whole_placeholder_pattern())) {
      if (auto it = values.find(m[1].str()); it != values.end()) return it->second;
      return j;
    }
    std::string out;
    auto begin = s.cbegin();
    for (std::sregex_iterator it(s.begin(), s.end(), placeholder_pattern()), end; it != end; ++it) {
      out.append(begin, (*it)[0].first);
      auto v = values.find((*it)[1].str());
      out += v != values.end() ? placeholder_text(v->second) : (*it)[0].str();
      begin = (*it)[0].second;
    }
    out.append(begin, s.cend());
    return out;
  }
  if (j.is_array()) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& item : j) out.push_back(substitute(item, values));
    return out;
  }
  if (j.is_object()) {
    nlohmann::json out = nlohmann::json::object();
    for (const auto& [key, item] : j.items()) out[key] = substitute(item, values);
    return out;
  }
  return j;
}

void collect(const nlohmann::json& j, std::set<std::string>& names) {
  if (j.is_string()) {
    const auto& s = j.get_ref<const std::string&>();
    for (std::sregex_iterator it(s.begin(), s.end(), placeholder_pattern()), end; it != end; ++it) {
      names.insert((*it)[1].str());
    }
  } else if (j.is_structured()) {
    for (const auto& item : j) collect(item, names);
  }
}

std::string required_string(const nlohmann::json& j, const char* key, std::vector<FieldError>& errors,
                            bool nonempty = false) {
  auto it = j.find(key);
  if (it == j.end() || !it->is_string()) {
    errors.push_back({std::string("/") + key, "expected string"});
    return {};
  }
  auto value = it->get<std::string>();
  if (nonempty && value.empty()) errors.push_back({std::string("/") + key, "must be nonempty"});
  return value;
}

std::vector<std::string> string_list(const nlohmann::json& j, const char* key, std::vector<FieldError>& errors) {
  std::vector<std::string> out;
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return out;
  if (!it->is_array()) {
    errors.push_back({std::string("/") + key, "expected array of strings"});
    return out;
  }
  for (std::size_t i = 0; i < it->size(); ++i) {
    if (!(*it)[i].is_string()) {
      errors.push_back({std::string("/") + key + "/" + std::to_string(i), "expected string"});
    } else {
      out.push_back((*it)[i].get<std::string>());
    }
  }
  return out;
}

AttackClass attack_class_field(const nlohmann::json& j, std::vector<FieldError>& errors) {
  auto it = j.find("attack_class");
  if (it == j.end()) return AttackClass::GenericThreshold;
  if (it->is_string()) {
    if (auto c = parse_attack_class(it->get<std::string>())) return *c;
  }
  errors.push_back({"/attack_class", "expected one of brute_force, vuln_alert, generic_threshold"});
  return AttackClass::GenericThreshold;
}

std::vector<ParamSpec> parse_params(const nlohmann::json& j, std::vector<FieldError>& errors) {
  std::vector<ParamSpec> params;
  auto it = j.find("params");
  if (it == j.end() || it->is_null()) return params;
  if (!it->is_array()) {
    errors.push_back({"/params", "expected array"});
    return params;
  }
  std::set<std::string> seen;
  for (std::size_t i = 0; i < it->size(); ++i) {
    const auto& p = (*it)[i];
    const std::string path = "/params/" + std::to_string(i);
    if (!p.is_object()) {
      errors.push_back({path, "expected object"});
      continue;
    }
    ParamSpec spec;
    if (auto n = p.find("name"); n != p.end() && n->is_string() && !n->get<std::string>().empty()) {
      spec.name = n->get<std::string>();
      if (!seen.insert(spec.name).second) errors.push_back({path + "/name", "duplicate parameter name"});
    } else {
      errors.push_back({path + "/name", "expected nonempty string"});
    }
    std::optional<ParamType> type;
    if (auto t = p.find("type"); t != p.end() && t->is_string()) type = parse_param_type(t->get<std::string>());
    if (!type) {
      errors.push_back({path + "/type", "expected one of int, float, duration, string"});
    } else {
      spec.type = *type;
    }
    if (auto d = p.find("default"); d != p.end()) {
      spec.default_value = *d;
    } else {
      errors.push_back({path + "/default", "missing"});
    }
    for (const char* bound : {"min", "max"}) {
      auto b = p.find(bound);
      if (b == p.end() || b->is_null()) continue;
      if (!b->is_number()) {
        errors.push_back({path + "/" + bound, "expected number"});
      } else {
        (std::string_view(bound) == "min" ? spec.min : spec.max) = b->get<double>();
      }
    }
    params.push_back(std::move(spec));
  }
  return params;
}

// Checks defaults against their specs; collects placeholder problems.
std::vector<FieldError> semantic_checks(const PolicyTemplate& t) {
  std::vector<FieldError> errors;
  for (std::size_t i = 0; i < t.params.size(); ++i) {
    const auto& spec = t.params[i];
    const std::string path = "/params/" + std::to_string(i);
    if (spec.min && spec.max && *spec.min > *spec.max) errors.push_back({path, "min exceeds max"});
    auto typed = coerce(spec, spec.default_value);
    if (!typed) {
      errors.push_back({path + "/default", "default does not match type " + std::string(to_string(spec.type))});
    } else if (auto problem = bounds_problem(spec, *typed)) {
      errors.push_back({path + "/default", "default " + *problem});
    }
  }
  for (const auto& [label, skeleton] : {std::pair{"/rule", &t.rule_skeleton}, std::pair{"/actions", &t.action_skeleton}}) {
    std::set<std::string> names;
    collect(*skeleton, names);
    for (const auto& name : names) {
      if (t.param(name) == nullptr) errors.push_back({label, "placeholder ${" + name + "} names no declared param"});
    }
  }
  return errors;
}

std::optional<std::string> optional_string(const nlohmann::json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null() || !it->is_string()) return std::nullopt;
  return it->get<std::string>();
}

}  // namespace

std::string_view to_string(AttackClass c) {
  for (const auto& [k, name] : kAttackClassNames) {
    if (k == c) return name;
  }
  return "generic_threshold";
}

std::optional<AttackClass> parse_attack_class(std::string_view text) {
  for (const auto& [k, name] : kAttackClassNames) {
    if (name == text) return k;
  }
  return std::nullopt;
}

std::string_view to_string(ParamType t) {
  for (const auto& [k, name] : kParamTypeNames) {
    if (k == t) return name;
  }
  return "string";
}

std::optional<ParamType> parse_param_type(std::string_view text) {
  for (const auto& [k, name] : kParamTypeNames) {
    if (name == text) return k;
  }
  return std::nullopt;
}

const ParamSpec* PolicyTemplate::param(std::string_view name) const {
  for (const auto& p : params) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

bool PolicyInstance::has_action(ActionKind kind) const {
  return std::any_of(actions.begin(), actions.end(), [&](const ActionSpec& a) { return a.kind == kind; });
}

std::vector<std::string> collect_placeholders(const nlohmann::json& j) {
  std::set<std::string> names;
  collect(j, names);
  return {names.begin(), names.end()};
}

std::optional<std::int64_t> parse_duration_seconds(const nlohmann::json& value) {
  if (value.is_number_integer()) return value.get<std::int64_t>();
  if (value.is_number_float()) {
    const double v = value.get<double>();
    if (std::isfinite(v) && std::floor(v) == v) return static_cast<std::int64_t>(v);
    return std::nullopt;
  }
  if (!value.is_string()) return std::nullopt;
  static const std::regex re(R"(^\s*(-?\d+)\s*(s|m|h)?\s*$)");
  const auto s = value.get<std::string>();
  std::smatch m;
  if (!std::regex_match(s, m, re)) return std::nullopt;
  std::int64_t n = std::stoll(m[1].str());
  const auto unit = m[2].str();
  if (unit == "m") n *= 60;
  if (unit == "h") n *= 3600;
  return n;
}

PolicyTemplate template_from_json(const nlohmann::json& j) {
  if (!j.is_object()) raise(ErrorCode::Schema, "malformed template", {{"", "expected object"}});
  std::vector<FieldError> errors;
  PolicyTemplate t;
  t.template_id = required_string(j, "template_id", errors, true);
  t.name = required_string(j, "name", errors);
  t.attack_class = attack_class_field(j, errors);
  t.description = optional_string(j, "description").value_or("");
  t.params = parse_params(j, errors);
  if (auto r = j.find("rule"); r != j.end() && r->is_object()) {
    t.rule_skeleton = *r;
  } else {
    errors.push_back({"/rule", "expected object"});
  }
  if (auto a = j.find("actions"); a != j.end() && a->is_array()) {
    t.action_skeleton = *a;
  } else if (a != j.end()) {
    errors.push_back({"/actions", "expected array"});
  }
  t.tags = string_list(j, "tags", errors);
  if (!errors.empty()) raise(ErrorCode::Schema, "malformed template", std::move(errors));

  if (auto problems = semantic_checks(t); !problems.empty()) {
    raise(ErrorCode::Semantic, "invalid template", std::move(problems));
  }
  // The skeleton must produce a valid policy under its own defaults.
  try {
    (void)instantiate(t, nlohmann::json::object(), {}, "", 0);
  } catch (const Error& e) {
    raise(ErrorCode::Semantic, "template skeleton invalid under defaults", e.details());
  }
  return t;
}

PolicyTemplate parse_template(std::string_view text) {
  auto j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded()) raise(ErrorCode::Schema, "malformed template", {{"", "not valid JSON"}});
  return template_from_json(j);
}

nlohmann::json to_json(const PolicyTemplate& t) {
  nlohmann::json params = nlohmann::json::array();
  for (const auto& p : t.params) {
    nlohmann::json pj{{"name", p.name}, {"type", to_string(p.type)}, {"default", p.default_value}};
    if (p.min) pj["min"] = *p.min;
    if (p.max) pj["max"] = *p.max;
    params.push_back(std::move(pj));
  }
  return {{"template_id", t.template_id},
          {"name", t.name},
          {"attack_class", to_string(t.attack_class)},
          {"description", t.description},
          {"params", params},
          {"rule", t.rule_skeleton},
          {"actions", t.action_skeleton},
          {"tags", t.tags}};
}

PolicyInstance instantiate(const PolicyTemplate& t, const nlohmann::json& bindings, Scope scope,
                           std::string policy_id, TimestampMs created_ts) {
  std::vector<FieldError> errors;
  if (!bindings.is_null() && !bindings.is_object()) {
    raise(ErrorCode::Binding, "invalid bindings", {{"/bindings", "expected object"}});
  }
  if (bindings.is_object()) {
    for (const auto& [name, value] : bindings.items()) {
      if (t.param(name) == nullptr) errors.push_back({"/bindings/" + name, "no such parameter"});
    }
  }
  std::map<std::string, nlohmann::json> values;
  for (const auto& spec : t.params) {
    const std::string path = "/bindings/" + spec.name;
    const bool bound = bindings.is_object() && bindings.contains(spec.name);
    const auto& raw = bound ? bindings.at(spec.name) : spec.default_value;
    auto typed = coerce(spec, raw);
    if (!typed) {
      errors.push_back({path, "expected " + std::string(to_string(spec.type))});
      continue;
    }
    if (auto problem = bounds_problem(spec, *typed)) {
      errors.push_back({path, *problem});
      continue;
    }
    values.emplace(spec.name, std::move(*typed));
  }
  if (!errors.empty()) raise(ErrorCode::Binding, "invalid bindings", std::move(errors));

  PolicyInstance p;
  p.policy_id = std::move(policy_id);
  p.template_id = t.template_id;
  p.name = t.name;
  p.attack_class = t.attack_class;
  p.bindings = values;
  p.scope = std::move(scope);
  p.tags = t.tags;
  p.created_ts = created_ts;
  p.enabled = false;
  try {
    p.rule = rule_from_json(substitute(t.rule_skeleton, values));
    p.actions = actions_from_json(substitute(t.action_skeleton, values));
  } catch (const Error& e) {
    raise(ErrorCode::Binding, "bound policy is malformed", e.details());
  }
  auto problems = validate_rule(p.rule);
  auto action_problems = validate_actions(p.actions, p.rule);
  problems.insert(problems.end(), action_problems.begin(), action_problems.end());
  if (!problems.empty()) raise(ErrorCode::Binding, "bound policy is invalid", std::move(problems));
  return p;
}

nlohmann::json to_json(const Scope& s) {
  nlohmann::json j = nlohmann::json::object();
  if (s.ns) j["namespace"] = *s.ns;
  if (s.component) j["component"] = *s.component;
  return j;
}

Scope scope_from_json(const nlohmann::json& j) {
  Scope s;
  if (j.is_null()) return s;
  if (!j.is_object()) raise(ErrorCode::Schema, "malformed scope", {{"/scope", "expected object"}});
  std::vector<FieldError> errors;
  for (const auto& [key, target] : {std::pair{"namespace", &s.ns}, std::pair{"component", &s.component}}) {
    auto it = j.find(key);
    if (it == j.end() || it->is_null()) continue;
    if (!it->is_string() || it->get<std::string>().empty()) {
      errors.push_back({std::string("/scope/") + key, "expected nonempty string"});
    } else {
      *target = it->get<std::string>();
    }
  }
  if (!errors.empty()) raise(ErrorCode::Schema, "malformed scope", std::move(errors));
  return s;
}

nlohmann::json to_json(const PolicyInstance& p) {
  nlohmann::json actions = nlohmann::json::array();
  for (const auto& a : p.actions) actions.push_back(to_json(a));
  nlohmann::json bindings = nlohmann::json::object();
  for (const auto& [k, v] : p.bindings) bindings[k] = v;
  return {{"policy_id", p.policy_id},
          {"template_id", p.template_id},
          {"name", p.name},
          {"attack_class", to_string(p.attack_class)},
          {"bindings", bindings},
          {"scope", to_json(p.scope)},
          {"rule", to_json(p.rule)},
          {"actions", actions},
          {"tags", p.tags},
          {"enabled", p.enabled},
          {"created_ts", p.created_ts}};
}

PolicyInstance instance_from_json(const nlohmann::json& j) {
  if (!j.is_object()) raise(ErrorCode::Schema, "malformed policy", {{"", "expected object"}});
  std::vector<FieldError> errors;
  PolicyInstance p;
  p.policy_id = optional_string(j, "policy_id").value_or("");
  p.template_id = optional_string(j, "template_id").value_or("");
  p.name = optional_string(j, "name").value_or(p.template_id);
  p.attack_class = attack_class_field(j, errors);
  p.tags = string_list(j, "tags", errors);
  if (auto b = j.find("bindings"); b != j.end() && b->is_object()) {
    for (const auto& [k, v] : b->items()) p.bindings[k] = v;
  }
  if (auto e = j.find("enabled"); e != j.end() && e->is_boolean()) p.enabled = e->get<bool>();
  if (auto c = j.find("created_ts"); c != j.end() && c->is_number_integer()) p.created_ts = c->get<TimestampMs>();
  try {
    p.scope = scope_from_json(j.value("scope", nlohmann::json()));
  } catch (const Error& e) {
    errors.insert(errors.end(), e.details().begin(), e.details().end());
  }
  if (auto r = j.find("rule"); r == j.end()) {
    errors.push_back({"/rule", "missing"});
  } else {
    try {
      p.rule = rule_from_json(*r);
    } catch (const Error& e) {
      errors.insert(errors.end(), e.details().begin(), e.details().end());
    }
  }
  try {
    p.actions = actions_from_json(j.value("actions", nlohmann::json::array()));
  } catch (const Error& e) {
    errors.insert(errors.end(), e.details().begin(), e.details().end());
  }
  if (!errors.empty()) raise(ErrorCode::Schema, "malformed policy", std::move(errors));

  auto problems = validate_rule(p.rule);
  auto action_problems = validate_actions(p.actions, p.rule);
  problems.insert(problems.end(), action_problems.begin(), action_problems.end());
  if (!problems.empty()) raise(ErrorCode::Semantic, "invalid policy", std::move(problems));
  return p;
}

std::string instance_identity(const PolicyInstance& p) {
  nlohmann::json actions = nlohmann::json::array();
  for (const auto& a : p.actions) actions.push_back(to_json(a));
  return nlohmann::json{{"template_id", p.template_id},
                        {"scope", to_json(p.scope)},
                        {"rule", to_json(p.rule)},
                        {"actions", actions}}
      .dump();
}

void TemplateCatalog::add(PolicyTemplate t) {
  std::unique_lock lock(mutex_);
  if (templates_.contains(t.template_id)) {
    throw Error(ErrorCode::Duplicate, "template '" + t.template_id + "' already in catalog");
  }
  auto id = t.template_id;
  templates_.emplace(std::move(id), std::move(t));
}

std::size_t TemplateCatalog::load_directory(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (entry.is_regular_file() && name.ends_with(".template.json")) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& file : files) {
    std::ifstream in(file);
    std::stringstream buffer;
    buffer << in.rdbuf();
    try {
      add(parse_template(buffer.str()));
    } catch (const Error& e) {
      throw Error(e.code(), file.filename().string() + ": " + e.what(), e.details());
    }
  }
  return files.size();
}

std::optional<PolicyTemplate> TemplateCatalog::get(std::string_view template_id) const {
  std::shared_lock lock(mutex_);
  auto it = templates_.find(template_id);
  if (it == templates_.end()) return std::nullopt;
  return it->second;
}

std::vector<PolicyTemplate> TemplateCatalog::search(std::string_view query,
                                                    const std::vector<std::string>& tags) const {
  const auto needle = lower(query);
  std::vector<PolicyTemplate> out;
  std::shared_lock lock(mutex_);
  for (const auto& [id, t] : templates_) {
    std::vector<std::string> own_tags;
    for (const auto& tag : t.tags) own_tags.push_back(lower(tag));
    const bool has_tags = std::all_of(tags.begin(), tags.end(), [&](const std::string& tag) {
      return std::find(own_tags.begin(), own_tags.end(), lower(tag)) != own_tags.end();
    });
    if (!has_tags) continue;
    bool hit = needle.empty() || lower(t.name).find(needle) != std::string::npos ||
               lower(t.description).find(needle) != std::string::npos;
    for (const auto& tag : own_tags) hit = hit || tag.find(needle) != std::string::npos;
    if (hit) out.push_back(t);
  }
  std::stable_sort(out.begin(), out.end(), [](const PolicyTemplate& a, const PolicyTemplate& b) {
    return a.name != b.name ? a.name < b.name : a.template_id < b.template_id;
  });
  return out;
}

std::size_t TemplateCatalog::size() const {
  std::shared_lock lock(mutex_);
  return templates_.size();
}

}  // namespace warden

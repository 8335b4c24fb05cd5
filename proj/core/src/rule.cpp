#include "warden/rule.hpp"

#include <algorithm>
#include <array>
#include <utility>

namespace warden {
namespace {

constexpr std::array<std::pair<Severity, std::string_view>, 5> kSeverityNames{{
    {Severity::None, "none"},
    {Severity::Low, "low"},
    {Severity::Medium, "medium"},
    {Severity::High, "high"},
    {Severity::Critical, "critical"},
}};

constexpr std::array<std::pair<ActionKind, std::string_view>, 3> kActionNames{{
    {ActionKind::Alert, "alert"},
    {ActionKind::BlockIp, "block_ip"},
    {ActionKind::Report, "report"},
}};

// Accumulates schema problems so a caller sees every error in one pass.
class RuleParser {
 public:
  RuleExpr parse(const nlohmann::json& j, const std::string& path) {
    if (!j.is_object() || j.size() != 1) {
      fail(path, "rule node must be an object with exactly one of or/and/window/report");
      return {};
    }
    const auto first = j.begin();
    const std::string key = first.key();
    const auto& body = first.value();
    if (key == "or" || key == "and") {
      RuleExpr node;
      node.kind = key == "or" ? RuleExpr::Kind::AnyOf : RuleExpr::Kind::AllOf;
      if (!body.is_array()) {
        fail(path + "/" + key, "expected array");
        return node;
      }
      for (std::size_t i = 0; i < body.size(); ++i) {
        node.children.push_back(parse(body[i], path + "/" + key + "/" + std::to_string(i)));
      }
      return node;
    }
    if (key == "window") return RuleExpr::of(parse_window(body, path + "/window"));
    if (key == "report") return RuleExpr::of(parse_report(body, path + "/report"));
    fail(path, "unknown rule node '" + key + "'");
    return {};
  }

  std::vector<FieldError> errors;

 private:
  void fail(std::string path, std::string message) { errors.push_back({std::move(path), std::move(message)}); }

  std::int64_t integer(const nlohmann::json& obj, const char* key, const std::string& path) {
    auto it = obj.find(key);
    if (it == obj.end()) {
      fail(path + "/" + key, "missing");
      return 0;
    }
    if (!it->is_number_integer()) {
      fail(path + "/" + key, "expected integer");
      return 0;
    }
    return it->get<std::int64_t>();
  }

  Comparator comparator(const nlohmann::json& obj, const std::string& path) {
    auto it = obj.find("cmp");
    if (it == obj.end()) return Comparator::Greater;
    if (it->is_string()) {
      if (auto cmp = parse_comparator(it->get<std::string>())) return *cmp;
    }
    fail(path + "/cmp", "expected \">\" or \">=\"");
    return Comparator::Greater;
  }

  WindowCondition parse_window(const nlohmann::json& j, const std::string& path) {
    WindowCondition c;
    if (!j.is_object()) {
      fail(path, "expected object");
      return c;
    }
    auto ev = j.find("event");
    if (ev == j.end() || !ev->is_object()) {
      fail(path + "/event", "expected object with kind");
    } else {
      auto kind = ev->find("kind");
      std::optional<EventKind> parsed;
      if (kind != ev->end() && kind->is_string()) parsed = parse_event_kind(kind->get<std::string>());
      if (!parsed) {
        fail(path + "/event/kind", "unknown event kind");
      } else {
        c.event.kind = *parsed;
      }
      if (auto attrs = ev->find("attrs"); attrs != ev->end()) {
        if (!attrs->is_object()) {
          fail(path + "/event/attrs", "expected object");
        } else {
          for (const auto& [k, v] : attrs->items()) {
            if (!v.is_string()) {
              fail(path + "/event/attrs/" + k, "expected string");
            } else {
              c.event.attrs[k] = v.get<std::string>();
            }
          }
        }
      }
    }
    auto group = j.find("group_by");
    if (group == j.end() || !group->is_string()) {
      fail(path + "/group_by", "expected string");
    } else {
      c.group_by = group->get<std::string>();
    }
    c.window_s = integer(j, "window_s", path);
    c.cmp = comparator(j, path);
    c.threshold = integer(j, "threshold", path);
    return c;
  }

  ReportCondition parse_report(const nlohmann::json& j, const std::string& path) {
    ReportCondition c;
    if (!j.is_object()) {
      fail(path, "expected object");
      return c;
    }
    auto sel = j.find("selector");
    if (sel == j.end() || !sel->is_object() || sel->size() != 1) {
      fail(path + "/selector", "expected {\"severity\": label} or {\"score_gt\": x}");
    } else if (auto sev = sel->find("severity"); sev != sel->end()) {
      std::optional<Severity> label;
      if (sev->is_string()) label = parse_severity(sev->get<std::string>());
      if (!label) {
        fail(path + "/selector/severity", "unknown severity label");
      } else {
        c.selector = {ReportSelector::Kind::SeverityLabel, *label, 0.0};
      }
    } else if (auto score = sel->find("score_gt"); score != sel->end()) {
      if (!score->is_number()) {
        fail(path + "/selector/score_gt", "expected number");
      } else {
        c.selector = {ReportSelector::Kind::ScoreAbove, Severity::None, score->get<double>()};
      }
    } else {
      fail(path + "/selector", "expected severity or score_gt");
    }
    c.cmp = comparator(j, path);
    c.count = integer(j, "count", path);
    return c;
  }
};

void validate_node(const RuleExpr& node, const std::string& path, std::size_t depth,
                   std::vector<FieldError>& errors) {
  if (depth > kMaxRuleDepth) {
    errors.push_back({path, "rule tree deeper than " + std::to_string(kMaxRuleDepth)});
    return;
  }
  switch (node.kind) {
    case RuleExpr::Kind::AnyOf:
    case RuleExpr::Kind::AllOf: {
      const bool any = node.kind == RuleExpr::Kind::AnyOf;
      const std::string key = any ? "/or" : "/and";
      if (node.children.empty()) errors.push_back({path + key, any ? "empty disjunction" : "empty conjunction"});
      for (std::size_t i = 0; i < node.children.size(); ++i) {
        validate_node(node.children[i], path + key + "/" + std::to_string(i), depth + 1, errors);
      }
      break;
    }
    case RuleExpr::Kind::Window: {
      const auto& w = node.window;
      const auto p = path + "/window";
      if (w.threshold < 1) errors.push_back({p + "/threshold", "threshold must be >= 1"});
      if (w.window_s < kMinWindowSeconds || w.window_s > kMaxWindowSeconds) {
        errors.push_back({p + "/window_s", "window must be within [1s, 24h]"});
      }
      if (w.group_by.empty()) errors.push_back({p + "/group_by", "group_by must be nonempty"});
      break;
    }
    case RuleExpr::Kind::Report: {
      const auto& r = node.report;
      const auto p = path + "/report";
      if (r.count < 1) errors.push_back({p + "/count", "count must be >= 1"});
      if (r.selector.kind == ReportSelector::Kind::ScoreAbove &&
          !(r.selector.score >= 0.0 && r.selector.score <= 10.0)) {
        errors.push_back({p + "/selector/score_gt", "score_gt must be within [0, 10]"});
      }
      break;
    }
  }
}

bool contains_client_ip_group(const RuleExpr& rule) {
  const auto windows = rule.window_conditions();
  return std::any_of(windows.begin(), windows.end(),
                     [](const WindowCondition* w) { return w->group_by == attr::kClientIp; });
}

}  // namespace

std::string_view to_string(Comparator cmp) { return cmp == Comparator::Greater ? ">" : ">="; }

std::optional<Comparator> parse_comparator(std::string_view text) {
  if (text == ">") return Comparator::Greater;
  if (text == ">=") return Comparator::GreaterEqual;
  return std::nullopt;
}

std::string_view to_string(Severity s) {
  for (const auto& [k, name] : kSeverityNames) {
    if (k == s) return name;
  }
  return "none";
}

std::optional<Severity> parse_severity(std::string_view text) {
  for (const auto& [k, name] : kSeverityNames) {
    if (name == text) return k;
  }
  return std::nullopt;
}

bool EventPredicate::matches(const SecurityEvent& e) const {
  if (e.kind != kind) return false;
  for (const auto& [key, value] : attrs) {
    const auto* actual = e.attr(key);
    if (actual == nullptr || *actual != value) return false;
  }
  return true;
}

RuleExpr RuleExpr::any_of(std::vector<RuleExpr> children) {
  RuleExpr r;
  r.kind = Kind::AnyOf;
  r.children = std::move(children);
  return r;
}

RuleExpr RuleExpr::all_of(std::vector<RuleExpr> children) {
  RuleExpr r;
  r.kind = Kind::AllOf;
  r.children = std::move(children);
  return r;
}

RuleExpr RuleExpr::of(WindowCondition c) {
  RuleExpr r;
  r.kind = Kind::Window;
  r.window = std::move(c);
  return r;
}

RuleExpr RuleExpr::of(ReportCondition c) {
  RuleExpr r;
  r.kind = Kind::Report;
  r.report = c;
  return r;
}

std::size_t RuleExpr::depth() const {
  std::size_t deepest = 0;
  for (const auto& child : children) deepest = std::max(deepest, child.depth());
  return deepest + 1;
}

std::vector<const WindowCondition*> RuleExpr::window_conditions() const {
  std::vector<const WindowCondition*> out;
  if (kind == Kind::Window) out.push_back(&window);
  for (const auto& child : children) {
    auto sub = child.window_conditions();
    out.insert(out.end(), sub.begin(), sub.end());
  }
  return out;
}

std::vector<const ReportCondition*> RuleExpr::report_conditions() const {
  std::vector<const ReportCondition*> out;
  if (kind == Kind::Report) out.push_back(&report);
  for (const auto& child : children) {
    auto sub = child.report_conditions();
    out.insert(out.end(), sub.begin(), sub.end());
  }
  return out;
}

std::vector<FieldError> validate_rule(const RuleExpr& rule, const std::string& path) {
  std::vector<FieldError> errors;
  validate_node(rule, path, 1, errors);
  return errors;
}

nlohmann::json to_json(const RuleExpr& rule) {
  using nlohmann::json;
  switch (rule.kind) {
    case RuleExpr::Kind::AnyOf:
    case RuleExpr::Kind::AllOf: {
      json children = json::array();
      for (const auto& c : rule.children) children.push_back(to_json(c));
      return json{{rule.kind == RuleExpr::Kind::AnyOf ? "or" : "and", children}};
    }
    case RuleExpr::Kind::Window: {
      const auto& w = rule.window;
      json event{{"kind", to_string(w.event.kind)}};
      if (!w.event.attrs.empty()) event["attrs"] = w.event.attrs;
      return json{{"window",
                   {{"event", event},
                    {"group_by", w.group_by},
                    {"window_s", w.window_s},
                    {"cmp", to_string(w.cmp)},
                    {"threshold", w.threshold}}}};
    }
    case RuleExpr::Kind::Report: {
      const auto& r = rule.report;
      json selector = r.selector.kind == ReportSelector::Kind::SeverityLabel
                          ? json{{"severity", to_string(r.selector.label)}}
                          : json{{"score_gt", r.selector.score}};
      return json{{"report", {{"selector", selector}, {"cmp", to_string(r.cmp)}, {"count", r.count}}}};
    }
  }
  return nullptr;
}

RuleExpr rule_from_json(const nlohmann::json& j, const std::string& path) {
  RuleParser parser;
  RuleExpr rule = parser.parse(j, path);
  if (!parser.errors.empty()) {
    raise(ErrorCode::Schema, "malformed rule", std::move(parser.errors));
  }
  return rule;
}

std::string_view to_string(ActionKind kind) {
  for (const auto& [k, name] : kActionNames) {
    if (k == kind) return name;
  }
  return "alert";
}

std::optional<ActionKind> parse_action_kind(std::string_view text) {
  for (const auto& [k, name] : kActionNames) {
    if (name == text) return k;
  }
  return std::nullopt;
}

std::optional<std::int64_t> ActionSpec::block_duration_s() const {
  auto it = params.find("duration_s");
  if (it == params.end() || it->is_null()) return std::nullopt;
  return it->get<std::int64_t>();
}

nlohmann::json to_json(const ActionSpec& action) {
  nlohmann::json j{{"kind", to_string(action.kind)}};
  if (!action.params.empty()) j["params"] = action.params;
  return j;
}

ActionSpec action_from_json(const nlohmann::json& j, const std::string& path) {
  std::vector<FieldError> errors;
  ActionSpec a;
  if (!j.is_object()) {
    throw Error(ErrorCode::Schema, "malformed action at " + path, {{path, "expected object"}});
  }
  auto kind = j.find("kind");
  std::optional<ActionKind> parsed;
  if (kind != j.end() && kind->is_string()) parsed = parse_action_kind(kind->get<std::string>());
  if (!parsed) {
    errors.push_back({path + "/kind", "expected one of alert, block_ip, report"});
  } else {
    a.kind = *parsed;
  }
  if (auto params = j.find("params"); params != j.end() && !params->is_null()) {
    if (!params->is_object()) {
      errors.push_back({path + "/params", "expected object"});
    } else {
      a.params = *params;
      if (auto d = params->find("duration_s"); d != params->end() && !d->is_null()) {
        if (!d->is_number_integer() || d->get<std::int64_t>() < 1) {
          errors.push_back({path + "/params/duration_s", "expected positive integer seconds"});
        }
      }
    }
  }
  if (!errors.empty()) {
    raise(ErrorCode::Schema, "malformed action", std::move(errors));
  }
  return a;
}

std::vector<ActionSpec> actions_from_json(const nlohmann::json& j, const std::string& path) {
  if (!j.is_array()) throw Error(ErrorCode::Schema, "actions must be an array", {{path, "expected array"}});
  std::vector<ActionSpec> out;
  std::vector<FieldError> errors;
  for (std::size_t i = 0; i < j.size(); ++i) {
    try {
      out.push_back(action_from_json(j[i], path + "/" + std::to_string(i)));
    } catch (const Error& e) {
      errors.insert(errors.end(), e.details().begin(), e.details().end());
    }
  }
  if (!errors.empty()) {
    raise(ErrorCode::Schema, "malformed actions", std::move(errors));
  }
  return out;
}

std::vector<FieldError> validate_actions(const std::vector<ActionSpec>& actions, const RuleExpr& rule) {
  std::vector<FieldError> errors;
  for (std::size_t i = 0; i < actions.size(); ++i) {
    if (actions[i].kind == ActionKind::BlockIp && !contains_client_ip_group(rule)) {
      errors.push_back({"/actions/" + std::to_string(i),
                        "block_ip requires a window condition grouped by client_ip"});
    }
  }
  return errors;
}

}  // namespace warden

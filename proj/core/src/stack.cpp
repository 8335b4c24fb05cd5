#include "warden/stack.hpp"

#include <algorithm>
#include <fstream>

namespace warden {

using nlohmann::json;

namespace {

bool report_only(const PolicyInstance& p) {
  return p.rule.window_conditions().empty() && !p.rule.report_conditions().empty();
}

std::shared_ptr<const VulnDatabase> open_feed(const std::filesystem::path& path) {
  if (path.empty()) return std::make_shared<const VulnDatabase>();
  return std::make_shared<const VulnDatabase>(load_feed(path));
}

}  // namespace

json to_json(const IngestResult& r) {
  json rejected = json::array();
  for (const auto& [index, errors] : r.rejected) {
    json e = json::array();
    for (const auto& f : errors) e.push_back({{"path", f.path}, {"message", f.message}});
    rejected.push_back({{"index", index}, {"errors", e}});
  }
  return {{"accepted", r.accepted}, {"duplicates", r.duplicates}, {"rejected", rejected}};
}

Stack::Stack(StackOptions options)
    : options_(std::move(options)),
      broker_(options_.data_dir, options_.broker),
      incidents_(options_.data_dir),
      blocklist_(options_.data_dir),
      enactor_(blocklist_, incidents_, options_.clock, options_.data_dir),
      runtime_(enactor_, incidents_, blocklist_, options_.clock, options_.detection),
      registry_(options_.data_dir),
      policies_(options_.data_dir),
      feed_(open_feed(options_.feed_path)),
      scans_(feed_, options_.clock, options_.data_dir) {
  if (!options_.templates_dir.empty()) catalog_.load_directory(options_.templates_dir);
  runtime_.set_policy_lookup([this](const std::string& id) { return policies_.get(id); });
  // Previously onboarded runtime policies resume with empty windows.
  for (const auto& p : policies_.list()) {
    if (p.enabled && p.is_runtime()) deploy(p);
  }
}

Stack::~Stack() = default;

void Stack::deploy(const PolicyInstance& p) { runtime_.deploy(p, &broker_); }

InfrastructureNode Stack::register_node(const json& descriptor) {
  return registry_.register_node(node_from_json(descriptor), options_.clock->now_ms());
}

std::vector<InfrastructureNode> Stack::nodes() const { return registry_.nodes(); }

PolicyInstance Stack::build_instance(const json& document) const {
  if (!document.is_object()) raise(ErrorCode::Validation, "invalid policy document", {{"", "expected object"}});
  if (document.contains("rule")) return instance_from_json(document);

  if (!document.contains("template_id") || !document["template_id"].is_string()) {
    raise(ErrorCode::Validation, "invalid policy document", {{"/template_id", "required unless a rule is given"}});
  }
  const auto template_id = document["template_id"].get<std::string>();
  auto t = catalog_.get(template_id);
  if (!t) throw Error(ErrorCode::UnknownTemplate, "no template " + template_id);
  Scope scope;
  if (document.contains("scope")) scope = scope_from_json(document["scope"]);
  auto p = instantiate(*t, document.value("bindings", json::object()), scope, "", options_.clock->now_ms());
  if (document.contains("name") && document["name"].is_string()) p.name = document["name"].get<std::string>();
  return p;
}

OnboardResult Stack::onboard_policy(const json& document) {
  auto instance = build_instance(document);
  if (instance.scope.ns && !registry_.has_namespace(*instance.scope.ns)) {
    raise(ErrorCode::UnknownNamespace, "scope is not a registered namespace",
          {{"/scope/namespace", "unknown namespace " + *instance.scope.ns}});
  }
  if (instance.is_runtime()) {
    if (!instance.rule.report_conditions().empty()) {
      throw Error(ErrorCode::NotRuntimeRule, "a policy cannot mix window and report conditions");
    }
    const auto leaves = instance.rule.window_conditions();
    for (const auto* leaf : leaves) {
      if (leaf->group_by != leaves.front()->group_by) {
        throw Error(ErrorCode::NotRuntimeRule, "all window conditions of a policy must share one group_by attribute");
      }
    }
  }
  if (instance.created_ts == 0) instance.created_ts = options_.clock->now_ms();
  instance.enabled = true;
  instance = policies_.add(std::move(instance));

  OnboardResult result{instance, std::nullopt, std::nullopt};
  if (instance.is_runtime()) {
    try {
      deploy(instance);
    } catch (...) {
      policies_.remove(instance.policy_id);
      throw;
    }
  } else if (report_only(instance)) {
    std::vector<std::string> scope;
    if (instance.scope.ns) scope.push_back(*instance.scope.ns);
    try {
      result.scan_id = trigger_scan(scope);
    } catch (const Error& e) {
      result.scan_error = std::string(to_string(e.code())) + ": " + e.what();
    }
  }
  return result;
}

std::vector<PolicyInstance> Stack::policies() const { return policies_.list(); }

std::optional<PolicyInstance> Stack::policy(const std::string& policy_id) const { return policies_.get(policy_id); }

PolicyInstance Stack::remove_policy(const std::string& policy_id) {
  auto removed = policies_.remove(policy_id);
  if (runtime_.is_deployed(policy_id)) runtime_.undeploy(policy_id);
  return removed;
}

std::vector<PolicyTemplate> Stack::templates(std::string_view query, const std::vector<std::string>& tags) const {
  return catalog_.search(query, tags);
}

IngestResult Stack::ingest_events(const json& batch) {
  const json& events = batch.is_object() && batch.contains("events") ? batch["events"] : batch;
  if (!events.is_array()) raise(ErrorCode::Validation, "invalid event batch", {{"", "expected array of events"}});
  if (events.size() > kMaxEventBatch) {
    raise(ErrorCode::Validation, "event batch too large",
          {{"", std::to_string(events.size()) + " events exceed the limit of " + std::to_string(kMaxEventBatch)}});
  }
  IngestResult result;
  for (std::size_t i = 0; i < events.size(); ++i) {
    try {
      auto r = broker_.publish(event_from_json(events[i]));
      if (r.duplicate) {
        ++result.duplicates;
      } else {
        ++result.accepted;
      }
    } catch (const Error& e) {
      if (e.code() == ErrorCode::Storage) throw;
      auto details = e.details();
      if (details.empty()) details.push_back({"", e.what()});
      result.rejected.emplace_back(i, std::move(details));
      ++events_rejected_;
    }
  }
  return result;
}

PublishResult Stack::publish(SecurityEvent event) { return broker_.publish(std::move(event)); }

IncidentPage Stack::incidents(const IncidentFilter& filter, std::size_t limit,
                              const std::optional<std::string>& cursor) const {
  return incidents_.list(filter, limit, cursor);
}

std::optional<Incident> Stack::incident(const std::string& incident_id) const { return incidents_.get(incident_id); }

Incident Stack::set_incident_status(const std::string& incident_id, IncidentStatus status) {
  return incidents_.set_status(incident_id, status);
}

std::vector<AlertRow> Stack::alerts() const { return incidents_.alerts(); }

std::string Stack::trigger_scan(std::vector<std::string> scope) {
  for (const auto& ns : scope) {
    if (!registry_.has_namespace(ns)) {
      raise(ErrorCode::UnknownNamespace, "scan scope is not a registered namespace", {{"/scope", "unknown namespace " + ns}});
    }
  }
  std::vector<ComponentManifest> manifests;
  if (!options_.manifests_dir.empty() && std::filesystem::exists(options_.manifests_dir)) {
    manifests = load_manifests(options_.manifests_dir);
  }
  return scans_.start(std::move(scope), std::move(manifests), registry_.components(),
                      [this](const VulnReport& report) { on_scan_complete(report); });
}

void Stack::on_scan_complete(const VulnReport& report) {
  for (const auto& p : policies_.list()) {
    if (!p.enabled || !report_only(p)) continue;
    if (p.scope.ns && !report.in_scope(*p.scope.ns)) continue;
    if (auto match = match_report(report, p)) runtime_.on_match(*match);
  }
}

std::optional<ScanRecord> Stack::scan(const std::string& scan_id) const { return scans_.get(scan_id); }

bool Stack::wait_scan(const std::string& scan_id, std::chrono::milliseconds timeout) const {
  return scans_.wait(scan_id, timeout);
}

std::vector<BlockEntry> Stack::blocklist() const { return blocklist_.active(options_.clock->now_ms()); }

bool Stack::is_blocked(std::string_view ip) const { return blocklist_.is_blocked(ip, options_.clock->now_ms()); }

EnactmentRecord Stack::unblock(std::string_view ip, const std::string& operator_name) {
  return enactor_.unblock(ip, operator_name);
}

void Stack::set_enforcement_hook(std::shared_ptr<EnforcementHook> hook) { enactor_.set_hook(std::move(hook)); }

json Stack::metrics() const {
  const auto now = options_.clock->now_ms();
  return {{"events", {{"stored", broker_.size()}, {"last_seq", broker_.last_seq()}, {"rejected", events_rejected_.load()}}},
          {"detection", to_json(runtime_.metrics())},
          {"incidents", incidents_.size()},
          {"alerts", incidents_.alerts().size()},
          {"blocklist", blocklist_.active(now).size()},
          {"policies", policies_.list().size()},
          {"deployed", runtime_.deployed().size()},
          {"scans", scans_.list().size()},
          {"nodes", registry_.nodes().size()}};
}

void Stack::flush() const { broker_.flush(); }

ReplayState replay_log(const std::filesystem::path& source_dir, const DetectionOptions& options) {
  auto clock = std::make_shared<ManualClock>(0);
  IncidentStore incidents;
  Blocklist blocklist;
  Enactor enactor(blocklist, incidents, clock);
  DetectionRuntime runtime(enactor, incidents, blocklist, clock, options);

  PolicyStore stored(source_dir);
  for (const auto& p : stored.list()) {
    if (p.enabled && p.is_runtime()) runtime.deploy(p);
  }
  runtime.set_policy_lookup([&stored](const std::string& id) { return stored.get(id); });

  ReplayState state;
  std::ifstream in(source_dir / "events.jsonl");
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) break;  // torn tail
    auto event = event_from_json(j);
    if (event.ts > clock->now_ms()) clock->set(event.ts);
    runtime.process(event);
    ++state.events;
  }

  auto all = incidents.all();
  std::sort(all.begin(), all.end(), [](const Incident& a, const Incident& b) {
    return std::tie(a.match.matched_at, a.policy_id, a.match.group_key) <
           std::tie(b.match.matched_at, b.policy_id, b.match.group_key);
  });
  for (const auto& i : all) {
    json actions = json::array();
    for (const auto& r : i.actions_taken) {
      json a = {{"action", r.action}, {"outcome", r.outcome == Outcome::Applied ? "applied" : "failed"}};
      if (r.action == "block_ip") a["target"] = r.target;
      actions.push_back(a);
    }
    state.incidents.push_back({{"policy_id", i.policy_id},
                               {"group_key", i.match.group_key},
                               {"namespace", i.ns},
                               {"matched_at", i.match.matched_at},
                               {"created_ts", i.created_ts},
                               {"evidence", i.match.evidence},
                               {"actions", actions}});
  }
  for (const auto& b : blocklist.active(clock->now_ms())) {
    json entry = {{"ip", b.ip}, {"created_ts", b.created_ts}};
    if (b.expires_ts) entry["expires_ts"] = *b.expires_ts;
    state.blocklist.push_back(entry);
  }
  return state;
}

}  // namespace warden

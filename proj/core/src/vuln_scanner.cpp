#include "warden/vuln_scanner.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <fstream>
#include <set>

namespace warden {

using nlohmann::json;

std::optional<Version> parse_version(std::string_view text) {
  if (text.empty()) return std::nullopt;
  Version v;
  std::size_t start = 0;
  while (true) {
    auto dot = text.find('.', start);
    auto part = text.substr(start, dot == std::string_view::npos ? std::string_view::npos : dot - start);
    if (part.empty()) return std::nullopt;
    std::uint64_t n = 0;
    auto [ptr, ec] = std::from_chars(part.data(), part.data() + part.size(), n);
    if (ec != std::errc{} || ptr != part.data() + part.size()) return std::nullopt;
    v.parts.push_back(n);
    if (dot == std::string_view::npos) break;
    start = dot + 1;
  }
  return v;
}

int compare_versions(const Version& a, const Version& b) {
  const auto n = std::max(a.parts.size(), b.parts.size());
  for (std::size_t i = 0; i < n; ++i) {
    const auto x = i < a.parts.size() ? a.parts[i] : 0;
    const auto y = i < b.parts.size() ? b.parts[i] : 0;
    if (x != y) return x < y ? -1 : 1;
  }
  return 0;
}

int compare_versions(std::string_view a, std::string_view b) {
  auto va = parse_version(a);
  auto vb = parse_version(b);
  if (!va || !vb) throw Error(ErrorCode::Validation, "invalid version '" + std::string(va ? b : a) + "'");
  return compare_versions(*va, *vb);
}

namespace {

const std::string& require_string(const json& j, const char* key, const std::string& path,
                                  std::vector<FieldError>& errors) {
  static const std::string empty;
  if (!j.contains(key) || !j.at(key).is_string() || j.at(key).get_ref<const std::string&>().empty()) {
    errors.push_back({path + "/" + key, "required non-empty string"});
    return empty;
  }
  return j.at(key).get_ref<const std::string&>();
}

}  // namespace

ComponentManifest manifest_from_json(const json& j) {
  std::vector<FieldError> errors;
  if (!j.is_object()) raise(ErrorCode::Schema, "invalid manifest", {{"", "expected object"}});
  ComponentManifest m;
  m.component = require_string(j, "component", "", errors);
  m.ns = require_string(j, "namespace", "", errors);
  if (!j.contains("packages") || !j.at("packages").is_array()) {
    errors.push_back({"/packages", "required array"});
  } else {
    std::set<std::pair<std::string, std::string>> seen;
    for (std::size_t i = 0; i < j.at("packages").size(); ++i) {
      const auto& p = j.at("packages")[i];
      const auto path = "/packages/" + std::to_string(i);
      if (!p.is_object()) {
        errors.push_back({path, "expected object"});
        continue;
      }
      PackageRef ref{require_string(p, "name", path, errors), require_string(p, "version", path, errors)};
      if (!ref.version.empty() && !parse_version(ref.version)) errors.push_back({path + "/version", "not a numeric dotted version"});
      if (!seen.insert({ref.name, ref.version}).second) errors.push_back({path, "duplicate package " + ref.name + "@" + ref.version});
      m.packages.push_back(std::move(ref));
    }
  }
  if (!errors.empty()) raise(ErrorCode::Schema, "invalid manifest", std::move(errors));
  return m;
}

json to_json(const ComponentManifest& m) {
  json packages = json::array();
  for (const auto& p : m.packages) packages.push_back({{"name", p.name}, {"version", p.version}});
  return {{"component", m.component}, {"namespace", m.ns}, {"packages", packages}};
}

std::vector<ComponentManifest> load_manifests(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (entry.is_regular_file() && name.size() > 14 && name.ends_with(".manifest.json")) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<ComponentManifest> out;
  for (const auto& f : files) {
    std::ifstream in(f);
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw Error(ErrorCode::Schema, f.string() + ": invalid JSON");
    out.push_back(manifest_from_json(j));
  }
  return out;
}

bool VulnEntry::affects(std::string_view version) const {
  auto v = parse_version(version);
  if (!v) return false;
  return compare_versions(*parse_version(lo), *v) <= 0 && compare_versions(*v, *parse_version(hi)) <= 0;
}

VulnDatabase::VulnDatabase(std::vector<VulnEntry> entries) : entries_(std::move(entries)) {
  for (std::size_t i = 0; i < entries_.size(); ++i) by_package_[entries_[i].package].push_back(i);
}

std::vector<const VulnEntry*> VulnDatabase::for_package(const std::string& package) const {
  std::vector<const VulnEntry*> out;
  if (auto it = by_package_.find(package); it != by_package_.end()) {
    for (auto i : it->second) out.push_back(&entries_[i]);
  }
  return out;
}

VulnDatabase parse_feed(const json& j) {
  if (!j.is_array()) raise(ErrorCode::Schema, "invalid feed", {{"", "expected array"}});
  std::vector<FieldError> errors;
  std::vector<VulnEntry> entries;
  std::set<std::tuple<std::string, std::string, std::string, std::string>> seen;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& e = j[i];
    const auto path = "/" + std::to_string(i);
    if (!e.is_object()) {
      errors.push_back({path, "expected object"});
      continue;
    }
    VulnEntry v;
    v.package = require_string(e, "package", path, errors);
    v.advisory_id = require_string(e, "advisory_id", path, errors);
    if (!e.contains("score") || !e.at("score").is_number()) {
      errors.push_back({path + "/score", "required number"});
    } else {
      v.score = e.at("score").get<double>();
      if (!(v.score >= 0.0 && v.score <= 10.0)) errors.push_back({path + "/score", "must be within [0, 10]"});
    }
    if (e.contains("severity")) {
      const auto& s = e.at("severity");
      auto label = s.is_string() ? parse_severity(s.get<std::string>()) : std::nullopt;
      if (!label) errors.push_back({path + "/severity", "unknown severity label"});
      v.severity = label;
    }
    const auto affected = e.contains("affected") ? e.at("affected") : json();
    if (!affected.is_object()) {
      errors.push_back({path + "/affected", "required object"});
    } else if (affected.contains("exact")) {
      v.lo = v.hi = affected.at("exact").is_string() ? affected.at("exact").get<std::string>() : "";
    } else {
      v.lo = affected.value("lo", "");
      v.hi = affected.value("hi", "");
    }
    auto lo = parse_version(v.lo);
    auto hi = parse_version(v.hi);
    if (affected.is_object() && (!lo || !hi)) {
      errors.push_back({path + "/affected", "versions must be numeric dotted"});
    } else if (lo && hi && compare_versions(*lo, *hi) > 0) {
      errors.push_back({path + "/affected", "lo must not exceed hi"});
    }
    if (errors.empty() && !seen.insert({v.package, v.lo, v.hi, v.advisory_id}).second) {
      raise(ErrorCode::DuplicateEntry, "duplicate feed entry",
            {{path, v.package + " " + v.lo + ".." + v.hi + " " + v.advisory_id}});
    }
    entries.push_back(std::move(v));
  }
  if (!errors.empty()) raise(ErrorCode::Schema, "invalid feed", std::move(errors));
  return VulnDatabase(std::move(entries));
}

VulnDatabase load_feed(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Schema, "cannot read feed " + path.string());
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw Error(ErrorCode::Schema, path.string() + ": invalid JSON");
  return parse_feed(j);
}

Severity severity_from_score(double score) {
  if (!(score >= 0.0 && score <= 10.0)) throw Error(ErrorCode::Range, "score outside [0, 10]");
  if (score == 0.0) return Severity::None;
  if (score < 4.0) return Severity::Low;
  if (score < 7.0) return Severity::Medium;
  if (score < 9.0) return Severity::High;
  return Severity::Critical;
}

bool VulnReport::in_scope(const std::string& ns) const {
  return scope.empty() || std::find(scope.begin(), scope.end(), ns) != scope.end();
}

json to_json(const VulnFinding& f) {
  return {{"finding_id", f.finding_id}, {"component", f.component},
          {"namespace", f.ns},          {"advisory_id", f.advisory_id},
          {"package", f.package},       {"version", f.version},
          {"severity", to_string(f.severity)}, {"score", f.score}};
}

VulnFinding finding_from_json(const json& j) {
  VulnFinding f;
  f.finding_id = j.at("finding_id").get<std::string>();
  f.component = j.at("component").get<std::string>();
  f.ns = j.at("namespace").get<std::string>();
  f.advisory_id = j.at("advisory_id").get<std::string>();
  f.package = j.at("package").get<std::string>();
  f.version = j.at("version").get<std::string>();
  f.severity = parse_severity(j.at("severity").get<std::string>()).value_or(Severity::None);
  f.score = j.at("score").get<double>();
  return f;
}

json to_json(const VulnReport& r) {
  json findings = json::array();
  for (const auto& f : r.findings) findings.push_back(to_json(f));
  json components = json::array();
  for (const auto& c : r.components_scanned) components.push_back({{"component", c.component}, {"namespace", c.ns}});
  // Per-namespace view for consumers that render reports by application.
  json by_ns = json::object();
  for (const auto& f : r.findings) {
    auto& group = by_ns[f.ns];
    if (group.is_null()) group = {{"findings", 0}, {"by_severity", json::object()}};
    group["findings"] = group["findings"].get<int>() + 1;
    auto& sev = group["by_severity"][std::string(to_string(f.severity))];
    sev = sev.is_null() ? 1 : sev.get<int>() + 1;
  }
  return {{"scan_id", r.scan_id},
          {"started_ts", r.started_ts},
          {"finished_ts", r.finished_ts},
          {"scope", r.scope},
          {"findings", findings},
          {"components_scanned", components},
          {"component_duration_ms", r.component_duration_ms},
          {"duration_ms", r.duration_ms},
          {"namespaces", by_ns}};
}

VulnReport report_from_json(const json& j) {
  VulnReport r;
  r.scan_id = j.at("scan_id").get<std::string>();
  r.started_ts = j.at("started_ts").get<TimestampMs>();
  r.finished_ts = j.at("finished_ts").get<TimestampMs>();
  r.scope = j.at("scope").get<std::vector<std::string>>();
  for (const auto& f : j.at("findings")) r.findings.push_back(finding_from_json(f));
  for (const auto& c : j.at("components_scanned")) {
    r.components_scanned.push_back({c.at("component").get<std::string>(), c.at("namespace").get<std::string>()});
  }
  r.component_duration_ms = j.at("component_duration_ms").get<std::map<std::string, std::int64_t>>();
  r.duration_ms = j.at("duration_ms").get<std::int64_t>();
  return r;
}

VulnReport scan(const ScanRequest& request, const VulnDatabase& db, const Clock& clock) {
  VulnReport report;
  report.scan_id = request.scan_id;
  report.scope = request.scope;
  report.started_ts = clock.now_ms();
  const auto wall_start = std::chrono::steady_clock::now();

  std::map<ComponentRef, const ComponentManifest*> manifests;
  for (const auto& m : request.manifests) {
    if (report.in_scope(m.ns)) manifests[{m.component, m.ns}] = &m;
  }
  std::vector<FieldError> missing;
  for (const auto& c : request.registered) {
    if (report.in_scope(c.ns) && !manifests.contains(c)) missing.push_back({"/" + c.ns + "/" + c.component, "no manifest"});
  }
  if (!missing.empty()) raise(ErrorCode::Coverage, "scan would not cover every registered component", std::move(missing));

  for (const auto& [ref, m] : manifests) {
    const auto t0 = std::chrono::steady_clock::now();
    for (const auto& pkg : m->packages) {
      for (const auto* entry : db.for_package(pkg.name)) {
        if (!entry->affects(pkg.version)) continue;
        VulnFinding f;
        f.component = m->component;
        f.ns = m->ns;
        f.advisory_id = entry->advisory_id;
        f.package = pkg.name;
        f.version = pkg.version;
        f.score = entry->score;
        f.severity = entry->severity.value_or(severity_from_score(entry->score));
        f.finding_id = f.ns + "/" + f.component + "/" + f.package + "@" + f.version + "/" + f.advisory_id;
        report.findings.push_back(std::move(f));
      }
    }
    report.components_scanned.push_back(ref);
    report.component_duration_ms[ref.ns + "/" + ref.component] =
        std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();
  }
  report.finished_ts = std::max(report.started_ts, clock.now_ms());
  report.duration_ms =
      std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - wall_start).count();
  return report;
}

namespace {

bool picks(const ReportSelector& s, const VulnFinding& f) {
  return s.kind == ReportSelector::Kind::SeverityLabel ? f.severity == s.label : f.score > s.score;
}

bool evaluate(const RuleExpr& node, const std::vector<const VulnFinding*>& findings, std::set<std::string>& evidence) {
  switch (node.kind) {
    case RuleExpr::Kind::Report: {
      std::vector<std::string> picked;
      for (const auto* f : findings) {
        if (picks(node.report.selector, *f)) picked.push_back(f->finding_id);
      }
      const bool ok = satisfies(node.report.cmp, static_cast<std::int64_t>(picked.size()), node.report.count);
      if (ok) evidence.insert(picked.begin(), picked.end());
      return ok;
    }
    case RuleExpr::Kind::Window:
      throw Error(ErrorCode::Semantic, "window conditions cannot be evaluated against a scan report");
    case RuleExpr::Kind::AnyOf: {
      bool any = false;
      for (const auto& child : node.children) any = evaluate(child, findings, evidence) || any;
      return any;
    }
    case RuleExpr::Kind::AllOf: {
      std::set<std::string> collected;
      bool all = true;
      for (const auto& child : node.children) all = evaluate(child, findings, collected) && all;
      if (all) evidence.insert(collected.begin(), collected.end());
      return all;
    }
  }
  return false;
}

}  // namespace

std::optional<RuleMatch> match_report(const VulnReport& report, const PolicyInstance& policy) {
  if (policy.scope.ns && !report.in_scope(*policy.scope.ns)) {
    throw Error(ErrorCode::ScopeMismatch,
                "policy " + policy.policy_id + " scope " + *policy.scope.ns + " outside report " + report.scan_id);
  }
  std::vector<const VulnFinding*> findings;
  for (const auto& f : report.findings) {
    if (policy.scope.ns && f.ns != *policy.scope.ns) continue;
    if (policy.scope.component && f.component != *policy.scope.component) continue;
    findings.push_back(&f);
  }
  std::set<std::string> evidence;
  if (!evaluate(policy.rule, findings, evidence)) return std::nullopt;

  RuleMatch m;
  m.policy_id = policy.policy_id;
  m.ns = policy.scope.ns.value_or("");
  m.group_key = policy.scope.ns.value_or("*");
  if (policy.scope.component) m.group_key += "/" + *policy.scope.component;
  m.matched_at = report.finished_ts;
  for (const auto* f : findings) {
    if (evidence.contains(f->finding_id)) m.evidence.push_back(f->finding_id);
  }
  json bindings = json::object();
  for (const auto& [k, v] : policy.bindings) bindings[k] = v;
  m.condition_snapshot = {{"rule", to_json(policy.rule)}, {"bindings", bindings}, {"scan_id", report.scan_id}};
  return m;
}

std::string_view to_string(ScanStatus s) {
  switch (s) {
    case ScanStatus::Running: return "running";
    case ScanStatus::Completed: return "completed";
    case ScanStatus::Failed: return "failed";
  }
  return "failed";
}

json to_json(const ScanRecord& r) {
  json j = {{"scan_id", r.scan_id},
            {"status", to_string(r.status)},
            {"scope", r.scope},
            {"requested_ts", r.requested_ts}};
  if (r.report) j["report"] = to_json(*r.report);
  if (r.error) j["error"] = *r.error;
  return j;
}

ScanService::ScanService(std::shared_ptr<const VulnDatabase> db, std::shared_ptr<Clock> clock,
                         std::filesystem::path data_dir)
    : db_(std::move(db)), clock_(std::move(clock)) {
  if (data_dir.empty()) return;
  scans_dir_ = data_dir / "scans";
  std::filesystem::create_directories(scans_dir_);
  for (const auto& entry : std::filesystem::directory_iterator(scans_dir_)) {
    if (entry.path().extension() != ".json") continue;
    std::ifstream in(entry.path());
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.contains("report")) continue;
    ScanRecord r;
    r.scan_id = j.at("scan_id").get<std::string>();
    r.status = ScanStatus::Completed;
    r.scope = j.at("scope").get<std::vector<std::string>>();
    r.requested_ts = j.at("requested_ts").get<TimestampMs>();
    r.report = report_from_json(j.at("report"));
    const auto n = std::strtoull(r.scan_id.c_str() + std::min<std::size_t>(5, r.scan_id.size()), nullptr, 10);
    next_id_ = std::max<std::uint64_t>(next_id_, n + 1);
    records_.emplace(r.scan_id, std::move(r));
  }
}

ScanService::~ScanService() {
  for (auto& t : workers_) {
    if (t.joinable()) t.join();
  }
}

std::string ScanService::start(std::vector<std::string> scope, std::vector<ComponentManifest> manifests,
                               std::vector<ComponentRef> registered, Completion on_complete) {
  ScanRequest request{"", std::move(scope), std::move(manifests), std::move(registered)};
  // Coverage is checked up front so callers get the error synchronously.
  std::vector<FieldError> missing;
  for (const auto& c : request.registered) {
    if (!request.scope.empty() && std::find(request.scope.begin(), request.scope.end(), c.ns) == request.scope.end()) {
      continue;
    }
    const bool found = std::any_of(request.manifests.begin(), request.manifests.end(),
                                   [&](const ComponentManifest& m) { return m.component == c.component && m.ns == c.ns; });
    if (!found) missing.push_back({"/" + c.ns + "/" + c.component, "no manifest"});
  }
  if (!missing.empty()) raise(ErrorCode::Coverage, "scan would not cover every registered component", std::move(missing));

  std::lock_guard lock(mutex_);
  char id[32];
  std::snprintf(id, sizeof id, "scan-%06llu", static_cast<unsigned long long>(next_id_++));
  request.scan_id = id;
  ScanRecord record{id, ScanStatus::Running, request.scope, clock_->now_ms(), std::nullopt, std::nullopt};
  records_.emplace(id, record);
  workers_.emplace_back([this, request = std::move(request), on_complete = std::move(on_complete)] {
    ScanRecord done;
    {
      std::lock_guard lock(mutex_);
      done = records_.at(request.scan_id);
    }
    try {
      done.report = scan(request, *db_, *clock_);
      done.status = ScanStatus::Completed;
      persist(done);
    } catch (const std::exception& e) {
      done.status = ScanStatus::Failed;
      done.error = e.what();
    }
    if (done.report && on_complete) {
      try {
        on_complete(*done.report);
      } catch (const std::exception& e) {
        done.error = std::string("policy matching failed: ") + e.what();
      }
    }
    {
      std::lock_guard lock(mutex_);
      records_[done.scan_id] = done;
    }
    changed_.notify_all();
  });
  return id;
}

std::optional<ScanRecord> ScanService::get(const std::string& scan_id) const {
  std::lock_guard lock(mutex_);
  auto it = records_.find(scan_id);
  if (it == records_.end()) return std::nullopt;
  return it->second;
}

bool ScanService::wait(const std::string& scan_id, std::chrono::milliseconds timeout) const {
  std::unique_lock lock(mutex_);
  return changed_.wait_for(lock, timeout, [&] {
    auto it = records_.find(scan_id);
    return it != records_.end() && it->second.status != ScanStatus::Running;
  }) && records_.contains(scan_id);
}

std::vector<ScanRecord> ScanService::list() const {
  std::lock_guard lock(mutex_);
  std::vector<ScanRecord> out;
  for (const auto& [id, r] : records_) out.push_back(r);
  return out;
}

void ScanService::persist(const ScanRecord& record) const {
  if (scans_dir_.empty()) return;
  const auto path = scans_dir_ / (record.scan_id + ".json");
  const auto tmp = scans_dir_ / (record.scan_id + ".json.tmp");
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw Error(ErrorCode::Storage, "cannot write " + tmp.string());
    out << to_json(record).dump(2) << '\n';
    if (!out) throw Error(ErrorCode::Storage, "cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace warden

#include "warden/demo.hpp"

#include <httplib.h>

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <iomanip>
#include <random>
#include <set>
#include <sstream>

#include "warden/client.hpp"
#include "warden/gateway.hpp"
#include "warden/stack.hpp"
#include "warden/target.hpp"

namespace warden {

using nlohmann::json;

namespace {

constexpr TimestampMs kVirtualEpoch = 1'700'000'000'000;
constexpr const char* kProbeIp = "198.51.100.250";

json load_json_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw Error(ErrorCode::Validation, "cannot read " + p.string());
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw Error(ErrorCode::Schema, p.string() + " is not JSON");
  return j;
}

json resolve(const json& entry, const std::filesystem::path& base_dir) {
  if (!entry.is_string()) return entry;
  std::filesystem::path p = entry.get<std::string>();
  return load_json_file(p.is_absolute() ? p : base_dir / p);
}

// HTTP client for the demo target; one per thread.
class TrafficClient {
 public:
  explicit TrafficClient(const std::string& base_url) : client_(base_url) {
    client_.set_keep_alive(true);
    client_.set_connection_timeout(std::chrono::seconds(2));
    client_.set_read_timeout(std::chrono::seconds(10));
  }

  // Returns the HTTP status, or -1 when the request did not complete.
  int login(const std::string& ip, const std::string& user, const std::string& password,
            std::string* token = nullptr) {
    httplib::Headers h{{"X-Forwarded-For", ip}};
    auto res = client_.Post("/login", h, json{{"user", user}, {"password", password}}.dump(), "application/json");
    if (!res) return -1;
    if (res->status == 200 && token) {
      auto body = json::parse(res->body, nullptr, false);
      if (!body.is_discarded()) *token = body.value("token", "");
    }
    return res->status;
  }

  int data(const std::string& ip, const std::string& token) {
    httplib::Headers h{{"X-Forwarded-For", ip}};
    if (!token.empty()) h.emplace("Authorization", "Bearer " + token);
    auto res = client_.Get("/data", h);
    return res ? res->status : -1;
  }

 private:
  httplib::Client client_;
};

void count(BenignStats& s, int status) {
  ++s.requests;
  if (status >= 200 && status < 300) {
    ++s.ok;
  } else if (status == 403) {
    ++s.rejected;
  } else if (status == 401) {
    ++s.denied;
  } else {
    ++s.errors;
  }
}

// Well-behaved clients: log in, read data, occasionally mistype a password
// (bounded per client per minute).
class BenignDriver {
 public:
  BenignDriver(std::vector<std::string> ips, int failures_per_ip, std::uint64_t seed, std::shared_ptr<Clock> clock)
      : failures_per_ip_(failures_per_ip), rng_(seed), clock_(std::move(clock)) {
    for (auto& ip : ips) clients_.push_back({std::move(ip), {}, {}});
  }

  int step(TrafficClient& http) {
    auto& c = clients_[next_++ % clients_.size()];
    std::uniform_real_distribution<double> u(0, 1);
    if (!c.token.empty() && u(rng_) < 0.05) c.token.clear();
    if (!c.token.empty()) return http.data(c.ip, c.token);

    const auto now = clock_->now_ms();
    while (!c.failures.empty() && c.failures.front() <= now - 60'000) c.failures.pop_front();
    if (static_cast<int>(c.failures.size()) < failures_per_ip_ && u(rng_) < 0.3) {
      c.failures.push_back(now);
      return http.login(c.ip, "alice", "not-the-password");
    }
    return http.login(c.ip, "alice", "wonderland", &c.token);
  }

 private:
  struct Client {
    std::string ip;
    std::string token;
    std::deque<TimestampMs> failures;
  };
  std::vector<Client> clients_;
  std::size_t next_ = 0;
  int failures_per_ip_;
  std::mt19937_64 rng_;
  std::shared_ptr<Clock> clock_;
};

void validate_profile(const BenignProfile& b) {
  std::vector<FieldError> errs;
  if (!(b.rate > 0)) errs.push_back({"/benign/rate", "must be > 0"});
  if (b.ips < 1) errs.push_back({"/benign/ips", "must be >= 1"});
  if (b.duration_s < 0) errs.push_back({"/benign/duration_s", "must be >= 0"});
  if (b.failures_per_ip < 0) errs.push_back({"/benign/failures_per_ip", "must be >= 0"});
  if (!errs.empty()) raise(ErrorCode::Validation, "invalid benign profile", std::move(errs));
}

}  // namespace

ScenarioSpec scenario_from_json(const json& j, const std::filesystem::path& base_dir) {
  if (!j.is_object()) raise(ErrorCode::Schema, "scenario must be an object", {{"", "expected object"}});
  ScenarioSpec s;
  try {
    s.name = j.value("name", s.name);
    s.ns = j.value("namespace", s.ns);
    s.attacker_ip = j.value("attacker_ip", s.attacker_ip);
    s.attempts = j.value("attempts", s.attempts);
    s.rate = j.value("rate", s.rate);
    s.post_block_requests = j.value("post_block_requests", s.post_block_requests);
    s.runs = j.value("runs", s.runs);
    s.scan = j.value("scan", s.scan);
    s.wall_clock = j.value("mode", std::string("virtual")) == "wall";
    s.seed = j.value("seed", s.seed);
    if (j.contains("benign") && !j["benign"].is_null()) {
      const auto& b = j["benign"];
      BenignProfile p;
      p.rate = b.value("rate", p.rate);
      p.ips = b.value("ips", p.ips);
      p.duration_s = b.value("duration_s", p.duration_s);
      p.failures_per_ip = b.value("failures_per_ip", p.failures_per_ip);
      s.benign = p;
    }
    for (const auto& p : j.value("policies", json::array())) s.policies.push_back(resolve(p, base_dir));
    if (j.contains("nodes")) {
      auto nodes = resolve(j["nodes"], base_dir);
      s.nodes = nodes.is_array() ? nodes : json::array({nodes});
    }
  } catch (const json::exception& e) {
    raise(ErrorCode::Schema, "malformed scenario", {{"", e.what()}});
  }
  if (j.contains("mode") && j["mode"] != "wall" && j["mode"] != "virtual") {
    raise(ErrorCode::Validation, "invalid scenario", {{"/mode", "expected \"virtual\" or \"wall\""}});
  }
  std::vector<FieldError> errs;
  if (s.attempts < 1) errs.push_back({"/attempts", "must be >= 1"});
  if (!(s.rate > 0)) errs.push_back({"/rate", "must be > 0"});
  if (s.runs < 1) errs.push_back({"/runs", "must be >= 1"});
  if (s.post_block_requests < 0) errs.push_back({"/post_block_requests", "must be >= 0"});
  if (!canonical_ip(s.attacker_ip)) errs.push_back({"/attacker_ip", "not an IP address"});
  if (!errs.empty()) raise(ErrorCode::Validation, "invalid scenario", std::move(errs));
  if (s.benign) validate_profile(*s.benign);
  return s;
}

json to_json(const ScenarioSpec& s) {
  json j = {{"name", s.name},
            {"namespace", s.ns},
            {"attacker_ip", s.attacker_ip},
            {"attempts", s.attempts},
            {"rate", s.rate},
            {"policies", s.policies},
            {"nodes", s.nodes},
            {"post_block_requests", s.post_block_requests},
            {"runs", s.runs},
            {"scan", s.scan},
            {"mode", s.wall_clock ? "wall" : "virtual"},
            {"seed", s.seed}};
  if (s.benign) {
    j["benign"] = {{"rate", s.benign->rate},
                   {"ips", s.benign->ips},
                   {"duration_s", s.benign->duration_s},
                   {"failures_per_ip", s.benign->failures_per_ip}};
  }
  return j;
}

void save_run(const RunRecord& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json j = {{"index", r.index},
            {"namespace", r.ns},
            {"attacker_ip", r.attacker_ip},
            {"attempts", r.attempts},
            {"benign_ips", r.benign_ips},
            {"mode", r.wall_clock ? "wall" : "virtual"},
            {"nodes", r.nodes},
            {"policies", r.policies},
            {"incidents", r.incidents},
            {"blocklist", r.blocklist},
            {"scans", r.scans},
            {"probe_requests", r.probe_requests},
            {"probe_errors", r.probe_errors}};
  j["probed_scan"] = r.probed_scan ? json(*r.probed_scan) : json(nullptr);
  std::ofstream out(dir / "run.json");
  out << j.dump(2) << '\n';
  if (!out) throw Error(ErrorCode::Storage, "cannot write " + (dir / "run.json").string());
}

RunRecord load_run(const std::filesystem::path& dir) {
  auto j = load_json_file(dir / "run.json");
  RunRecord r;
  r.index = j.value("index", 0);
  r.ns = j.value("namespace", "");
  r.attacker_ip = j.value("attacker_ip", "");
  r.attempts = j.value("attempts", 0);
  r.benign_ips = j.value("benign_ips", std::vector<std::string>{});
  r.wall_clock = j.value("mode", "virtual") == "wall";
  r.nodes = j.value("nodes", json::array());
  r.policies = j.value("policies", json::array());
  r.incidents = j.value("incidents", json::array());
  r.blocklist = j.value("blocklist", json::array());
  r.scans = j.value("scans", json::object());
  if (j.contains("probed_scan") && j["probed_scan"].is_string()) r.probed_scan = j["probed_scan"].get<std::string>();
  r.probe_requests = j.value("probe_requests", std::uint64_t{0});
  r.probe_errors = j.value("probe_errors", std::uint64_t{0});
  std::ifstream log(dir / "access.log");
  std::string line;
  while (std::getline(log, line)) {
    try {
      r.access_log.push_back(parse_access_record(line));
    } catch (const Error&) {
    }
  }
  return r;
}

std::optional<double> percentile(std::vector<double> values, double p) {
  if (values.empty()) return std::nullopt;
  std::sort(values.begin(), values.end());
  auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(values.size())));
  rank = std::clamp<std::size_t>(rank, 1, values.size());
  return values[rank - 1];
}

namespace {

bool rule_has_window(const json& rule) {
  if (rule.is_object()) {
    for (const auto& [k, v] : rule.items()) {
      if (k == "window" || rule_has_window(v)) return true;
    }
  } else if (rule.is_array()) {
    for (const auto& v : rule) {
      if (rule_has_window(v)) return true;
    }
  }
  return false;
}

bool compare(const std::string& cmp, std::int64_t n, std::int64_t t) {
  if (cmp == ">") return n > t;
  if (cmp == ">=") return n >= t;
  if (cmp == "==") return n == t;
  if (cmp == "<=") return n <= t;
  if (cmp == "<") return n < t;
  return false;
}

// The brute-force shaped policy of a namespace: a single window over auth
// failures grouped by client IP.
struct WindowRule {
  std::string policy_id;
  std::int64_t window_ms = 0;
  std::int64_t threshold = 0;
  std::string cmp;
};

std::optional<WindowRule> brute_force_rule(const json& policies, const std::string& ns) {
  for (const auto& p : policies) {
    if (!p.value("enabled", true) || p["scope"].value("namespace", "") != ns) continue;
    const auto& rule = p["rule"];
    if (!rule.is_object() || !rule.contains("window")) continue;
    const auto& w = rule["window"];
    if (w.value("group_by", "") != "client_ip" || w["event"].value("kind", "") != "auth_failure") continue;
    return WindowRule{p["policy_id"].get<std::string>(), w["window_s"].get<std::int64_t>() * 1000,
                      w["threshold"].get<std::int64_t>(), w.value("cmp", ">")};
  }
  return std::nullopt;
}

struct Crossing {
  std::size_t line = 0;
  TimestampMs ts = 0;
};

// First failure per IP at which the window (ts - W, ts] satisfies the rule.
std::map<std::string, Crossing> crossings(const std::vector<AccessRecord>& log, const std::string& ns,
                                          const WindowRule& rule) {
  std::map<std::string, std::vector<std::pair<std::size_t, TimestampMs>>> failures;
  for (std::size_t i = 0; i < log.size(); ++i) {
    const auto& r = log[i];
    if (r.ns == ns && r.method == "POST" && r.path == "/login" && r.status_code == 401) {
      failures[r.client_ip].emplace_back(i, r.ts);
    }
  }
  std::map<std::string, Crossing> out;
  for (const auto& [ip, fs] : failures) {
    for (std::size_t k = 0; k < fs.size(); ++k) {
      std::int64_t n = 0;
      for (std::size_t j = 0; j < fs.size(); ++j) {
        if (fs[j].second > fs[k].second - rule.window_ms && fs[j].second <= fs[k].second) ++n;
      }
      if (compare(rule.cmp, n, rule.threshold)) {
        out[ip] = {fs[k].first, fs[k].second};
        break;
      }
    }
  }
  return out;
}

std::optional<double> ratio(std::size_t num, std::size_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

KpiReport measure_kpis(const std::vector<RunRecord>& runs) {
  KpiReport k;
  k.runs = runs.size();
  std::size_t probe_requests = 0;
  std::size_t probe_errors = 0;
  std::size_t registered = 0;
  std::size_t covered = 0;
  for (const auto& run : runs) {
    k.incidents += run.incidents.size();
    const std::set<std::string> benign(run.benign_ips.begin(), run.benign_ips.end());

    std::optional<json> block;
    for (const auto& b : run.blocklist) {
      if (b.value("ip", "") == run.attacker_ip) block = b;
    }

    std::optional<Crossing> attacker_crossing;
    if (auto rule = brute_force_rule(run.policies, run.ns)) {
      auto expected = crossings(run.access_log, run.ns, *rule);
      std::map<std::string, TimestampMs> first_incident;
      for (const auto& inc : run.incidents) {
        if (inc.value("policy_id", "") != rule->policy_id) continue;
        const auto key = inc["match"].value("group_key", "");
        const auto created = inc["created_ts"].get<TimestampMs>();
        auto [it, fresh] = first_incident.emplace(key, created);
        if (!fresh) it->second = std::min(it->second, created);
      }
      for (const auto& [key, created] : first_incident) {
        if (!expected.count(key)) ++k.false_positive_count;
      }
      if (auto it = expected.find(run.attacker_ip); it != expected.end()) {
        attacker_crossing = it->second;
        ++k.attacks_expected;
        if (auto inc = first_incident.find(run.attacker_ip); inc != first_incident.end()) {
          ++k.attacks_detected;
          k.time_to_alert_ms.push_back(inc->second - it->second.ts);
        }
        if (block) k.time_to_block_ms.push_back(block->value("created_ts", TimestampMs{0}) - it->second.ts);
      }
    }

    std::size_t attack_seen = 0;
    for (std::size_t i = 0; i < run.access_log.size(); ++i) {
      const auto& r = run.access_log[i];
      if (r.client_ip == run.attacker_ip) {
        if (r.method == "POST" && r.path == "/login" && attack_seen < static_cast<std::size_t>(run.attempts)) {
          ++attack_seen;
          ++k.attack_attempts;
          if (r.status_code != 200) ++k.attack_attempts_denied;
        }
        if (block && attacker_crossing && i > attacker_crossing->line &&
            r.ts > block->value("created_ts", TimestampMs{0})) {
          ++k.post_block_requests;
          if (r.status_code == 403) ++k.post_block_rejected;
        }
      } else if (benign.count(r.client_ip)) {
        ++k.benign_requests;
        if (r.status_code == 403) ++k.benign_rejected;
      }
    }

    std::map<std::string, json> policy_by_id;
    for (const auto& p : run.policies) policy_by_id[p.value("policy_id", "")] = p;
    for (const auto& inc : run.incidents) {
      auto p = policy_by_id.find(inc.value("policy_id", ""));
      if (p == policy_by_id.end() || rule_has_window(p->second["rule"])) continue;
      const auto scan_id = inc["match"]["condition_snapshot"].value("scan_id", "");
      if (!run.scans.contains(scan_id) || !run.scans[scan_id].contains("report")) continue;
      const auto lag = inc["created_ts"].get<TimestampMs>() - run.scans[scan_id]["report"]["finished_ts"].get<TimestampMs>();
      k.vuln_alert_ms = std::max(k.vuln_alert_ms.value_or(lag), lag);
    }

    if (run.probed_scan && run.scans.contains(*run.probed_scan)) {
      const auto& rec = run.scans[*run.probed_scan];
      probe_requests += run.probe_requests;
      probe_errors += run.probe_errors;
      if (rec.contains("report")) {
        const auto& report = rec["report"];
        const auto scope = report["scope"].get<std::set<std::string>>();
        std::set<std::string> scanned;
        for (const auto& c : report["components_scanned"]) {
          scanned.insert(c["namespace"].get<std::string>() + "/" + c["component"].get<std::string>());
        }
        for (const auto& node : run.nodes) {
          for (const auto& c : node.value("components", json::array())) {
            const auto ns = c["namespace"].get<std::string>();
            if (!scope.empty() && !scope.count(ns)) continue;
            ++registered;
            if (scanned.count(ns + "/" + c["component"].get<std::string>())) ++covered;
          }
        }
        for (const auto& [comp, ms] : report["component_duration_ms"].items()) {
          auto& slot = k.scan_duration_ms[comp];
          slot = std::max(slot, ms.get<std::int64_t>());
        }
      }
    }
  }
  k.detection_rate = ratio(k.attacks_detected, k.attacks_expected);
  k.block_rate = ratio(k.post_block_rejected, k.post_block_requests);
  k.asset_coverage = ratio(covered, registered);
  k.scan_probe_error_rate = ratio(probe_errors, probe_requests);
  auto as_double = [](const std::vector<std::int64_t>& v) { return std::vector<double>(v.begin(), v.end()); };
  k.time_to_alert_p95_ms = percentile(as_double(k.time_to_alert_ms), 95);
  k.time_to_block_p95_ms = percentile(as_double(k.time_to_block_ms), 95);
  return k;
}

json to_json(const KpiReport& k) {
  auto opt = [](const auto& v) { return v ? json(*v) : json(nullptr); };
  return {{"runs", k.runs},
          {"attacks_expected", k.attacks_expected},
          {"attacks_detected", k.attacks_detected},
          {"detection_rate", opt(k.detection_rate)},
          {"false_positive_count", k.false_positive_count},
          {"post_block_requests", k.post_block_requests},
          {"post_block_rejected", k.post_block_rejected},
          {"block_rate", opt(k.block_rate)},
          {"attack_attempts", k.attack_attempts},
          {"attack_attempts_denied", k.attack_attempts_denied},
          {"benign_requests", k.benign_requests},
          {"benign_rejected", k.benign_rejected},
          {"time_to_alert_ms", k.time_to_alert_ms},
          {"time_to_block_ms", k.time_to_block_ms},
          {"time_to_alert_p95_ms", opt(k.time_to_alert_p95_ms)},
          {"time_to_block_p95_ms", opt(k.time_to_block_p95_ms)},
          {"asset_coverage", opt(k.asset_coverage)},
          {"scan_duration_ms", k.scan_duration_ms},
          {"vuln_alert_ms", opt(k.vuln_alert_ms)},
          {"scan_probe_error_rate", opt(k.scan_probe_error_rate)},
          {"incidents", k.incidents}};
}

namespace {

std::string pct(std::optional<double> v) {
  if (!v) return "n/a";
  std::ostringstream os;
  os << std::fixed << std::setprecision(v == 0.0 || v == 1.0 ? 0 : 2) << *v * 100 << "%";
  return os.str();
}

std::string ms(std::optional<double> v) {
  if (!v) return "n/a";
  std::ostringstream os;
  os << std::fixed << std::setprecision(0) << *v << " ms";
  return os.str();
}

}  // namespace

std::string kpi_table(const KpiReport& k) {
  std::optional<double> not_detected;
  if (k.detection_rate) not_detected = 1.0 - *k.detection_rate;
  std::optional<double> not_blocked;
  if (k.block_rate) not_blocked = 1.0 - *k.block_rate;
  std::optional<double> slowest;
  for (const auto& [c, v] : k.scan_duration_ms) slowest = std::max(slowest.value_or(0), static_cast<double>(v));
  std::optional<double> vuln_alert;
  if (k.vuln_alert_ms) vuln_alert = static_cast<double>(*k.vuln_alert_ms);

  std::vector<std::array<std::string, 3>> rows = {
      {"Deployment", "Time to setup cybersecurity solution", "not machine-measured"},
      {"Deployment", "Time to deploy node level agents", "not machine-measured"},
      {"Deployment", "Time to find, configure and onboard cybersecurity services", "not machine-measured"},
      {"Vulnerabilities Identification", "Asset coverage", pct(k.asset_coverage)},
      {"Vulnerabilities Identification", "Time for scan execution",
       slowest ? ms(slowest) + " max per component" : "n/a"},
      {"Vulnerabilities Identification", "Time to alert upon vulnerability policy match", ms(vuln_alert)},
      {"Cybersecurity", "Percentage of packets not detected which match at least one of the detection rules",
       pct(not_detected) + " (" + std::to_string(k.attacks_detected) + "/" + std::to_string(k.attacks_expected) +
           " attacks detected)"},
      {"Cybersecurity", "Percentage of packets not blocked which match at least one of the block rules",
       pct(not_blocked) + " (" + std::to_string(k.post_block_rejected) + "/" +
           std::to_string(k.post_block_requests) + " rejected)"},
      {"Cybersecurity", "Blocked attempts of access of unauthenticated users by the user authentication",
       pct(ratio(k.attack_attempts_denied, k.attack_attempts))},
      {"Cybersecurity", "Time to respond to a suspicious activity", "p95 " + ms(k.time_to_block_p95_ms)},
      {"Cybersecurity", "Time to receive information regarding a security incident",
       "p95 " + ms(k.time_to_alert_p95_ms)},
      {"Cybersecurity", "False positives over benign traffic", std::to_string(k.false_positive_count)},
      {"Cybersecurity", "Benign requests rejected",
       std::to_string(k.benign_rejected) + "/" + std::to_string(k.benign_requests)},
  };
  std::size_t w0 = 4;
  std::size_t w1 = 6;
  for (const auto& r : rows) {
    w0 = std::max(w0, r[0].size());
    w1 = std::max(w1, r[1].size());
  }
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(w0)) << "Area" << "  " << std::setw(static_cast<int>(w1)) << "Metric"
     << "  Measured\n";
  for (const auto& r : rows) {
    os << std::setw(static_cast<int>(w0)) << r[0] << "  " << std::setw(static_cast<int>(w1)) << r[1] << "  " << r[2]
       << '\n';
  }
  return os.str();
}

struct DemoEnvironment::Impl {
  Impl(const ScenarioSpec& s, const DemoPaths& paths, std::filesystem::path d, int i)
      : spec(s),
        dir(std::move(d)),
        index(i),
        manual(s.wall_clock ? nullptr : std::make_shared<ManualClock>(kVirtualEpoch)),
        clock(manual ? std::static_pointer_cast<Clock>(manual) : system_clock()),
        stack(stack_options(paths)),
        gateway(stack, GatewayOptions{}),
        api(std::make_unique<StackClient>(start_gateway())) {
    for (int b = 0; b < (spec.benign ? spec.benign->ips : 0); ++b) {
      benign_ips.push_back("198.51.100." + std::to_string(10 + b));
    }
    TargetOptions t;
    t.ns = spec.ns;
    t.log_path = dir / "access.log";
    t.clock = clock;
    target = std::make_unique<TargetService>(t, http_block_check(gateway.base_url()));
    target->start();
    sink = std::make_unique<HttpSink>(gateway.base_url(), "", true);
    AgentOptions a;
    a.log_path = t.log_path;
    a.data_dir = dir / "agent";
    agent = std::make_unique<NodeAgent>(a, *sink);
    if (spec.wall_clock) agent->start();
  }

  // Idle keep-alive connections hold up a server's shutdown, so every client
  // is closed before the server it talks to.
  ~Impl() {
    agent.reset();
    target.reset();
    api.reset();
    gateway.stop();
  }

  StackOptions stack_options(const DemoPaths& paths) {
    std::filesystem::create_directories(dir);
    StackOptions o;
    o.data_dir = dir / "stack";
    o.templates_dir = paths.templates_dir;
    o.feed_path = paths.feed_path;
    o.manifests_dir = paths.manifests_dir;
    o.clock = clock;
    return o;
  }

  std::string start_gateway() {
    gateway.start();
    return gateway.base_url();
  }

  // Virtual mode: hand everything logged so far to the stack and wait for it
  // to be evaluated.
  void pump() {
    if (spec.wall_clock) return;
    agent->poll();
    agent->flush();
  }

  void advance_to(TimestampMs ts) {
    if (manual && ts > manual->now_ms()) manual->set(ts);
  }

  std::uint64_t seed(std::uint64_t salt) const { return spec.seed * 1'000'003 + static_cast<std::uint64_t>(index) * 97 + salt; }

  ScenarioSpec spec;
  std::filesystem::path dir;
  int index;
  std::shared_ptr<ManualClock> manual;
  std::shared_ptr<Clock> clock;
  Stack stack;
  GatewayServer gateway;
  std::unique_ptr<StackClient> api;
  std::unique_ptr<TargetService> target;
  std::unique_ptr<HttpSink> sink;
  std::unique_ptr<NodeAgent> agent;
  std::vector<std::string> benign_ips;
  std::vector<std::string> scan_ids;
  std::optional<std::string> probed_scan;
  std::uint64_t probe_requests = 0;
  std::uint64_t probe_errors = 0;

  // Attack (optional) and benign traffic (optional), interleaved by schedule in
  // virtual mode and on separate threads in wall mode.
  std::pair<std::vector<int>, BenignStats> traffic(bool attack, const std::optional<BenignProfile>& benign) {
    std::vector<int> statuses;
    BenignStats stats;
    const auto attack_period = 1000.0 / spec.rate;
    const auto benign_count = benign ? static_cast<std::size_t>(benign->rate * benign->duration_s) : 0;
    const auto benign_period = benign ? 1000.0 / benign->rate : 0.0;
    std::vector<std::string> ips = benign_ips;
    if (benign && static_cast<int>(ips.size()) < benign->ips) {
      for (int b = static_cast<int>(ips.size()); b < benign->ips; ++b) ips.push_back("198.51.100." + std::to_string(10 + b));
    }
    const int failures = benign ? benign->failures_per_ip : 0;

    if (!spec.wall_clock) {
      TrafficClient http(target->base_url());
      BenignDriver driver(ips, failures, seed(1), clock);
      struct Slot {
        TimestampMs at;
        bool attacker;
      };
      std::vector<Slot> plan;
      const auto t0 = clock->now_ms();
      if (attack) {
        for (int i = 0; i < spec.attempts; ++i) plan.push_back({t0 + std::llround(i * attack_period), true});
      }
      for (std::size_t j = 0; j < benign_count; ++j) {
        plan.push_back({t0 + std::llround(static_cast<double>(j) * benign_period), false});
      }
      std::stable_sort(plan.begin(), plan.end(), [](const Slot& a, const Slot& b) {
        return a.at != b.at ? a.at < b.at : a.attacker > b.attacker;
      });
      int attempt = 0;
      for (const auto& s : plan) {
        advance_to(s.at);
        if (s.attacker) {
          statuses.push_back(http.login(spec.attacker_ip, "admin", "guess-" + std::to_string(attempt++)));
        } else {
          count(stats, driver.step(http));
        }
        pump();
      }
      return {statuses, stats};
    }

    const auto t0 = std::chrono::steady_clock::now();
    auto at = [t0](double offset_ms) {
      return t0 + std::chrono::microseconds(static_cast<std::int64_t>(offset_ms * 1000));
    };
    std::thread background;
    if (benign_count > 0) {
      background = std::thread([&, ips] {
        TrafficClient http(target->base_url());
        BenignDriver driver(ips, failures, seed(1), clock);
        for (std::size_t j = 0; j < benign_count; ++j) {
          std::this_thread::sleep_until(at(static_cast<double>(j) * benign_period));
          count(stats, driver.step(http));
        }
      });
    }
    if (attack) {
      TrafficClient http(target->base_url());
      for (int i = 0; i < spec.attempts; ++i) {
        std::this_thread::sleep_until(at(i * attack_period));
        statuses.push_back(http.login(spec.attacker_ip, "admin", "guess-" + std::to_string(i)));
      }
    }
    if (background.joinable()) background.join();
    return {statuses, stats};
  }
};

DemoEnvironment::DemoEnvironment(const ScenarioSpec& spec, const DemoPaths& paths, std::filesystem::path dir,
                                 int index)
    : impl_(std::make_unique<Impl>(spec, paths, std::move(dir), index)) {}

DemoEnvironment::~DemoEnvironment() = default;

StackClient& DemoEnvironment::api() { return *impl_->api; }
TargetService& DemoEnvironment::target() { return *impl_->target; }
std::string DemoEnvironment::gateway_url() const { return impl_->gateway.base_url(); }
const std::vector<std::string>& DemoEnvironment::benign_ips() const { return impl_->benign_ips; }

void DemoEnvironment::setup() {
  for (const auto& node : impl_->spec.nodes) {
    try {
      impl_->api->post("/v1/infrastructure/nodes", node);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::DuplicateNode) throw;
    }
  }
  for (const auto& policy : impl_->spec.policies) {
    auto r = impl_->api->post("/v1/policies", policy);
    if (r.contains("scan_id")) impl_->scan_ids.push_back(r["scan_id"].get<std::string>());
  }
}

std::vector<int> DemoEnvironment::run_bruteforce() { return impl_->traffic(true, impl_->spec.benign).first; }

BenignStats DemoEnvironment::run_benign(const BenignProfile& profile) {
  validate_profile(profile);
  for (int b = static_cast<int>(impl_->benign_ips.size()); b < profile.ips; ++b) {
    impl_->benign_ips.push_back("198.51.100." + std::to_string(10 + b));
  }
  return impl_->traffic(false, profile).second;
}

std::pair<std::size_t, BenignStats> DemoEnvironment::run_post_block(int n) {
  auto& im = *impl_;
  const auto& ip = im.spec.attacker_ip;
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(5);
  while (!im.api->get("/v1/blocklist/check?ip=" + ip).value("blocked", false) &&
         std::chrono::steady_clock::now() < deadline) {
    if (!im.spec.wall_clock) break;
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }

  std::size_t rejected = 0;
  BenignStats stats;
  auto attacker_request = [&](TrafficClient& http, int i) {
    const int status = i % 2 == 0 ? http.login(ip, "alice", "wonderland") : http.data(ip, "");
    if (status == 403) ++rejected;
  };
  const auto ips = im.benign_ips.empty() ? std::vector<std::string>{"198.51.100.10"} : im.benign_ips;
  if (im.benign_ips.empty()) im.benign_ips = ips;

  if (!im.spec.wall_clock) {
    TrafficClient http(im.target->base_url());
    BenignDriver driver(ips, 0, im.seed(2), im.clock);
    for (int i = 0; i < n; ++i) {
      im.manual->advance(5);
      attacker_request(http, i);
      count(stats, driver.step(http));
    }
    im.pump();
    return {rejected, stats};
  }

  std::atomic<bool> done{false};
  std::thread background([&] {
    TrafficClient http(im.target->base_url());
    BenignDriver driver(ips, 0, im.seed(2), im.clock);
    while (!done) {
      count(stats, driver.step(http));
      std::this_thread::sleep_for(std::chrono::milliseconds(1));
    }
  });
  TrafficClient http(im.target->base_url());
  for (int i = 0; i < n; ++i) attacker_request(http, i);
  done = true;
  background.join();
  return {rejected, stats};
}

json DemoEnvironment::run_scan() {
  auto& im = *impl_;
  std::set<std::string> scope;
  for (const auto& node : im.api->get_all("/v1/infrastructure/nodes")) {
    for (const auto& ns : node["namespaces"]) scope.insert(ns.get<std::string>());
  }
  if (std::find(im.benign_ips.begin(), im.benign_ips.end(), kProbeIp) == im.benign_ips.end()) {
    im.benign_ips.push_back(kProbeIp);
  }

  std::atomic<bool> done{false};
  std::atomic<std::uint64_t> requests{0};
  std::atomic<std::uint64_t> errors{0};
  std::thread probe([&] {
    TrafficClient http(im.target->base_url());
    std::string token;
    if (http.login(kProbeIp, "bob", "builder", &token) != 200) ++errors;
    ++requests;
    while (!done) {
      ++requests;
      if (http.data(kProbeIp, token) != 200) ++errors;
      std::this_thread::sleep_for(std::chrono::milliseconds(2));
    }
  });

  json record;
  try {
    const auto started = im.api->post("/v1/scans", {{"scope", scope}});
    const auto id = started["scan_id"].get<std::string>();
    im.scan_ids.push_back(id);
    im.probed_scan = id;
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(120);
    do {
      record = im.api->get("/v1/scans/" + id);
      if (record.value("status", "") != "running") break;
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    } while (std::chrono::steady_clock::now() < deadline);
    // Keep probing briefly so the window covers the whole scan.
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  } catch (...) {
    done = true;
    probe.join();
    throw;
  }
  done = true;
  probe.join();
  im.probe_requests += requests;
  im.probe_errors += errors;
  return record;
}

RunRecord DemoEnvironment::collect() {
  auto& im = *impl_;
  if (im.spec.wall_clock) {
    im.agent->stop();
  } else {
    im.pump();
  }
  RunRecord r;
  r.index = im.index;
  r.ns = im.spec.ns;
  r.attacker_ip = im.spec.attacker_ip;
  r.attempts = im.spec.attempts;
  r.benign_ips = im.benign_ips;
  r.wall_clock = im.spec.wall_clock;
  r.nodes = im.api->get_all("/v1/infrastructure/nodes");
  r.policies = im.api->get_all("/v1/policies");
  r.incidents = im.api->get_all("/v1/incidents");
  r.blocklist = im.api->get_all("/v1/blocklist");
  for (const auto& id : im.scan_ids) {
    for (int i = 0; i < 1000; ++i) {
      auto s = im.api->get("/v1/scans/" + id);
      if (s.value("status", "") != "running") {
        r.scans[id] = s;
        break;
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
  }
  // Vulnerability incidents land after the scan's completion callback.
  if (!im.scan_ids.empty()) r.incidents = im.api->get_all("/v1/incidents");
  r.probed_scan = im.probed_scan;
  r.probe_requests = im.probe_requests;
  r.probe_errors = im.probe_errors;
  save_run(r, im.dir);
  r.access_log = load_run(im.dir).access_log;
  return r;
}

std::vector<RunRecord> run_scenario(const ScenarioSpec& spec, const DemoPaths& paths,
                                    const std::filesystem::path& out_dir) {
  std::vector<RunRecord> records;
  for (int i = 0; i < spec.runs; ++i) {
    const auto dir = out_dir / ("run-" + std::to_string(i));
    std::filesystem::remove_all(dir);
    DemoEnvironment env(spec, paths, dir, i);
    env.setup();
    env.run_bruteforce();
    if (spec.post_block_requests > 0) env.run_post_block(spec.post_block_requests);
    if (spec.scan && i == 0) env.run_scan();
    records.push_back(env.collect());
  }
  return records;
}

KpiReport run_and_measure(const ScenarioSpec& spec, const DemoPaths& paths, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  run_scenario(spec, paths, out_dir);
  // KPIs come from what the runs persisted, not from in-memory state.
  std::vector<RunRecord> persisted;
  for (int i = 0; i < spec.runs; ++i) persisted.push_back(load_run(out_dir / ("run-" + std::to_string(i))));
  auto report = measure_kpis(persisted);
  json out = to_json(report);
  out["scenario"] = to_json(spec);
  std::ofstream f(out_dir / "kpi-report.json");
  f << out.dump(2) << '\n';
  if (!f) throw Error(ErrorCode::Storage, "cannot write kpi-report.json");
  return report;
}

}  // namespace warden

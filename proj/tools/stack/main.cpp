// `stack`: run the security stack, its demo target and node agent, and
// administer a running stack over the HTTP API.

#include <CLI11.hpp>

#include <atomic>
#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <thread>

#include "warden/client.hpp"
#include "warden/demo.hpp"
#include "warden/gateway.hpp"
#include "warden/node_agent.hpp"
#include "warden/stack.hpp"
#include "warden/target.hpp"

using nlohmann::json;
using namespace warden;

namespace {

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop = true; }

void wait_for_signal() {
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
}

std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v && *v ? v : fallback;
}

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Validation, "cannot read " + path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw Error(ErrorCode::Schema, path + " is not valid JSON");
  return j;
}

void print(const json& j) { std::cout << j.dump(2) << '\n'; }

std::string cell(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_null()) return "-";
  return v.dump();
}

void print_table(const json& items, const std::vector<std::pair<std::string, std::string>>& columns) {
  std::vector<std::size_t> width;
  for (const auto& [title, ptr] : columns) width.push_back(title.size());
  std::vector<std::vector<std::string>> rows;
  for (const auto& item : items) {
    std::vector<std::string> row;
    for (std::size_t c = 0; c < columns.size(); ++c) {
      const json::json_pointer p(columns[c].second);
      row.push_back(item.contains(p) ? cell(item.at(p)) : "-");
      width[c] = std::max(width[c], row.back().size());
    }
    rows.push_back(std::move(row));
  }
  auto line = [&](const std::vector<std::string>& r) {
    for (std::size_t c = 0; c < r.size(); ++c) {
      std::cout << r[c];
      if (c + 1 < r.size()) std::cout << std::string(width[c] - r[c].size() + 2, ' ');
    }
    std::cout << '\n';
  };
  std::vector<std::string> header;
  for (const auto& [title, ptr] : columns) header.push_back(title);
  line(header);
  for (const auto& r : rows) line(r);
}

struct ClientOpts {
  std::string url = env_or("STACK_URL", "http://127.0.0.1:8080");
  bool as_json = false;
};

void add_client_opts(CLI::App* cmd, ClientOpts& o) {
  cmd->add_option("--url", o.url, "Stack API base URL (STACK_URL)");
  cmd->add_flag("--json", o.as_json, "Print raw JSON");
}

StackClient client(const ClientOpts& o) { return StackClient(o.url, token_from_env()); }

struct StackPaths {
  std::string data_dir = env_or("STACK_DATA_DIR", "stack-data");
  std::string templates = "templates";
  std::string feed = "fixtures/feed.json";
  std::string manifests = "fixtures/manifests";
};

void add_path_opts(CLI::App* cmd, StackPaths& p, bool with_data_dir = true) {
  if (with_data_dir) cmd->add_option("--data-dir", p.data_dir, "Persistent state directory (STACK_DATA_DIR)");
  cmd->add_option("--templates", p.templates, "Policy template directory");
  cmd->add_option("--feed", p.feed, "Vulnerability feed JSON");
  cmd->add_option("--manifests", p.manifests, "Component manifest directory");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Policy-driven security monitoring stack"};
  app.require_subcommand(1);
  ClientOpts copts;
  StackPaths paths;

  // serve
  auto* serve = app.add_subcommand("serve", "Run the stack and its HTTP API");
  std::string host = "127.0.0.1";
  int port = 8080;
  std::vector<std::string> node_files;
  add_path_opts(serve, paths);
  serve->add_option("--host", host);
  serve->add_option("--port", port);
  serve->add_option("--nodes", node_files, "Node descriptor files to register at startup");

  // nodes
  auto* node = app.add_subcommand("node", "Infrastructure nodes")->require_subcommand(1);
  auto* node_register = node->add_subcommand("register", "Register node descriptors from a JSON file");
  std::string node_file;
  node_register->add_option("file", node_file)->required();
  add_client_opts(node_register, copts);
  auto* node_list = node->add_subcommand("list", "List registered nodes");
  add_client_opts(node_list, copts);

  // templates
  auto* templates = app.add_subcommand("templates", "Browse policy templates");
  std::string tq;
  std::string ttag;
  templates->add_option("-q,--query", tq);
  templates->add_option("--tag", ttag, "Comma-separated tags");
  add_client_opts(templates, copts);

  // policy
  auto* policy = app.add_subcommand("policy", "Policies")->require_subcommand(1);
  auto* onboard = policy->add_subcommand("onboard", "Onboard a policy document or template instance");
  std::string policy_file;
  std::string template_id;
  std::string policy_ns;
  std::string policy_name;
  std::vector<std::string> bindings;
  onboard->add_option("file", policy_file, "Onboarding document (JSON)");
  onboard->add_option("--template", template_id);
  onboard->add_option("--namespace", policy_ns);
  onboard->add_option("--name", policy_name);
  onboard->add_option("--set", bindings, "Binding name=value")->expected(0, -1);
  add_client_opts(onboard, copts);
  auto* policy_list = policy->add_subcommand("list", "List policies");
  add_client_opts(policy_list, copts);
  auto* policy_delete = policy->add_subcommand("delete", "Remove a policy");
  std::string policy_id;
  policy_delete->add_option("id", policy_id)->required();
  add_client_opts(policy_delete, copts);

  // scan
  auto* scan = app.add_subcommand("scan", "Vulnerability scans")->require_subcommand(1);
  auto* scan_run = scan->add_subcommand("run", "Scan namespaces");
  std::vector<std::string> scan_ns;
  bool scan_wait = true;
  scan_run->add_option("--namespace", scan_ns, "Namespace to scan (repeatable; default all)");
  scan_run->add_flag("--wait,!--no-wait", scan_wait, "Wait for the report");
  add_client_opts(scan_run, copts);
  auto* scan_show = scan->add_subcommand("show", "Show a scan");
  std::string scan_id;
  scan_show->add_option("id", scan_id)->required();
  add_client_opts(scan_show, copts);

  // incidents
  auto* incidents = app.add_subcommand("incidents", "Incident timeline");
  std::int64_t since = -1;
  std::string inc_ns;
  std::string inc_status;
  incidents->add_option("--since", since, "Only incidents created at or after this epoch ms");
  incidents->add_option("--namespace", inc_ns);
  incidents->add_option("--status", inc_status);
  add_client_opts(incidents, copts);
  auto* incident = app.add_subcommand("incident", "One incident")->require_subcommand(1);
  auto* incident_show = incident->add_subcommand("show");
  std::string incident_id;
  incident_show->add_option("id", incident_id)->required();
  add_client_opts(incident_show, copts);
  auto* incident_status = incident->add_subcommand("status", "Acknowledge or close");
  std::string new_status;
  incident_status->add_option("id", incident_id)->required();
  incident_status->add_option("status", new_status)->required()->check(CLI::IsMember({"acknowledged", "closed"}));
  add_client_opts(incident_status, copts);

  // blocklist
  auto* blocklist = app.add_subcommand("blocklist", "Active IP blocks");
  add_client_opts(blocklist, copts);
  auto* unblock = app.add_subcommand("unblock", "Remove an IP block");
  std::string unblock_ip;
  std::string operator_name = env_or("USER", "admin");
  unblock->add_option("ip", unblock_ip)->required();
  unblock->add_option("--operator", operator_name);
  add_client_opts(unblock, copts);

  // events
  auto* events = app.add_subcommand("events", "Publish a batch of events from a JSON file");
  std::string events_file;
  events->add_option("file", events_file)->required();
  add_client_opts(events, copts);

  auto* metrics = app.add_subcommand("metrics", "Stack counters");
  add_client_opts(metrics, copts);

  // agent
  auto* agent = app.add_subcommand("agent", "Tail an access log and forward events");
  AgentOptions aopts;
  std::string agent_log;
  std::string agent_dir = "agent-data";
  agent->add_option("--log", agent_log, "Access log to tail")->required();
  agent->add_option("--data-dir", agent_dir, "Spool and dead-letter directory");
  agent->add_option("--agent-id", aopts.identity.agent_id);
  agent->add_option("--node", aopts.identity.node_name);
  agent->add_option("--url", copts.url, "Stack API base URL (STACK_URL)");

  // target
  auto* target = app.add_subcommand("target", "Run the demo target application");
  TargetOptions topts;
  std::string target_log = "access.log";
  std::string block_url;
  target->add_option("--namespace", topts.ns);
  target->add_option("--host", topts.host);
  target->add_option("--port", topts.port);
  target->add_option("--log", target_log, "Access log to write");
  target->add_option("--stack-url", block_url, "Stack to consult for blocked IPs (default: --url)");
  target->add_option("--url", copts.url, "Stack API base URL (STACK_URL)");

  // demo
  auto* demo = app.add_subcommand("demo", "Run a scenario and report KPIs");
  std::string scenario_file;
  std::string out_dir = "demo-out";
  demo->add_option("--scenario", scenario_file, "ScenarioSpec JSON")->required();
  demo->add_option("--out", out_dir, "Output directory for runs and kpi-report.json");
  add_path_opts(demo, paths, false);

  // replay
  auto* replay = app.add_subcommand("replay", "Re-evaluate a persisted event log");
  replay->add_option("--data-dir", paths.data_dir, "Stack data directory (STACK_DATA_DIR)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (serve->parsed()) {
      StackOptions o;
      o.data_dir = paths.data_dir;
      o.templates_dir = paths.templates;
      o.feed_path = paths.feed;
      o.manifests_dir = paths.manifests;
      Stack stack(o);
      for (const auto& f : node_files) {
        auto j = read_json(f);
        for (const auto& d : j.is_array() ? j : json::array({j})) {
          try {
            stack.register_node(d);
          } catch (const Error& e) {
            if (e.code() != ErrorCode::DuplicateNode) throw;
          }
        }
      }
      GatewayOptions g{token_from_env(), host, port};
      GatewayServer server(stack, g);
      server.start();
      std::cerr << "stack listening on " << server.base_url() << (g.token.empty() ? " (no auth)" : "") << '\n';
      wait_for_signal();
      server.stop();
      return 0;
    }
    if (node_register->parsed()) {
      auto j = read_json(node_file);
      auto c = client(copts);
      for (const auto& d : j.is_array() ? j : json::array({j})) print(c.post("/v1/infrastructure/nodes", d));
      return 0;
    }
    if (node_list->parsed()) {
      auto items = client(copts).get_all("/v1/infrastructure/nodes");
      if (copts.as_json) {
        print(items);
      } else {
        print_table(items, {{"NODE", "/node_name"}, {"NAMESPACES", "/namespaces"}, {"COMPONENTS", "/components"}});
      }
      return 0;
    }
    if (templates->parsed()) {
      std::string q = "/v1/templates?";
      if (!tq.empty()) q += "q=" + tq + "&";
      if (!ttag.empty()) q += "tag=" + ttag;
      auto items = client(copts).get_all(q);
      if (copts.as_json) {
        print(items);
      } else {
        print_table(items, {{"TEMPLATE", "/template_id"}, {"NAME", "/name"}, {"TAGS", "/tags"}});
      }
      return 0;
    }
    if (onboard->parsed()) {
      json doc;
      if (!policy_file.empty()) {
        doc = read_json(policy_file);
      } else if (!template_id.empty()) {
        doc = {{"template_id", template_id}, {"bindings", json::object()}, {"scope", {{"namespace", policy_ns}}}};
        for (const auto& b : bindings) {
          const auto eq = b.find('=');
          if (eq == std::string::npos) throw Error(ErrorCode::Validation, "binding must be name=value: " + b);
          auto value = json::parse(b.substr(eq + 1), nullptr, false);
          doc["bindings"][b.substr(0, eq)] = value.is_discarded() ? json(b.substr(eq + 1)) : value;
        }
      } else {
        throw Error(ErrorCode::Validation, "give a policy file or --template");
      }
      if (!policy_name.empty()) doc["name"] = policy_name;
      print(client(copts).post("/v1/policies", doc));
      return 0;
    }
    if (policy_list->parsed()) {
      auto items = client(copts).get_all("/v1/policies");
      if (copts.as_json) {
        print(items);
      } else {
        print_table(items, {{"POLICY", "/policy_id"},
                            {"TEMPLATE", "/template_id"},
                            {"NAMESPACE", "/scope/namespace"},
                            {"ENABLED", "/enabled"},
                            {"NAME", "/name"}});
      }
      return 0;
    }
    if (policy_delete->parsed()) {
      print(client(copts).del("/v1/policies/" + policy_id));
      return 0;
    }
    if (scan_run->parsed()) {
      auto c = client(copts);
      json body = json::object();
      if (!scan_ns.empty()) body["scope"] = scan_ns;
      auto started = c.post("/v1/scans", body);
      if (!scan_wait) {
        print(started);
        return 0;
      }
      const auto id = started["scan_id"].get<std::string>();
      json record;
      do {
        std::this_thread::sleep_for(std::chrono::milliseconds(50));
        record = c.get("/v1/scans/" + id);
      } while (record.value("status", "") == "running");
      if (copts.as_json || !record.contains("report")) {
        print(record);
      } else {
        const auto& report = record["report"];
        std::cout << id << ": " << report["findings"].size() << " findings over "
                  << report["components_scanned"].size() << " components in " << report["duration_ms"] << " ms\n";
        print_table(report["findings"], {{"NAMESPACE", "/namespace"},
                                         {"COMPONENT", "/component"},
                                         {"PACKAGE", "/package"},
                                         {"VERSION", "/version"},
                                         {"ADVISORY", "/advisory_id"},
                                         {"SCORE", "/score"},
                                         {"SEVERITY", "/severity"}});
      }
      return record.value("status", "") == "completed" ? 0 : 1;
    }
    if (scan_show->parsed()) {
      print(client(copts).get("/v1/scans/" + scan_id));
      return 0;
    }
    if (incidents->parsed()) {
      std::string q = "/v1/incidents?";
      if (since >= 0) q += "since=" + std::to_string(since) + "&";
      if (!inc_ns.empty()) q += "namespace=" + inc_ns + "&";
      if (!inc_status.empty()) q += "status=" + inc_status + "&";
      q.pop_back();
      auto items = client(copts).get_all(q);
      if (copts.as_json) {
        print(items);
      } else {
        print_table(items, {{"INCIDENT", "/incident_id"},
                            {"CREATED", "/created_ts"},
                            {"NAMESPACE", "/namespace"},
                            {"POLICY", "/policy_id"},
                            {"GROUP", "/match/group_key"},
                            {"STATUS", "/status"},
                            {"BLOCKED", "/blocked_ips"}});
      }
      return 0;
    }
    if (incident_show->parsed()) {
      print(client(copts).get("/v1/incidents/" + incident_id));
      return 0;
    }
    if (incident_status->parsed()) {
      print(client(copts).post("/v1/incidents/" + incident_id + "/status", {{"status", new_status}}));
      return 0;
    }
    if (blocklist->parsed()) {
      auto items = client(copts).get_all("/v1/blocklist");
      if (copts.as_json) {
        print(items);
      } else {
        print_table(items, {{"IP", "/ip"}, {"SINCE", "/created_ts"}, {"EXPIRES", "/expires_ts"}, {"INCIDENT", "/incident_id"}});
      }
      return 0;
    }
    if (unblock->parsed()) {
      print(client(copts).del("/v1/blocklist/" + unblock_ip, operator_name));
      return 0;
    }
    if (events->parsed()) {
      print(client(copts).post("/v1/events", read_json(events_file)));
      return 0;
    }
    if (metrics->parsed()) {
      print(client(copts).get("/v1/metrics"));
      return 0;
    }
    if (agent->parsed()) {
      aopts.log_path = agent_log;
      aopts.data_dir = agent_dir;
      HttpSink sink(copts.url, token_from_env());
      NodeAgent a(aopts, sink);
      a.start();
      std::cerr << "agent " << aopts.identity.agent_id << " tailing " << agent_log << " -> " << copts.url << '\n';
      wait_for_signal();
      a.stop();
      std::cerr << to_json(a.metrics()).dump() << '\n';
      return 0;
    }
    if (target->parsed()) {
      topts.log_path = target_log;
      TargetService t(topts, http_block_check(block_url.empty() ? copts.url : block_url));
      t.start();
      std::cerr << "target " << topts.ns << " listening on " << t.base_url() << '\n';
      wait_for_signal();
      t.stop();
      return 0;
    }
    if (demo->parsed()) {
      auto spec = scenario_from_json(read_json(scenario_file), std::filesystem::path(scenario_file).parent_path());
      auto report = run_and_measure(spec, {paths.templates, paths.feed, paths.manifests}, out_dir);
      std::cout << kpi_table(report);
      std::cout << "\nwrote " << (std::filesystem::path(out_dir) / "kpi-report.json").string() << '\n';
      return 0;
    }
    if (replay->parsed()) {
      auto state = replay_log(paths.data_dir);
      print({{"events", state.events}, {"incidents", state.incidents}, {"blocklist", state.blocklist}});
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << to_string(e.code()) << ": " << e.what() << '\n';
    for (const auto& d : e.details()) std::cerr << "  " << (d.path.empty() ? "/" : d.path) << ": " << d.message << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

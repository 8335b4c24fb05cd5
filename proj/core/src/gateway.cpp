#include "warden/gateway.hpp"

#include <httplib.h>

#include <cstdlib>

namespace warden {

using nlohmann::json;

namespace {

constexpr const char* kJson = "application/json";

json error_body(ErrorCode code, const std::string& message, const std::vector<FieldError>& details) {
  json d = json::array();
  for (const auto& f : details) d.push_back({{"path", f.path}, {"message", f.message}});
  return {{"error", to_string(code)}, {"message", message}, {"details", d}};
}

void reply(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), kJson);
}

json parse_body(const httplib::Request& req) {
  json j = json::parse(req.body, nullptr, false);
  if (j.is_discarded()) raise(ErrorCode::Validation, "request body is not JSON", {{"", "invalid JSON"}});
  return j;
}

std::optional<std::string> query(const httplib::Request& req, const char* key) {
  if (!req.has_param(key)) return std::nullopt;
  return req.get_param_value(key);
}

std::int64_t query_int(const httplib::Request& req, const char* key, std::int64_t fallback) {
  auto v = query(req, key);
  if (!v) return fallback;
  try {
    std::size_t used = 0;
    auto n = std::stoll(*v, &used);
    if (used != v->size()) throw std::invalid_argument(key);
    return n;
  } catch (const std::exception&) {
    raise(ErrorCode::Range, "invalid query parameter", {{std::string("?") + key, "expected integer"}});
  }
}

// Offset-cursor paging over a list whose order is stable.
json page(const std::vector<json>& items, const httplib::Request& req) {
  const auto limit = query_int(req, "limit", 100);
  const auto offset = query_int(req, "cursor", 0);
  if (limit < 1 || limit > 1000 || offset < 0) raise(ErrorCode::Range, "invalid paging", {{"?limit", "1..1000"}});
  json out = {{"items", json::array()}, {"next_cursor", nullptr}};
  const auto end = std::min<std::size_t>(items.size(), static_cast<std::size_t>(offset + limit));
  for (auto i = static_cast<std::size_t>(offset); i < end; ++i) out["items"].push_back(items[i]);
  if (end < items.size()) out["next_cursor"] = std::to_string(end);
  return out;
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    auto comma = s.find(',', start);
    if (comma == std::string::npos) comma = s.size();
    if (comma > start) out.push_back(s.substr(start, comma - start));
    start = comma + 1;
  }
  return out;
}

}  // namespace

struct GatewayServer::Impl {
  httplib::Server server;
  std::atomic<std::uint64_t> requests{0};
  std::atomic<std::uint64_t> errors{0};
};

std::string token_from_env() {
  const char* t = std::getenv("STACK_TOKEN");
  return t == nullptr ? "" : t;
}

GatewayServer::GatewayServer(Stack& stack, GatewayOptions options)
    : stack_(stack), options_(std::move(options)), impl_(std::make_unique<Impl>()) {
  auto& svr = impl_->server;
  // Without SO_REUSEPORT so a second server on a taken port fails to bind.
  svr.set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof yes);
  });
  svr.set_keep_alive_timeout(1);
  svr.new_task_queue = [n = options_.threads] { return new httplib::ThreadPool(static_cast<std::size_t>(n)); };

  svr.set_pre_routing_handler([this](const httplib::Request& req, httplib::Response& res) {
    ++impl_->requests;
    if (options_.token.empty() || req.path == "/v1/health" || req.path == "/v1/blocklist/check") {
      return httplib::Server::HandlerResponse::Unhandled;
    }
    if (req.get_header_value("Authorization") != "Bearer " + options_.token) {
      ++impl_->errors;
      reply(res, 401, error_body(ErrorCode::Unauthorized, "missing or wrong bearer token", {}));
      return httplib::Server::HandlerResponse::Handled;
    }
    return httplib::Server::HandlerResponse::Unhandled;
  });

  // Every handler runs inside this wrapper so errors map onto one JSON shape.
  auto guarded = [this](auto fn) {
    return [this, fn](const httplib::Request& req, httplib::Response& res) {
      try {
        fn(req, res);
      } catch (const Error& e) {
        ++impl_->errors;
        reply(res, http_status(e.code()), error_body(e.code(), e.what(), e.details()));
      } catch (const json::exception& e) {
        ++impl_->errors;
        reply(res, 400, error_body(ErrorCode::Validation, e.what(), {}));
      } catch (const std::exception& e) {
        ++impl_->errors;
        reply(res, 500, error_body(ErrorCode::Storage, e.what(), {}));
      }
    };
  };

  svr.Get("/v1/health", guarded([](const httplib::Request&, httplib::Response& res) {
            reply(res, 200, {{"status", "ok"}});
          }));

  svr.Post("/v1/infrastructure/nodes", guarded([this](const httplib::Request& req, httplib::Response& res) {
             reply(res, 201, to_json(stack_.register_node(parse_body(req))));
           }));
  svr.Get("/v1/infrastructure/nodes", guarded([this](const httplib::Request& req, httplib::Response& res) {
            std::vector<json> items;
            for (const auto& n : stack_.nodes()) items.push_back(to_json(n));
            reply(res, 200, page(items, req));
          }));

  svr.Get("/v1/templates", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const auto tags = query(req, "tag") ? split_csv(*query(req, "tag")) : std::vector<std::string>{};
            std::vector<json> items;
            for (const auto& t : stack_.templates(query(req, "q").value_or(""), tags)) items.push_back(to_json(t));
            reply(res, 200, page(items, req));
          }));

  svr.Post("/v1/policies", guarded([this](const httplib::Request& req, httplib::Response& res) {
             auto result = stack_.onboard_policy(parse_body(req));
             json body = {{"policy_id", result.policy.policy_id}, {"policy", to_json(result.policy)}};
             if (result.scan_id) body["scan_id"] = *result.scan_id;
             if (result.scan_error) body["scan_error"] = *result.scan_error;
             reply(res, 201, body);
           }));
  svr.Get("/v1/policies", guarded([this](const httplib::Request& req, httplib::Response& res) {
            std::vector<json> items;
            for (const auto& p : stack_.policies()) items.push_back(to_json(p));
            reply(res, 200, page(items, req));
          }));
  svr.Get("/v1/policies/:id", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const auto& id = req.path_params.at("id");
            auto p = stack_.policy(id);
            if (!p) throw Error(ErrorCode::UnknownPolicy, "no policy " + id);
            reply(res, 200, to_json(*p));
          }));
  svr.Delete("/v1/policies/:id", guarded([this](const httplib::Request& req, httplib::Response& res) {
               reply(res, 200, to_json(stack_.remove_policy(req.path_params.at("id"))));
             }));

  svr.Get("/v1/incidents", guarded([this](const httplib::Request& req, httplib::Response& res) {
            IncidentFilter filter;
            filter.ns = query(req, "namespace");
            if (req.has_param("since")) filter.since_ts = query_int(req, "since", 0);
            if (auto s = query(req, "status")) {
              filter.status = parse_incident_status(*s);
              if (!filter.status) raise(ErrorCode::Range, "invalid status", {{"?status", "open|acknowledged|closed"}});
            }
            const auto limit = query_int(req, "limit", 50);
            if (limit < 1 || limit > 1000) raise(ErrorCode::Range, "invalid paging", {{"?limit", "1..1000"}});
            auto p = stack_.incidents(filter, static_cast<std::size_t>(limit), query(req, "cursor"));
            json items = json::array();
            for (const auto& i : p.items) items.push_back(to_json(i));
            reply(res, 200, {{"items", items}, {"next_cursor", p.next_cursor ? json(*p.next_cursor) : json(nullptr)}});
          }));
  svr.Get("/v1/incidents/:id", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const auto& id = req.path_params.at("id");
            auto i = stack_.incident(id);
            if (!i) throw Error(ErrorCode::NotFound, "no incident " + id);
            auto body = to_json(*i);
            body["evidence_count"] = i->match.evidence.size();
            reply(res, 200, body);
          }));
  svr.Post("/v1/incidents/:id/status", guarded([this](const httplib::Request& req, httplib::Response& res) {
             const auto body = parse_body(req);
             auto status = parse_incident_status(body.value("status", ""));
             if (!status) raise(ErrorCode::Validation, "invalid status", {{"/status", "open|acknowledged|closed"}});
             reply(res, 200, to_json(stack_.set_incident_status(req.path_params.at("id"), *status)));
           }));
  svr.Get("/v1/alerts", guarded([this](const httplib::Request& req, httplib::Response& res) {
            std::vector<json> items;
            for (const auto& a : stack_.alerts()) items.push_back(to_json(a));
            reply(res, 200, page(items, req));
          }));

  svr.Post("/v1/scans", guarded([this](const httplib::Request& req, httplib::Response& res) {
             const auto body = req.body.empty() ? json::object() : parse_body(req);
             std::vector<std::string> scope;
             if (body.contains("scope")) {
               scope = body["scope"].get<std::vector<std::string>>();
             } else if (body.contains("namespace")) {
               scope.push_back(body["namespace"].get<std::string>());
             }
             const auto id = stack_.trigger_scan(scope);
             reply(res, 202, {{"scan_id", id}, {"status", "running"}});
           }));
  svr.Get("/v1/scans/:id", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const auto& id = req.path_params.at("id");
            auto s = stack_.scan(id);
            if (!s) throw Error(ErrorCode::NotFound, "no scan " + id);
            reply(res, 200, to_json(*s));
          }));

  svr.Post("/v1/events", guarded([this](const httplib::Request& req, httplib::Response& res) {
             auto result = stack_.ingest_events(parse_body(req));
             // wait=1 returns only after detection and enactment have run.
             if (query(req, "wait").value_or("") == "1") stack_.flush();
             reply(res, 200, to_json(result));
           }));

  svr.Get("/v1/blocklist", guarded([this](const httplib::Request& req, httplib::Response& res) {
            std::vector<json> items;
            for (const auto& b : stack_.blocklist()) items.push_back(to_json(b));
            reply(res, 200, page(items, req));
          }));
  svr.Get("/v1/blocklist/check", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const auto ip = query(req, "ip").value_or("");
            reply(res, 200, {{"ip", ip}, {"blocked", stack_.is_blocked(ip)}});
          }));
  svr.Delete("/v1/blocklist/:ip", guarded([this](const httplib::Request& req, httplib::Response& res) {
               const auto ip = httplib::detail::decode_url(req.path_params.at("ip"), false);
               auto who = req.get_header_value("X-Operator");
               reply(res, 200, to_json(stack_.unblock(ip, who.empty() ? "admin" : who)));
             }));

  svr.Get("/v1/metrics", guarded([this](const httplib::Request&, httplib::Response& res) {
            auto m = stack_.metrics();
            m["gateway"] = {{"requests", impl_->requests.load()}, {"errors", impl_->errors.load()}};
            reply(res, 200, m);
          }));
}

GatewayServer::~GatewayServer() { stop(); }

int GatewayServer::bind() {
  if (port_ != 0) return port_;
  if (options_.port == 0) {
    port_ = impl_->server.bind_to_any_port(options_.host);
  } else if (impl_->server.bind_to_port(options_.host, options_.port)) {
    port_ = options_.port;
  }
  if (port_ <= 0) {
    port_ = 0;
    throw Error(ErrorCode::PortInUse, "cannot bind " + options_.host + ":" + std::to_string(options_.port));
  }
  return port_;
}

void GatewayServer::start() {
  bind();
  thread_ = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
}

void GatewayServer::run() {
  bind();
  impl_->server.listen_after_bind();
}

void GatewayServer::stop() {
  impl_->server.stop();
  if (thread_.joinable()) thread_.join();
}

std::string GatewayServer::base_url() const { return "http://" + options_.host + ":" + std::to_string(port_); }

}  // namespace warden

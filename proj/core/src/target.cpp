#include "warden/target.hpp"

#include <httplib.h>

#include <fstream>
#include <mutex>
#include <random>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "warden/error.hpp"
#include "warden/mitigation.hpp"

namespace warden {

using nlohmann::json;

namespace {

// Log fields are space separated, so user names must not contain blanks.
std::string log_user(const std::string& user) {
  if (user.empty()) return "-";
  std::string out = user;
  for (auto& c : out) {
    if (std::isspace(static_cast<unsigned char>(c))) c = '_';
  }
  return out;
}

}  // namespace

BlockCheck http_block_check(std::string base_url, std::chrono::milliseconds ttl) {
  // One keep-alive connection shared by all request threads: a connection per
  // thread would pin that many of the stack's worker threads while idle.
  struct Cache {
    explicit Cache(const std::string& url) : client(url) {
      client.set_keep_alive(true);
      client.set_connection_timeout(std::chrono::seconds(1));
      client.set_read_timeout(std::chrono::seconds(5));
    }
    std::mutex mutex;
    std::unordered_map<std::string, std::pair<bool, std::chrono::steady_clock::time_point>> entries;
    std::mutex client_mutex;
    httplib::Client client;
  };
  auto cache = std::make_shared<Cache>(base_url);
  return [ttl, cache](const std::string& ip) {
    const auto now = std::chrono::steady_clock::now();
    if (ttl.count() > 0) {
      std::lock_guard lock(cache->mutex);
      auto it = cache->entries.find(ip);
      if (it != cache->entries.end() && now - it->second.second < ttl) return it->second.first;
    }
    httplib::Result res;
    {
      std::lock_guard lock(cache->client_mutex);
      res = cache->client.Get("/v1/blocklist/check?ip=" + httplib::detail::encode_url(ip));
    }
    if (!res || res->status != 200) return false;
    auto body = json::parse(res->body, nullptr, false);
    const bool blocked = !body.is_discarded() && body.value("blocked", false);
    if (ttl.count() > 0) {
      std::lock_guard lock(cache->mutex);
      cache->entries[ip] = {blocked, now};
    }
    return blocked;
  };
}

struct TargetService::Impl {
  httplib::Server server;
  BlockCheck blocked;
  std::mutex log_mutex;
  std::ofstream log;
  std::mutex session_mutex;
  std::unordered_map<std::string, std::string> sessions;  // token -> user
  std::mt19937_64 rng{std::random_device{}()};
  mutable std::mutex stats_mutex;
  TargetStats stats;
};

TargetService::TargetService(TargetOptions options, BlockCheck blocked)
    : options_(std::move(options)), impl_(std::make_unique<Impl>()) {
  impl_->blocked = std::move(blocked);
  if (!options_.log_path.empty()) {
    if (options_.log_path.has_parent_path()) std::filesystem::create_directories(options_.log_path.parent_path());
    impl_->log.open(options_.log_path, std::ios::app);
    if (!impl_->log) throw Error(ErrorCode::Storage, "cannot open access log " + options_.log_path.string());
  }

  auto& svr = impl_->server;
  svr.set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof yes);
  });
  svr.set_keep_alive_timeout(1);
  svr.new_task_queue = [n = options_.threads] { return new httplib::ThreadPool(static_cast<std::size_t>(n)); };

  auto client_ip = [](const httplib::Request& req) {
    auto fwd = req.get_header_value("X-Forwarded-For");
    if (fwd.empty()) return req.remote_addr;
    auto first = fwd.substr(0, fwd.find(','));
    auto canon = canonical_ip(first);
    return canon ? *canon : req.remote_addr;
  };

  // Writes the access line and the response together; the timestamp is taken
  // under the log lock so the log is ordered by time.
  auto finish = [this](const httplib::Request& req, httplib::Response& res, const std::string& ip, int status,
                       const std::string& user, json body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
    {
      std::lock_guard lock(impl_->log_mutex);
      if (impl_->log.is_open()) {
        impl_->log << options_.clock->now_ms() << ' ' << ip << ' ' << req.method << ' ' << req.path << ' ' << status
                   << ' ' << log_user(user) << ' ' << options_.ns << '\n';
        impl_->log.flush();
      }
    }
    std::lock_guard lock(impl_->stats_mutex);
    ++impl_->stats.requests;
    ++impl_->stats.by_status[status];
    if (status >= 500) ++impl_->stats.server_errors;
  };

  svr.Get("/health", [this](const httplib::Request&, httplib::Response& res) {
    res.set_content(json{{"status", "ok"}, {"namespace", options_.ns}}.dump(), "application/json");
  });

  svr.Post("/login", [this, client_ip, finish](const httplib::Request& req, httplib::Response& res) {
    const auto ip = client_ip(req);
    std::string user;
    std::string password;
    auto body = json::parse(req.body, nullptr, false);
    if (body.is_object()) {
      user = body.value("user", "");
      password = body.value("password", "");
    } else {
      user = req.get_param_value("user");
      password = req.get_param_value("password");
    }
    if (impl_->blocked && impl_->blocked(ip)) return finish(req, res, ip, 403, user, {{"error", "blocked"}});
    auto it = options_.credentials.find(user);
    if (user.empty() || it == options_.credentials.end() || it->second != password) {
      return finish(req, res, ip, 401, user, {{"error", "invalid credentials"}});
    }
    std::string token;
    {
      std::lock_guard lock(impl_->session_mutex);
      char buf[33];
      std::snprintf(buf, sizeof buf, "%016llx%016llx", static_cast<unsigned long long>(impl_->rng()),
                    static_cast<unsigned long long>(impl_->rng()));
      token = buf;
      impl_->sessions[token] = user;
    }
    finish(req, res, ip, 200, user, {{"token", token}, {"user", user}});
  });

  svr.Get("/data", [this, client_ip, finish](const httplib::Request& req, httplib::Response& res) {
    const auto ip = client_ip(req);
    if (impl_->blocked && impl_->blocked(ip)) return finish(req, res, ip, 403, "", {{"error", "blocked"}});
    std::string user;
    auto auth = req.get_header_value("Authorization");
    if (auth.rfind("Bearer ", 0) == 0) {
      std::lock_guard lock(impl_->session_mutex);
      auto it = impl_->sessions.find(auth.substr(7));
      if (it != impl_->sessions.end()) user = it->second;
    }
    if (user.empty()) return finish(req, res, ip, 401, "", {{"error", "authentication required"}});
    finish(req, res, ip, 200, user, {{"namespace", options_.ns}, {"items", json::array({"reading-1", "reading-2"})}});
  });
}

TargetService::~TargetService() { stop(); }

int TargetService::bind() {
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

void TargetService::start() {
  bind();
  thread_ = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
}

void TargetService::run() {
  bind();
  impl_->server.listen_after_bind();
}

void TargetService::stop() {
  impl_->server.stop();
  if (thread_.joinable()) thread_.join();
}

std::string TargetService::base_url() const { return "http://" + options_.host + ":" + std::to_string(port_); }

TargetStats TargetService::stats() const {
  std::lock_guard lock(impl_->stats_mutex);
  return impl_->stats;
}

}  // namespace warden

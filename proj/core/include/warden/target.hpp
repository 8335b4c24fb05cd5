#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <thread>

#include "warden/clock.hpp"

namespace warden {

// Answers whether requests from an IP must be refused.
using BlockCheck = std::function<bool(const std::string& ip)>;

// Asks a stack's /v1/blocklist/check. Answers are cached for `ttl` (zero means
// every request asks). Fails open when the stack cannot be reached.
BlockCheck http_block_check(std::string base_url, std::chrono::milliseconds ttl = std::chrono::milliseconds(0));

struct TargetOptions {
  std::string ns = "pat";
  std::string host = "127.0.0.1";
  int port = 0;
  std::filesystem::path log_path;  // access log in the node agent format
  std::map<std::string, std::string> credentials{{"alice", "wonderland"}, {"bob", "builder"}};
  std::shared_ptr<Clock> clock = system_clock();
  int threads = 16;
};

struct TargetStats {
  std::uint64_t requests = 0;
  std::uint64_t server_errors = 0;
  std::map<int, std::uint64_t> by_status;
};

// Demo application with an authenticated surface:
//   POST /login {"user","password"} -> 200 {"token"} | 401
//   GET  /data  (Authorization: Bearer <token>) -> 200 | 401
//   GET  /health
// Requests from blocked IPs get 403 before authentication. The client IP is
// X-Forwarded-For when present, so one host can simulate many clients.
class TargetService {
 public:
  TargetService(TargetOptions options, BlockCheck blocked = {});
  ~TargetService();
  TargetService(const TargetService&) = delete;
  TargetService& operator=(const TargetService&) = delete;

  // Throws PortInUse.
  void start();
  void run();
  void stop();
  int port() const { return port_; }
  std::string base_url() const;
  const TargetOptions& options() const { return options_; }
  TargetStats stats() const;

 private:
  struct Impl;
  int bind();

  TargetOptions options_;
  std::unique_ptr<Impl> impl_;
  std::thread thread_;
  int port_ = 0;
};

}  // namespace warden

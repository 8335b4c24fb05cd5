#pragma once

#include <atomic>
#include <memory>
#include <optional>
#include <string>
#include <thread>

#include "warden/stack.hpp"

namespace warden {

struct GatewayOptions {
  // Bearer token for admin endpoints; empty disables authentication.
  std::string token;
  std::string host = "127.0.0.1";
  int port = 0;  // 0 picks a free port
  int threads = 16;
};

// HTTP/1.1 + JSON front of a Stack under /v1.
class GatewayServer {
 public:
  GatewayServer(Stack& stack, GatewayOptions options);
  ~GatewayServer();
  GatewayServer(const GatewayServer&) = delete;
  GatewayServer& operator=(const GatewayServer&) = delete;

  // Binds and serves on a background thread. Throws PortInUse.
  void start();
  // Binds and serves on the calling thread until stop().
  void run();
  void stop();
  int port() const { return port_; }
  std::string base_url() const;

 private:
  struct Impl;
  int bind();

  Stack& stack_;
  GatewayOptions options_;
  std::unique_ptr<Impl> impl_;
  std::thread thread_;
  int port_ = 0;
};

// Reads STACK_TOKEN; empty when unset.
std::string token_from_env();

}  // namespace warden

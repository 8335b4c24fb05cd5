#pragma once

#include <memory>
#include <mutex>
#include <string>

#include <nlohmann/json.hpp>

#include "warden/error.hpp"

namespace httplib {
class Client;
}

namespace warden {

// Thin JSON client for the /v1 API. Transport failures raise StackUnreachable;
// error responses are rethrown as the Error the server reported.
class StackClient {
 public:
  explicit StackClient(std::string base_url, std::string token = {});
  ~StackClient();
  StackClient(const StackClient&) = delete;
  StackClient& operator=(const StackClient&) = delete;

  nlohmann::json get(const std::string& path) const;
  nlohmann::json post(const std::string& path, const nlohmann::json& body) const;
  nlohmann::json del(const std::string& path, const std::string& operator_name = {}) const;
  // Follows next_cursor and returns every item.
  nlohmann::json get_all(const std::string& path) const;

  const std::string& base_url() const { return base_url_; }

 private:
  std::string base_url_;
  std::unique_ptr<httplib::Client> client_;
  mutable std::mutex mutex_;
};

}  // namespace warden

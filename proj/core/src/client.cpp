#include "warden/client.hpp"

#include <httplib.h>

namespace warden {

using nlohmann::json;

namespace {

json unwrap(const httplib::Result& res, const std::string& what) {
  if (!res) throw Error(ErrorCode::StackUnreachable, what + ": " + httplib::to_string(res.error()));
  auto body = json::parse(res->body, nullptr, false);
  if (res->status >= 200 && res->status < 300) {
    if (body.is_discarded()) throw Error(ErrorCode::StackUnreachable, what + ": malformed response");
    return body;
  }
  if (!body.is_discarded() && body.is_object() && body.contains("error")) {
    std::vector<FieldError> details;
    for (const auto& d : body.value("details", json::array())) {
      details.push_back({d.value("path", ""), d.value("message", "")});
    }
    auto code = parse_error_code(body["error"].get<std::string>()).value_or(ErrorCode::Validation);
    throw Error(code, body.value("message", what), std::move(details));
  }
  throw Error(res->status >= 500 ? ErrorCode::StackUnreachable : ErrorCode::Validation,
              what + ": HTTP " + std::to_string(res->status));
}

}  // namespace

StackClient::StackClient(std::string base_url, std::string token)
    : base_url_(std::move(base_url)), client_(std::make_unique<httplib::Client>(base_url_)) {
  client_->set_keep_alive(true);
  client_->set_connection_timeout(std::chrono::seconds(2));
  client_->set_read_timeout(std::chrono::seconds(30));
  if (!token.empty()) client_->set_bearer_token_auth(token);
}

StackClient::~StackClient() = default;

json StackClient::get(const std::string& path) const {
  std::lock_guard lock(mutex_);
  return unwrap(client_->Get(path), "GET " + path);
}

json StackClient::post(const std::string& path, const json& body) const {
  std::lock_guard lock(mutex_);
  return unwrap(client_->Post(path, body.dump(), "application/json"), "POST " + path);
}

json StackClient::del(const std::string& path, const std::string& operator_name) const {
  std::lock_guard lock(mutex_);
  httplib::Headers headers;
  if (!operator_name.empty()) headers.emplace("X-Operator", operator_name);
  return unwrap(client_->Delete(path, headers), "DELETE " + path);
}

json StackClient::get_all(const std::string& path) const {
  json items = json::array();
  const char sep = path.find('?') == std::string::npos ? '?' : '&';
  std::string cursor;
  for (;;) {
    auto page = get(path + sep + "limit=1000" + (cursor.empty() ? "" : "&cursor=" + cursor));
    for (auto& item : page["items"]) items.push_back(std::move(item));
    if (!page["next_cursor"].is_string()) return items;
    cursor = page["next_cursor"].get<std::string>();
  }
}

}  // namespace warden

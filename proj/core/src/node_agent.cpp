#include "warden/node_agent.hpp"

#include <httplib.h>

#include <algorithm>
#include <charconv>
#include <fstream>

#include "warden/mitigation.hpp"
#include "warden/stack.hpp"

namespace warden {

using nlohmann::json;

namespace {

[[noreturn]] void parse_error(std::string_view line, const std::string& why) {
  throw Error(ErrorCode::Parse, "unparseable access record (" + why + "): " + std::string(line.substr(0, 200)));
}

template <typename T>
bool to_number(std::string_view s, T& out) {
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc{} && ptr == s.data() + s.size();
}

}  // namespace

AccessRecord parse_access_record(std::string_view line) {
  if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (start <= line.size()) {
    auto sp = line.find(' ', start);
    if (sp == std::string_view::npos) sp = line.size();
    fields.push_back(line.substr(start, sp - start));
    start = sp + 1;
  }
  if (fields.size() != 7) parse_error(line, "expected 7 space-separated fields");
  for (auto f : fields) {
    if (f.empty()) parse_error(line, "empty field");
  }
  AccessRecord r;
  if (!to_number(fields[0], r.ts) || r.ts < 0) parse_error(line, "timestamp");
  auto ip = canonical_ip(fields[1]);
  if (!ip) parse_error(line, "client ip");
  r.client_ip = *ip;
  if (!std::all_of(fields[2].begin(), fields[2].end(), [](char c) { return c >= 'A' && c <= 'Z'; })) {
    parse_error(line, "method");
  }
  r.method = fields[2];
  if (fields[3].front() != '/') parse_error(line, "path");
  r.path = fields[3];
  if (!to_number(fields[4], r.status_code) || r.status_code < 100 || r.status_code > 599) parse_error(line, "status");
  if (fields[5] != "-") r.user = std::string(fields[5]);
  r.ns = fields[6];
  return r;
}

std::string format_access_record(const AccessRecord& r) {
  return std::to_string(r.ts) + " " + r.client_ip + " " + r.method + " " + r.path + " " + std::to_string(r.status_code) +
         " " + r.user.value_or("-") + " " + r.ns;
}

SecurityEvent normalize(const AccessRecord& r, const AgentIdentity& id, std::uint64_t line_no) {
  SecurityEvent e;
  e.event_id = id.agent_id + "-" + std::to_string(line_no);
  e.ts = r.ts;
  e.source = {id.agent_id, id.node_name, r.ns};
  const bool login = r.method == "POST" && r.path == "/login";
  if (login && r.status_code == 401) {
    e.kind = EventKind::AuthFailure;
  } else if (login && r.status_code == 200) {
    e.kind = EventKind::AuthSuccess;
  } else {
    e.kind = EventKind::HttpRequest;
  }
  e.attrs[attr::kClientIp] = r.client_ip;
  e.attrs[attr::kPath] = r.path;
  e.attrs[attr::kMethod] = r.method;
  e.attrs[attr::kStatusCode] = std::to_string(r.status_code);
  if (r.user) e.attrs[attr::kUser] = *r.user;
  return e;
}

HttpSink::HttpSink(std::string base_url, std::string token, bool wait)
    : base_url_(std::move(base_url)), token_(std::move(token)), wait_(wait) {}

std::size_t HttpSink::deliver(const std::vector<SecurityEvent>& batch) {
  httplib::Client client(base_url_);
  client.set_connection_timeout(std::chrono::seconds(1));
  client.set_read_timeout(std::chrono::seconds(10));
  if (!token_.empty()) client.set_bearer_token_auth(token_);
  json body = json::array();
  for (const auto& e : batch) body.push_back(e);
  auto res = client.Post(wait_ ? "/v1/events?wait=1" : "/v1/events", body.dump(), "application/json");
  if (!res) throw Error(ErrorCode::StackUnreachable, "POST /v1/events: " + httplib::to_string(res.error()));
  if (res->status >= 500) throw Error(ErrorCode::StackUnreachable, "POST /v1/events: HTTP " + std::to_string(res->status));
  if (res->status != 200) {
    throw Error(ErrorCode::Validation, "POST /v1/events: HTTP " + std::to_string(res->status) + " " + res->body);
  }
  auto r = json::parse(res->body, nullptr, false);
  if (r.is_discarded()) throw Error(ErrorCode::StackUnreachable, "POST /v1/events: malformed response");
  return r.value("accepted", std::size_t{0}) + r.value("duplicates", std::size_t{0});
}

std::size_t StackSink::deliver(const std::vector<SecurityEvent>& batch) {
  json body = json::array();
  for (const auto& e : batch) body.push_back(e);
  auto r = stack_.ingest_events(body);
  return r.accepted + r.duplicates;
}

std::chrono::milliseconds RetryPolicy::delay(int retry) const {
  auto d = base;
  for (int i = 1; i < retry && d < cap; ++i) d *= 2;
  return std::min(d, cap);
}

Forwarder::Forwarder(EventSink& sink, RetryPolicy policy, std::filesystem::path spool_path, Sleep sleep)
    : sink_(sink), policy_(policy), spool_path_(std::move(spool_path)), sleep_(std::move(sleep)) {
  if (!sleep_) sleep_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
}

std::size_t Forwarder::deliver_with_retry(const std::vector<SecurityEvent>& chunk) {
  for (int attempt = 1;; ++attempt) {
    ++attempts_;
    try {
      return sink_.deliver(chunk);
    } catch (const Error& e) {
      // Only transport trouble is worth retrying.
      if (e.code() != ErrorCode::StackUnreachable && e.code() != ErrorCode::Storage) throw;
      if (attempt >= policy_.attempts) {
        throw Error(ErrorCode::DeliveryExhausted,
                    "gave up after " + std::to_string(attempt) + " attempts: " + std::string(e.what()));
      }
    }
    sleep_(policy_.delay(attempt));
  }
}

std::size_t Forwarder::forward(const std::vector<SecurityEvent>& batch) {
  std::size_t acked = 0;
  std::vector<SecurityEvent> undelivered;
  std::optional<Error> failure;
  for (std::size_t i = 0; i < batch.size(); i += kMaxForwardBatch) {
    std::vector<SecurityEvent> chunk(batch.begin() + static_cast<std::ptrdiff_t>(i),
                                     batch.begin() + static_cast<std::ptrdiff_t>(std::min(batch.size(), i + kMaxForwardBatch)));
    if (failure) {
      undelivered.insert(undelivered.end(), chunk.begin(), chunk.end());
      continue;
    }
    try {
      acked += deliver_with_retry(chunk);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::DeliveryExhausted) throw;
      failure = e;
      undelivered.insert(undelivered.end(), chunk.begin(), chunk.end());
    }
  }
  if (failure) {
    spool(undelivered);
    throw *failure;
  }
  return acked;
}

void Forwarder::spool(const std::vector<SecurityEvent>& chunk) {
  std::lock_guard lock(spool_mutex_);
  if (spool_path_.empty()) {
    memory_spool_.insert(memory_spool_.end(), chunk.begin(), chunk.end());
    return;
  }
  std::ofstream out(spool_path_, std::ios::app);
  for (const auto& e : chunk) out << json(e).dump() << '\n';
  if (!out) throw Error(ErrorCode::Storage, "cannot write spool " + spool_path_.string());
}

std::size_t Forwarder::spooled() const {
  std::lock_guard lock(spool_mutex_);
  if (spool_path_.empty()) return memory_spool_.size();
  std::ifstream in(spool_path_);
  std::size_t n = 0;
  std::string line;
  while (std::getline(in, line)) n += line.empty() ? 0 : 1;
  return n;
}

std::size_t Forwarder::flush_spool() {
  std::vector<SecurityEvent> pending;
  {
    std::lock_guard lock(spool_mutex_);
    if (spool_path_.empty()) {
      pending.swap(memory_spool_);
    } else if (std::filesystem::exists(spool_path_)) {
      std::ifstream in(spool_path_);
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto j = json::parse(line, nullptr, false);
        if (!j.is_discarded()) pending.push_back(event_from_json(j));
      }
      in.close();
      std::filesystem::remove(spool_path_);
    }
  }
  if (pending.empty()) return 0;
  return forward(pending);  // re-spools on failure
}

json to_json(const AgentMetrics& m) {
  return {{"lines", m.lines},
          {"parsed", m.parsed},
          {"parse_errors", m.parse_errors},
          {"forwarded", m.forwarded},
          {"delivery_failures", m.delivery_failures},
          {"failures_by_ip", m.failures_by_ip}};
}

NodeAgent::NodeAgent(AgentOptions options, EventSink& sink, Forwarder::Sleep sleep)
    : options_(std::move(options)),
      forwarder_(sink, options_.retry,
                 options_.data_dir.empty() ? std::filesystem::path{} : options_.data_dir / "agent-spool.jsonl",
                 std::move(sleep)) {
  if (!options_.data_dir.empty()) std::filesystem::create_directories(options_.data_dir);
}

NodeAgent::~NodeAgent() { stop(); }

std::filesystem::path NodeAgent::deadletter_path() const {
  return options_.data_dir.empty() ? std::filesystem::path{} : options_.data_dir / "agent-deadletter.log";
}

std::size_t NodeAgent::poll() {
  std::lock_guard lock(mutex_);
  std::ifstream in(options_.log_path, std::ios::binary);
  if (!in) return 0;
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::uint64_t>(in.tellg());
  if (size < offset_) {
    // Truncated or rotated: start over.
    offset_ = 0;
    line_no_ = 0;
    partial_.clear();
  }
  if (size == offset_) return 0;
  in.seekg(static_cast<std::streamoff>(offset_));
  std::string chunk(size - offset_, '\0');
  in.read(chunk.data(), static_cast<std::streamsize>(chunk.size()));
  chunk.resize(static_cast<std::size_t>(in.gcount()));
  offset_ += chunk.size();
  partial_ += chunk;

  std::size_t read = 0;
  std::size_t start = 0;
  std::ofstream deadletter;
  AgentMetrics delta;
  for (auto nl = partial_.find('\n'); nl != std::string::npos; nl = partial_.find('\n', start)) {
    std::string_view line(partial_.data() + start, nl - start);
    start = nl + 1;
    ++line_no_;
    ++read;
    ++delta.lines;
    try {
      auto record = parse_access_record(line);
      auto event = normalize(record, options_.identity, line_no_);
      if (event.kind == EventKind::AuthFailure) ++delta.failures_by_ip[record.client_ip];
      if (buffer_.empty()) first_buffered_ = std::chrono::steady_clock::now();
      buffer_.push_back(std::move(event));
      ++delta.parsed;
    } catch (const Error&) {
      ++delta.parse_errors;
      if (!options_.data_dir.empty()) {
        if (!deadletter.is_open()) deadletter.open(deadletter_path(), std::ios::app);
        deadletter << line << '\n';
      }
    }
  }
  partial_.erase(0, start);

  std::lock_guard m(metrics_mutex_);
  metrics_.lines += delta.lines;
  metrics_.parsed += delta.parsed;
  metrics_.parse_errors += delta.parse_errors;
  for (const auto& [ip, n] : delta.failures_by_ip) metrics_.failures_by_ip[ip] += n;
  return read;
}

bool NodeAgent::flush() {
  std::vector<SecurityEvent> batch;
  {
    std::lock_guard lock(mutex_);
    batch.swap(buffer_);
  }
  try {
    forwarder_.flush_spool();
  } catch (const Error&) {
    // Still unreachable; the fresh batch joins the spool below.
  }
  if (batch.empty()) return forwarder_.spooled() == 0;
  bool ok = true;
  std::size_t sent = 0;
  for (std::size_t i = 0; i < batch.size(); i += options_.max_batch) {
    std::vector<SecurityEvent> part(batch.begin() + static_cast<std::ptrdiff_t>(i),
                                    batch.begin() + static_cast<std::ptrdiff_t>(std::min(batch.size(), i + options_.max_batch)));
    try {
      forwarder_.forward(part);
      sent += part.size();
    } catch (const Error&) {
      ok = false;
    }
  }
  std::lock_guard m(metrics_mutex_);
  metrics_.forwarded += sent;
  if (!ok) ++metrics_.delivery_failures;
  return ok;
}

void NodeAgent::start() {
  if (running_.exchange(true)) return;
  thread_ = std::thread([this] { loop(); });
}

void NodeAgent::stop() {
  if (!running_.exchange(false)) return;
  wake_.notify_all();
  if (thread_.joinable()) thread_.join();
  poll();
  flush();
}

void NodeAgent::loop() {
  while (running_) {
    poll();
    bool due = false;
    {
      std::lock_guard lock(mutex_);
      due = buffer_.size() >= options_.max_batch ||
            (!buffer_.empty() && std::chrono::steady_clock::now() - first_buffered_ >= options_.flush_interval);
    }
    if (due || forwarder_.spooled() > 0) flush();
    std::unique_lock lock(wake_mutex_);
    wake_.wait_for(lock, options_.poll_interval, [this] { return !running_; });
  }
}

AgentMetrics NodeAgent::metrics() const {
  std::lock_guard lock(metrics_mutex_);
  return metrics_;
}

}  // namespace warden

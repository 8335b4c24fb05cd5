#include "warden/registry.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

namespace warden {

using nlohmann::json;

namespace {

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw Error(ErrorCode::Storage, "corrupt state file " + path.string());
  return j;
}

void write_json_atomically(const std::filesystem::path& path, const json& j) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    out << j.dump(2) << '\n';
    if (!out) throw Error(ErrorCode::Storage, "cannot write " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::Storage, "cannot replace " + path.string() + ": " + ec.message());
}

}  // namespace

json to_json(const InfrastructureNode& n) {
  json components = json::array();
  for (const auto& c : n.components) components.push_back({{"component", c.component}, {"namespace", c.ns}});
  return {{"node_name", n.node_name},
          {"namespaces", n.namespaces},
          {"registered_ts", n.registered_ts},
          {"agent_endpoints", n.agent_endpoints},
          {"components", components}};
}

InfrastructureNode node_from_json(const json& j) {
  std::vector<FieldError> errors;
  if (!j.is_object()) raise(ErrorCode::Validation, "invalid node descriptor", {{"", "expected object"}});
  InfrastructureNode n;
  if (j.contains("node_name") && j["node_name"].is_string() && !j["node_name"].get<std::string>().empty()) {
    n.node_name = j["node_name"].get<std::string>();
  } else {
    errors.push_back({"/node_name", "required non-empty string"});
  }
  const auto namespaces = j.value("namespaces", json());
  if (!namespaces.is_array() || namespaces.empty()) {
    errors.push_back({"/namespaces", "required non-empty array"});
  } else {
    for (std::size_t i = 0; i < namespaces.size(); ++i) {
      if (!namespaces[i].is_string() || namespaces[i].get<std::string>().empty()) {
        errors.push_back({"/namespaces/" + std::to_string(i), "expected non-empty string"});
      } else if (std::find(n.namespaces.begin(), n.namespaces.end(), namespaces[i]) == n.namespaces.end()) {
        n.namespaces.push_back(namespaces[i].get<std::string>());
      }
    }
  }
  const auto endpoints = j.value("agent_endpoints", json::array());
  if (!endpoints.is_array()) {
    errors.push_back({"/agent_endpoints", "expected array"});
  } else {
    for (const auto& e : endpoints) {
      if (e.is_string()) n.agent_endpoints.push_back(e.get<std::string>());
    }
  }
  const auto components = j.value("components", json::array());
  for (std::size_t i = 0; components.is_array() && i < components.size(); ++i) {
    const auto& c = components[i];
    const auto path = "/components/" + std::to_string(i);
    if (!c.is_object() || !c.value("component", json()).is_string() || !c.value("namespace", json()).is_string()) {
      errors.push_back({path, "expected {component, namespace}"});
      continue;
    }
    ComponentRef ref{c["component"].get<std::string>(), c["namespace"].get<std::string>()};
    if (std::find(n.namespaces.begin(), n.namespaces.end(), ref.ns) == n.namespaces.end()) {
      errors.push_back({path + "/namespace", "namespace " + ref.ns + " not declared by the node"});
    }
    n.components.push_back(std::move(ref));
  }
  if (!components.is_array()) errors.push_back({"/components", "expected array"});
  n.registered_ts = j.value("registered_ts", TimestampMs{0});
  if (!errors.empty()) raise(ErrorCode::Validation, "invalid node descriptor", std::move(errors));
  return n;
}

InfrastructureRegistry::InfrastructureRegistry(std::filesystem::path data_dir) {
  if (data_dir.empty()) return;
  std::filesystem::create_directories(data_dir);
  path_ = data_dir / "nodes.json";
  if (!std::filesystem::exists(path_)) return;
  for (const auto& j : read_json_file(path_)) {
    auto n = node_from_json(j);
    nodes_.emplace(n.node_name, std::move(n));
  }
}

InfrastructureNode InfrastructureRegistry::register_node(InfrastructureNode node, TimestampMs now) {
  node.registered_ts = now;
  std::unique_lock lock(mutex_);
  if (nodes_.contains(node.node_name)) throw Error(ErrorCode::DuplicateNode, "node " + node.node_name + " already registered");
  nodes_.emplace(node.node_name, node);
  try {
    persist_locked();
  } catch (...) {
    nodes_.erase(node.node_name);
    throw;
  }
  return node;
}

std::vector<InfrastructureNode> InfrastructureRegistry::nodes() const {
  std::shared_lock lock(mutex_);
  std::vector<InfrastructureNode> out;
  for (const auto& [name, n] : nodes_) out.push_back(n);
  return out;
}

std::set<std::string> InfrastructureRegistry::namespaces() const {
  std::shared_lock lock(mutex_);
  std::set<std::string> out;
  for (const auto& [name, n] : nodes_) out.insert(n.namespaces.begin(), n.namespaces.end());
  return out;
}

bool InfrastructureRegistry::has_namespace(const std::string& ns) const { return namespaces().contains(ns); }

std::vector<ComponentRef> InfrastructureRegistry::components() const {
  std::shared_lock lock(mutex_);
  std::set<ComponentRef> out;
  for (const auto& [name, n] : nodes_) out.insert(n.components.begin(), n.components.end());
  return {out.begin(), out.end()};
}

void InfrastructureRegistry::persist_locked() const {
  if (path_.empty()) return;
  json j = json::array();
  for (const auto& [name, n] : nodes_) j.push_back(to_json(n));
  write_json_atomically(path_, j);
}

PolicyStore::PolicyStore(std::filesystem::path data_dir) {
  if (data_dir.empty()) return;
  std::filesystem::create_directories(data_dir);
  path_ = data_dir / "policies.json";
  if (!std::filesystem::exists(path_)) return;
  for (const auto& j : read_json_file(path_)) {
    auto p = instance_from_json(j);
    if (p.policy_id.starts_with("pol-")) {
      next_id_ = std::max<std::uint64_t>(next_id_, std::strtoull(p.policy_id.c_str() + 4, nullptr, 10) + 1);
    }
    policies_.emplace(p.policy_id, std::move(p));
  }
}

PolicyInstance PolicyStore::add(PolicyInstance instance) {
  std::unique_lock lock(mutex_);
  const auto identity = instance_identity(instance);
  for (const auto& [id, p] : policies_) {
    if (instance_identity(p) == identity) throw Error(ErrorCode::Duplicate, "identical policy already onboarded as " + id);
  }
  if (instance.policy_id.empty()) {
    char id[32];
    do {
      std::snprintf(id, sizeof id, "pol-%06llu", static_cast<unsigned long long>(next_id_++));
    } while (policies_.contains(id));
    instance.policy_id = id;
  } else if (policies_.contains(instance.policy_id)) {
    throw Error(ErrorCode::Duplicate, "policy id " + instance.policy_id + " already exists");
  }
  policies_.emplace(instance.policy_id, instance);
  try {
    persist_locked();
  } catch (...) {
    policies_.erase(instance.policy_id);
    throw;
  }
  return instance;
}

std::optional<PolicyInstance> PolicyStore::get(const std::string& policy_id) const {
  std::shared_lock lock(mutex_);
  auto it = policies_.find(policy_id);
  if (it == policies_.end()) return std::nullopt;
  return it->second;
}

std::vector<PolicyInstance> PolicyStore::list() const {
  std::shared_lock lock(mutex_);
  std::vector<PolicyInstance> out;
  for (const auto& [id, p] : policies_) out.push_back(p);
  return out;
}

PolicyInstance PolicyStore::remove(const std::string& policy_id) {
  std::unique_lock lock(mutex_);
  auto it = policies_.find(policy_id);
  if (it == policies_.end()) throw Error(ErrorCode::UnknownPolicy, "no policy " + policy_id);
  auto removed = it->second;
  policies_.erase(it);
  persist_locked();
  return removed;
}

void PolicyStore::persist_locked() const {
  if (path_.empty()) return;
  json j = json::array();
  for (const auto& [id, p] : policies_) j.push_back(to_json(p));
  write_json_atomically(path_, j);
}

}  // namespace warden

#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "warden/clock.hpp"
#include "warden/policy.hpp"
#include "warden/vuln_scanner.hpp"

namespace warden {

struct InfrastructureNode {
  std::string node_name;
  std::vector<std::string> namespaces;
  TimestampMs registered_ts = 0;
  std::vector<std::string> agent_endpoints;
  // Application components hosted on the node; these are what scans must cover.
  std::vector<ComponentRef> components;

  bool operator==(const InfrastructureNode&) const = default;
};

nlohmann::json to_json(const InfrastructureNode& n);
// Throws Error{Validation} with per-field details.
InfrastructureNode node_from_json(const nlohmann::json& j);

// Registered nodes, persisted to `<data_dir>/nodes.json`.
class InfrastructureRegistry {
 public:
  explicit InfrastructureRegistry(std::filesystem::path data_dir = {});

  // Throws DuplicateNode, Validation or Storage.
  InfrastructureNode register_node(InfrastructureNode node, TimestampMs now);
  std::vector<InfrastructureNode> nodes() const;
  std::set<std::string> namespaces() const;
  bool has_namespace(const std::string& ns) const;
  std::vector<ComponentRef> components() const;

 private:
  void persist_locked() const;

  std::filesystem::path path_;
  mutable std::shared_mutex mutex_;
  std::map<std::string, InfrastructureNode> nodes_;
};

// Onboarded policy instances, persisted to `<data_dir>/policies.json`.
class PolicyStore {
 public:
  explicit PolicyStore(std::filesystem::path data_dir = {});

  // Assigns a policy id when empty. Throws Duplicate when an instance with the
  // same identity or id exists.
  PolicyInstance add(PolicyInstance instance);
  std::optional<PolicyInstance> get(const std::string& policy_id) const;
  std::vector<PolicyInstance> list() const;
  // Throws UnknownPolicy.
  PolicyInstance remove(const std::string& policy_id);

 private:
  void persist_locked() const;

  std::filesystem::path path_;
  mutable std::shared_mutex mutex_;
  std::map<std::string, PolicyInstance> policies_;
  std::uint64_t next_id_ = 1;
};

}  // namespace warden

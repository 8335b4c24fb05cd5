#include "warden/detection.hpp"

#include <algorithm>
#include <limits>
#include <set>

namespace warden {

struct DetectionRuntime::Deployment {
  struct Entry {
    TimestampMs ts;
    std::string event_id;
  };
  using Windows = std::unordered_map<std::string, std::deque<Entry>>;

  explicit Deployment(PolicyInstance p) : policy(std::move(p)) {
    leaves = policy.rule.window_conditions();
    group_by = leaves.front()->group_by;
    for (const auto* leaf : leaves) horizon_ms = std::max(horizon_ms, leaf->window_s * 1000);
    windows.resize(leaves.size());
    has_block = policy.has_action(ActionKind::BlockIp);
  }

  bool in_scope(const SecurityEvent& e) const {
    if (policy.scope.ns && e.source.ns != *policy.scope.ns) return false;
    if (policy.scope.component) {
      const auto* component = e.attr(attr::kComponent);
      if (component == nullptr || *component != *policy.scope.component) return false;
    }
    return true;
  }

  PolicyInstance policy;
  std::vector<const WindowCondition*> leaves;  // point into policy.rule
  std::string group_by;
  TimestampMs horizon_ms = 0;
  bool has_block = false;

  std::mutex mutex;
  std::vector<Windows> windows;  // one per leaf
  std::unordered_map<std::string, TimestampMs> last_fired;
  std::optional<TimestampMs> watermark;
  std::uint64_t since_sweep = 0;

  // Declared last so it is torn down (and its thread joined) first.
  std::unique_ptr<Subscription> subscription;
};

namespace {

constexpr std::uint64_t kSweepEvery = 1024;

struct LeafResult {
  bool satisfied = false;
  std::vector<std::string> evidence;
};

// Combines leaf results along the rule tree; `next_leaf` walks leaves in the
// same depth-first order as RuleExpr::window_conditions().
bool combine(const RuleExpr& node, const std::vector<LeafResult>& leaves, std::size_t& next_leaf,
             std::set<std::string>& evidence) {
  switch (node.kind) {
    case RuleExpr::Kind::Window: {
      const auto& leaf = leaves[next_leaf++];
      if (leaf.satisfied) evidence.insert(leaf.evidence.begin(), leaf.evidence.end());
      return leaf.satisfied;
    }
    case RuleExpr::Kind::Report:
      return false;
    case RuleExpr::Kind::AnyOf: {
      bool any = false;
      for (const auto& child : node.children) {
        std::set<std::string> child_evidence;
        if (combine(child, leaves, next_leaf, child_evidence)) {
          any = true;
          evidence.insert(child_evidence.begin(), child_evidence.end());
        }
      }
      return any;
    }
    case RuleExpr::Kind::AllOf: {
      bool all = true;
      std::set<std::string> collected;
      for (const auto& child : node.children) all = combine(child, leaves, next_leaf, collected) && all;
      if (all) evidence.insert(collected.begin(), collected.end());
      return all;
    }
  }
  return false;
}

}  // namespace

nlohmann::json to_json(const DetectionMetrics& m) {
  return {{"events_evaluated", m.events_evaluated}, {"matches", m.matches},
          {"suppressed", m.suppressed},             {"dropped_malformed", m.dropped_malformed},
          {"skipped_no_group", m.skipped_no_group}, {"late_dropped", m.late_dropped},
          {"incidents", m.incidents}};
}

DetectionRuntime::DetectionRuntime(Enactor& enactor, IncidentStore& incidents, Blocklist& blocklist,
                                   std::shared_ptr<Clock> clock, DetectionOptions options)
    : enactor_(enactor), incidents_(incidents), blocklist_(blocklist), clock_(std::move(clock)), options_(options) {}

DetectionRuntime::~DetectionRuntime() {
  std::map<std::string, std::shared_ptr<Deployment>> doomed;
  {
    std::unique_lock lock(mutex_);
    doomed.swap(deployments_);
  }
  for (auto& [id, d] : doomed) d->subscription.reset();
}

PolicyInstance DetectionRuntime::deploy(PolicyInstance instance, Broker* broker) {
  if (!instance.is_runtime()) {
    throw Error(ErrorCode::NotRuntimeRule,
                "policy " + instance.policy_id + " has no window condition; report rules are evaluated by scans");
  }
  if (!instance.rule.report_conditions().empty()) {
    throw Error(ErrorCode::NotRuntimeRule, "policy " + instance.policy_id + " mixes window and report conditions");
  }
  const auto leaves = instance.rule.window_conditions();
  for (const auto* leaf : leaves) {
    if (leaf->group_by != leaves.front()->group_by) {
      throw Error(ErrorCode::NotRuntimeRule, "all window conditions of a policy must share one group_by attribute");
    }
  }
  instance.enabled = true;
  auto deployment = std::make_shared<Deployment>(instance);
  {
    std::unique_lock lock(mutex_);
    if (deployments_.contains(instance.policy_id)) {
      throw Error(ErrorCode::AlreadyDeployed, "policy " + instance.policy_id + " already deployed");
    }
    deployments_.emplace(instance.policy_id, deployment);
  }
  if (broker != nullptr) {
    EventFilter filter;
    for (const auto* leaf : deployment->leaves) {
      if (std::find(filter.kinds.begin(), filter.kinds.end(), leaf->event.kind) == filter.kinds.end()) {
        filter.kinds.push_back(leaf->event.kind);
      }
    }
    if (instance.scope.ns) filter.namespaces.push_back(*instance.scope.ns);
    auto* raw = deployment.get();
    auto subscription = broker->subscribe(std::move(filter), [this, raw](const SecurityEvent& e) {
      if (!validate_event(e).empty()) {
        ++counters_.dropped_malformed;
        return;
      }
      for (const auto& match : evaluate(*raw, e)) on_match(match);
    });
    std::lock_guard lock(deployment->mutex);
    deployment->subscription = std::move(subscription);
  }
  return instance;
}

void DetectionRuntime::undeploy(const std::string& policy_id) {
  std::shared_ptr<Deployment> d;
  {
    std::unique_lock lock(mutex_);
    auto it = deployments_.find(policy_id);
    if (it == deployments_.end()) throw Error(ErrorCode::UnknownPolicy, "policy " + policy_id + " not deployed");
    d = it->second;
    deployments_.erase(it);
  }
  std::unique_ptr<Subscription> subscription;
  {
    std::lock_guard lock(d->mutex);
    subscription = std::move(d->subscription);
  }
  subscription.reset();
}

bool DetectionRuntime::is_deployed(const std::string& policy_id) const { return find(policy_id) != nullptr; }

std::vector<PolicyInstance> DetectionRuntime::deployed() const {
  std::shared_lock lock(mutex_);
  std::vector<PolicyInstance> out;
  for (const auto& [id, d] : deployments_) out.push_back(d->policy);
  return out;
}

void DetectionRuntime::set_policy_lookup(PolicyLookup lookup) {
  std::unique_lock lock(mutex_);
  lookup_ = std::move(lookup);
}

std::shared_ptr<DetectionRuntime::Deployment> DetectionRuntime::find(const std::string& policy_id) const {
  std::shared_lock lock(mutex_);
  auto it = deployments_.find(policy_id);
  return it == deployments_.end() ? nullptr : it->second;
}

std::optional<PolicyInstance> DetectionRuntime::policy(const std::string& policy_id) const {
  if (auto d = find(policy_id)) return d->policy;
  PolicyLookup lookup;
  {
    std::shared_lock lock(mutex_);
    lookup = lookup_;
  }
  if (lookup) return lookup(policy_id);
  return std::nullopt;
}

std::vector<RuleMatch> DetectionRuntime::evaluate(Deployment& d, const SecurityEvent& event) {
  if (!d.in_scope(event)) return {};
  std::vector<std::size_t> relevant;
  for (std::size_t i = 0; i < d.leaves.size(); ++i) {
    if (d.leaves[i]->event.matches(event)) relevant.push_back(i);
  }
  if (relevant.empty()) return {};

  const auto* key_attr = event.attr(d.group_by);
  if (key_attr == nullptr || key_attr->empty()) {
    ++counters_.skipped_no_group;
    return {};
  }
  const std::string& key = *key_attr;

  std::lock_guard lock(d.mutex);
  ++counters_.events_evaluated;
  if (d.watermark && event.ts < *d.watermark - options_.lateness_ms) {
    ++counters_.late_dropped;
    return {};
  }
  const bool in_order = !d.watermark || event.ts >= *d.watermark;
  if (in_order) d.watermark = event.ts;

  for (auto i : relevant) {
    auto& q = d.windows[i][key];
    Deployment::Entry entry{event.ts, event.event_id};
    if (q.empty() || q.back().ts <= event.ts) {
      q.push_back(std::move(entry));
    } else {
      auto pos = std::upper_bound(q.begin(), q.end(), event.ts,
                                  [](TimestampMs ts, const Deployment::Entry& e) { return ts < e.ts; });
      q.insert(pos, std::move(entry));
    }
  }

  if (++d.since_sweep >= kSweepEvery) {
    d.since_sweep = 0;
    for (std::size_t i = 0; i < d.leaves.size(); ++i) {
      const auto cutoff = *d.watermark - d.leaves[i]->window_s * 1000;
      for (auto it = d.windows[i].begin(); it != d.windows[i].end();) {
        auto& q = it->second;
        while (!q.empty() && q.front().ts <= cutoff) q.pop_front();
        it = q.empty() ? d.windows[i].erase(it) : std::next(it);
      }
    }
    for (auto it = d.last_fired.begin(); it != d.last_fired.end();) {
      it = *d.watermark - it->second >= d.horizon_ms ? d.last_fired.erase(it) : std::next(it);
    }
  }

  // A late event is recorded for future windows but does not trigger.
  if (!in_order) return {};

  std::vector<LeafResult> results(d.leaves.size());
  for (std::size_t i = 0; i < d.leaves.size(); ++i) {
    const auto& leaf = *d.leaves[i];
    auto it = d.windows[i].find(key);
    if (it == d.windows[i].end()) continue;
    auto& q = it->second;
    const auto cutoff = event.ts - leaf.window_s * 1000;
    while (!q.empty() && q.front().ts <= cutoff) q.pop_front();
    results[i].satisfied = satisfies(leaf.cmp, static_cast<std::int64_t>(q.size()), leaf.threshold);
    if (results[i].satisfied) {
      for (const auto& e : q) results[i].evidence.push_back(e.event_id);
    }
  }
  std::size_t next_leaf = 0;
  std::set<std::string> evidence;
  if (!combine(d.policy.rule, results, next_leaf, evidence)) return {};

  if (options_.suppression) {
    bool suppressed = false;
    if (d.has_block && canonical_ip(key) && blocklist_.is_blocked(key, event.ts)) suppressed = true;
    if (auto last = d.last_fired.find(key); last != d.last_fired.end() && event.ts - last->second < d.horizon_ms) {
      suppressed = true;
    }
    if (suppressed) {
      ++counters_.suppressed;
      return {};
    }
  }
  d.last_fired[key] = event.ts;
  ++counters_.matches;

  RuleMatch match;
  match.policy_id = d.policy.policy_id;
  match.group_key = key;
  match.matched_at = event.ts;
  match.ns = event.source.ns;
  // Evidence in event-time order.
  for (std::size_t i = 0; i < d.leaves.size(); ++i) {
    auto it = d.windows[i].find(key);
    if (it == d.windows[i].end()) continue;
    for (const auto& e : it->second) {
      if (evidence.erase(e.event_id) > 0) match.evidence.push_back(e.event_id);
    }
  }
  nlohmann::json bindings = nlohmann::json::object();
  for (const auto& [k, v] : d.policy.bindings) bindings[k] = v;
  match.condition_snapshot = {{"rule", to_json(d.policy.rule)}, {"bindings", bindings}};
  return {std::move(match)};
}

std::vector<RuleMatch> DetectionRuntime::ingest(const SecurityEvent& event) {
  if (!validate_event(event).empty()) {
    ++counters_.dropped_malformed;
    return {};
  }
  std::vector<std::shared_ptr<Deployment>> targets;
  {
    std::shared_lock lock(mutex_);
    for (const auto& [id, d] : deployments_) targets.push_back(d);
  }
  std::vector<RuleMatch> out;
  for (const auto& d : targets) {
    auto matches = evaluate(*d, event);
    out.insert(out.end(), std::make_move_iterator(matches.begin()), std::make_move_iterator(matches.end()));
  }
  return out;
}

Incident DetectionRuntime::on_match(const RuleMatch& match) {
  auto p = policy(match.policy_id);
  if (!p) throw Error(ErrorCode::UnknownPolicy, "no policy " + match.policy_id);
  Incident incident = incidents_.create(match, clock_->now_ms());
  for (const auto& action : p->actions) {
    auto record = enactor_.enact(action, match, incident);
    if (record.outcome == Outcome::Failed) incident.errors.push_back("EnactmentError: " + record.detail);
    incident.actions_taken.push_back(std::move(record));
  }
  incidents_.update(incident);
  ++counters_.incidents;
  return incident;
}

std::vector<Incident> DetectionRuntime::process(const SecurityEvent& event) {
  std::vector<Incident> out;
  for (const auto& match : ingest(event)) out.push_back(on_match(match));
  return out;
}

std::int64_t DetectionRuntime::window_count(const std::string& policy_id, const std::string& group_key,
                                            TimestampMs at_ts) const {
  auto d = find(policy_id);
  if (!d) throw Error(ErrorCode::UnknownPolicy, "policy " + policy_id + " not deployed");
  std::lock_guard lock(d->mutex);
  auto it = d->windows[0].find(group_key);
  if (it == d->windows[0].end()) return 0;
  const auto lo = at_ts - d->leaves[0]->window_s * 1000;
  return std::count_if(it->second.begin(), it->second.end(),
                       [&](const Deployment::Entry& e) { return e.ts > lo && e.ts <= at_ts; });
}

DetectionMetrics DetectionRuntime::metrics() const {
  DetectionMetrics m;
  m.events_evaluated = counters_.events_evaluated.load();
  m.matches = counters_.matches.load();
  m.suppressed = counters_.suppressed.load();
  m.dropped_malformed = counters_.dropped_malformed.load();
  m.skipped_no_group = counters_.skipped_no_group.load();
  m.late_dropped = counters_.late_dropped.load();
  m.incidents = counters_.incidents.load();
  return m;
}

}  // namespace warden

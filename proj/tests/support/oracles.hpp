#pragma once

// Brute-force reference evaluations used to check the production code paths.
// Deliberately naive: quadratic scans, no shared code with the library.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace warden::oracle {

struct StreamEvent {
  std::int64_t ts;
  std::string group;
};

// For event j, counts events k <= j of the same group with
// ts_j - window_ms < ts_k <= ts_j, and reports whether the count crosses the
// threshold under `strict` (>) or non-strict (>=) comparison.
inline std::vector<bool> window_satisfied(const std::vector<StreamEvent>& stream, std::int64_t window_ms,
                                          std::int64_t threshold, bool strict) {
  std::vector<bool> out(stream.size(), false);
  for (std::size_t j = 0; j < stream.size(); ++j) {
    std::int64_t count = 0;
    for (std::size_t k = 0; k <= j; ++k) {
      if (stream[k].group == stream[j].group && stream[k].ts > stream[j].ts - window_ms &&
          stream[k].ts <= stream[j].ts) {
        ++count;
      }
    }
    out[j] = strict ? count > threshold : count >= threshold;
  }
  return out;
}

// Applies time-based suppression: after a group fires at t, it cannot fire
// again before t + window_ms.
inline std::vector<bool> with_suppression(const std::vector<StreamEvent>& stream, const std::vector<bool>& satisfied,
                                          std::int64_t window_ms) {
  std::vector<bool> out(stream.size(), false);
  std::map<std::string, std::int64_t> last;
  for (std::size_t j = 0; j < stream.size(); ++j) {
    if (!satisfied[j]) continue;
    auto it = last.find(stream[j].group);
    if (it != last.end() && stream[j].ts - it->second < window_ms) continue;
    last[stream[j].group] = stream[j].ts;
    out[j] = true;
  }
  return out;
}

// Does any window of length window_ms (half-open on the left) contain more than
// `threshold` of the given timestamps? Checks every window anchored at an event.
inline bool any_window_exceeds(const std::vector<std::int64_t>& ts, std::int64_t window_ms, std::int64_t threshold) {
  for (auto anchor : ts) {
    std::int64_t count = 0;
    for (auto t : ts) count += (t > anchor - window_ms && t <= anchor) ? 1 : 0;
    if (count > threshold) return true;
  }
  return false;
}

struct Finding {
  std::string severity;
  double score;
};

// The vulnerability alert rule evaluated literally over a findings multiset:
// count(critical) > critical_gt OR count(high) >= high_ge OR
// count(score > score_floor) >= score_count.
inline bool vuln_rule(const std::vector<Finding>& findings, int critical_gt = 4, int high_ge = 6,
                      double score_floor = 5.3, int score_count = 10) {
  int critical = 0, high = 0, scored = 0;
  for (const auto& f : findings) {
    if (f.severity == "critical") ++critical;
    if (f.severity == "high") ++high;
    if (f.score > score_floor) ++scored;
  }
  return critical > critical_gt || high >= high_ge || scored >= score_count;
}

// Dotted numeric version order with zero padding, compared digit-group by
// digit-group as plain integers.
inline int compare_versions(const std::string& a, const std::string& b) {
  auto split = [](const std::string& s) {
    std::vector<unsigned long long> parts;
    std::size_t start = 0;
    while (start <= s.size()) {
      auto dot = s.find('.', start);
      if (dot == std::string::npos) dot = s.size();
      parts.push_back(std::stoull(s.substr(start, dot - start)));
      start = dot + 1;
    }
    return parts;
  };
  auto pa = split(a), pb = split(b);
  const auto n = std::max(pa.size(), pb.size());
  pa.resize(n, 0);
  pb.resize(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (pa[i] != pb[i]) return pa[i] < pb[i] ? -1 : 1;
  }
  return 0;
}

}  // namespace warden::oracle

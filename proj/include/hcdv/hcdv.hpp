#pragma once

// Hierarchical valuation: local Shapley games per level, positive-part
// normalisation within each budget scope, budget down-propagation with
// clipped payoff weights, and point-level valuation inside the leaves.

#include <chrono>
#include <cmath>
#include <limits>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "hcdv/core.hpp"
#include "hcdv/hierarchy.hpp"
#include "hcdv/shapley.hpp"
#include "hcdv/utility.hpp"

namespace hcdv {

enum class LeafMode { exact_if_small, always_uniform };

inline LeafMode parse_leaf_mode(std::string_view s) {
  if (s == "exact_if_small") return LeafMode::exact_if_small;
  if (s == "always_uniform") return LeafMode::always_uniform;
  throw Error("unknown leaf mode: " + std::string(s));
}

inline const char* to_string(LeafMode m) {
  return m == LeafMode::exact_if_small ? "exact_if_small" : "always_uniform";
}

struct HcdvConfig {
  std::size_t T = 256;
  double lambda = 0.0;
  std::size_t M = 12;
  LeafMode leaf_mode = LeafMode::exact_if_small;
  std::uint64_t seed = 0;
  /// One game over all coalitions of a level instead of one per parent.
  bool global_games = false;
  /// Rescale estimates to the scope budget. Off only for diagnostics.
  bool normalise = true;
  std::size_t workers = 1;
  /// Multiplier applied to the propagation weights. Anything but 1 breaks
  /// mass conservation; used to check that the checks notice.
  double weight_fault = 1.0;

  void validate() const {
    if (T < 1) throw Error("T must be at least 1");
    if (M < 1) throw Error("leaf cap M must be at least 1");
    if (lambda < 0.0) throw Error("lambda must be non-negative");
  }
};

/// Clipped, normalised payoff weights; uniform when every clipped payoff is 0.
inline std::vector<double> propagation_weights(std::span<const double> payoffs) {
  if (payoffs.empty()) throw Error("propagation_weights needs at least one child");
  double total = 0.0;
  for (double p : payoffs) total += std::max(p, 0.0);
  std::vector<double> w(payoffs.size());
  if (total <= 0.0) {
    std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(w.size()));
    return w;
  }
  for (std::size_t j = 0; j < w.size(); ++j) w[j] = std::max(payoffs[j], 0.0) / total;
  return w;
}

/// total * max(x_j, 0) / sum max(x, 0), uniform fallback.
inline std::vector<double> positive_part_allocation(std::span<const double> raw, double total) {
  auto w = propagation_weights(raw);
  for (double& v : w) v *= total;
  return w;
}

/// Per-node outcome; NaN where a quantity does not apply.
struct NodeRecord {
  static constexpr double nan = std::numeric_limits<double>::quiet_NaN();
  bool present = false;
  double raw = nan;     // estimate from the game the node played in
  double mass = nan;    // normalised estimate: what the node's points share
  double budget = nan;  // weight * parent mass
  double weight = nan;
};

struct HcdvResult {
  ValueVector values;
  double v_full = 0.0;
  double v_empty = 0.0;
  double root_surplus = 0.0;
  std::vector<NodeRecord> nodes;
  std::uint64_t evaluations = 0;
  std::vector<std::string> warnings;
  /// Raw estimates of each level's global game (global_games mode only).
  std::vector<std::vector<double>> level_estimates;
};

namespace detail {

inline std::vector<PointSet> member_sets(const HierarchyTree& tree, std::span<const std::size_t> ids) {
  std::vector<PointSet> out;
  out.reserve(ids.size());
  for (std::size_t id : ids) out.push_back(tree.nodes[id].members);
  return out;
}

inline void require_finite(double v, std::size_t node, const char* what) {
  if (!std::isfinite(v)) throw Error(std::string("non-finite ") + what + " at node " + std::to_string(node));
}

}  // namespace detail

/// The game among the children of `parent`.
template <typename Payoff>
CoalitionGame parent_game(const Payoff& payoff, double bound, const HierarchyTree& tree, std::size_t parent) {
  return union_game(detail::member_sets(tree, tree.nodes[parent].children), payoff, bound);
}

/// The game among all coalitions of one level.
template <typename Payoff>
CoalitionGame level_game(const Payoff& payoff, double bound, const HierarchyTree& tree, std::size_t level) {
  return union_game(detail::member_sets(tree, tree.levels[level]), payoff, bound);
}

inline RngStream parent_game_stream(const HcdvConfig& cfg, const TreeNode& parent) {
  return RngStream(cfg.seed, {Purpose::level_game, parent.id, parent.version});
}

inline RngStream level_game_stream(const HcdvConfig& cfg, std::size_t level) {
  return RngStream(cfg.seed, {Purpose::global_game, level, 0});
}

inline RngStream leaf_game_stream(const HcdvConfig& cfg, const TreeNode& leaf) {
  return RngStream(cfg.seed, {Purpose::leaf_game, leaf.id, leaf.version});
}

/// Whether a leaf plays its point-level game, and whether exactly.
enum class LeafPlan { uniform, exact, monte_carlo };

inline LeafPlan leaf_plan(const HcdvConfig& cfg, std::size_t size) {
  if (cfg.leaf_mode == LeafMode::always_uniform || size > cfg.M || size <= 1) return LeafPlan::uniform;
  return size <= kExactShapleyLimit ? LeafPlan::exact : LeafPlan::monte_carlo;
}

/// Splits a leaf's mass among its points: the leaf game's values through the
/// positive-part allocation, or a uniform split.
template <typename Payoff>
std::vector<double> leaf_point_values(const Payoff& payoff, double bound, const HierarchyTree& tree,
                                      std::size_t leaf, double mass, const HcdvConfig& cfg) {
  const auto& node = tree.nodes[leaf];
  const std::size_t m = node.members.size();
  switch (leaf_plan(cfg, m)) {
    case LeafPlan::uniform:
      return std::vector<double>(m, mass / static_cast<double>(m));
    case LeafPlan::exact: {
      const auto game = point_game(std::vector<Index>(node.members.begin(), node.members.end()), payoff, bound);
      return positive_part_allocation(exact_shapley(game).values, mass);
    }
    case LeafPlan::monte_carlo: {
      const auto game = point_game(std::vector<Index>(node.members.begin(), node.members.end()), payoff, bound);
      auto rng = leaf_game_stream(cfg, node);
      return positive_part_allocation(monte_carlo_shapley(game, cfg.T, rng).values, mass);
    }
  }
  return {};
}

/// Raw estimates for the children of `parent` from their per-parent game.
template <typename Payoff>
std::vector<double> children_estimates(const Payoff& payoff, double bound, const HierarchyTree& tree,
                                       std::size_t parent, const HcdvConfig& cfg) {
  const auto game = parent_game(payoff, bound, tree, parent);
  auto rng = parent_game_stream(cfg, tree.nodes[parent]);
  return monte_carlo_shapley(game, cfg.T, rng).values;
}

/// Propagation weights of the children of `parent`, from singleton payoffs.
template <typename Payoff>
std::vector<double> children_weights(const Payoff& payoff, const HierarchyTree& tree, std::size_t parent,
                                     const HcdvConfig& cfg) {
  std::vector<double> singles;
  for (std::size_t c : tree.nodes[parent].children) singles.push_back(payoff(tree.nodes[c].members));
  auto w = propagation_weights(singles);
  for (double& v : w) v *= cfg.weight_fault;
  return w;
}

/// Algorithm core, generic in the payoff so that a recording payoff can
/// replay exactly which coalitions a run will query.
template <typename Payoff>
HcdvResult run_hcdv_with(const Payoff& payoff, double bound, const HierarchyTree& tree, const HcdvConfig& cfg) {
  cfg.validate();
  const std::size_t n = tree.point_count();
  HcdvResult out;
  out.nodes.assign(tree.nodes.size(), NodeRecord{});
  out.v_full = payoff(tree.root().members);
  out.v_empty = payoff(PointSet{});
  out.root_surplus = out.v_full - out.v_empty;
  if (out.root_surplus < 0.0) {
    out.warnings.push_back("root surplus is negative (" + std::to_string(out.root_surplus) +
                           "); budgets flow through uniform fallback weights");
  }
  const std::size_t root = tree.levels[0][0];
  out.nodes[root] = {true, out.root_surplus, out.root_surplus, out.root_surplus, 1.0};

  for (std::size_t l = 1; l < tree.levels.size(); ++l) {
    const auto& parents = tree.levels[l - 1];
    // Budgets: weight * parent mass.
    std::vector<std::vector<double>> weights(parents.size());
    parallel_for(parents.size(), cfg.workers, [&](std::size_t p) {
      weights[p] = children_weights(payoff, tree, parents[p], cfg);
    });
    for (std::size_t p = 0; p < parents.size(); ++p) {
      const auto& kids = tree.nodes[parents[p]].children;
      for (std::size_t j = 0; j < kids.size(); ++j) {
        auto& rec = out.nodes[kids[j]];
        rec.present = true;
        rec.weight = weights[p][j];
        rec.budget = weights[p][j] * out.nodes[parents[p]].mass;
      }
    }
    if (cfg.global_games) {
      const auto& level = tree.levels[l];
      const auto game = level_game(payoff, bound, tree, l);
      auto rng = level_game_stream(cfg, l);
      const auto raw = monte_carlo_shapley(game, cfg.T, rng, cfg.workers).values;
      out.level_estimates.push_back(raw);
      double scope = 0.0;
      for (std::size_t id : level) scope += out.nodes[id].budget;
      const auto mass = positive_part_allocation(raw, scope);
      for (std::size_t j = 0; j < level.size(); ++j) {
        detail::require_finite(raw[j], level[j], "coalition estimate");
        out.nodes[level[j]].raw = raw[j];
        out.nodes[level[j]].mass = cfg.normalise ? mass[j] : raw[j];
      }
      continue;
    }
    std::vector<std::vector<double>> raw(parents.size());
    parallel_for(parents.size(), cfg.workers, [&](std::size_t p) {
      raw[p] = children_estimates(payoff, bound, tree, parents[p], cfg);
    });
    for (std::size_t p = 0; p < parents.size(); ++p) {
      const auto& kids = tree.nodes[parents[p]].children;
      double scope = 0.0;
      for (std::size_t c : kids) scope += out.nodes[c].budget;
      const auto mass = positive_part_allocation(raw[p], scope);
      for (std::size_t j = 0; j < kids.size(); ++j) {
        detail::require_finite(raw[p][j], kids[j], "coalition estimate");
        out.nodes[kids[j]].raw = raw[p][j];
        out.nodes[kids[j]].mass = cfg.normalise ? mass[j] : raw[p][j];
      }
    }
  }

  out.values.values.assign(n, 0.0);
  const auto& leaves = tree.leaves();
  std::vector<std::vector<double>> leaf_values(leaves.size());
  parallel_for(leaves.size(), cfg.workers, [&](std::size_t k) {
    leaf_values[k] = leaf_point_values(payoff, bound, tree, leaves[k], out.nodes[leaves[k]].mass, cfg);
  });
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    const auto& members = tree.nodes[leaves[k]].members;
    for (std::size_t j = 0; j < members.size(); ++j) {
      detail::require_finite(leaf_values[k][j], leaves[k], "point value");
      out.values.values[members[j]] = leaf_values[k][j];
    }
  }
  return out;
}

/// Point-level valuations for every dataset point.
inline HcdvResult run_hcdv(const CharacteristicFn& cf, const HierarchyTree& tree, const HcdvConfig& cfg) {
  if (cfg.lambda != cf.lambda()) throw Error("HCDV lambda differs from the characteristic function's lambda");
  if (tree.point_count() != cf.dataset().n()) throw Error("tree and dataset disagree on the point count");
  const auto start = std::chrono::steady_clock::now();
  const auto before = cf.evaluation_count();
  auto out = run_hcdv_with(cf, cf.bound(), tree, cfg);
  out.evaluations = cf.evaluation_count() - before;
  out.values.method_tag = "hcdv";
  out.values.seed = cfg.seed;
  out.values.permutations_T = static_cast<std::int64_t>(cfg.T);
  out.values.wallclock_ms = detail::elapsed_ms(start);
  return out;
}

/// Writes per-node estimates and budgets back into the tree.
inline void store_in_tree(const HcdvResult& result, HierarchyTree& tree) {
  for (std::size_t id = 0; id < tree.nodes.size(); ++id) {
    const auto& rec = result.nodes[id];
    if (!rec.present) continue;
    tree.nodes[id].cached_shapley = rec.raw;
    tree.nodes[id].budget = rec.budget;
  }
}

/// Set function that only records which sets were asked for.
class RecordingPayoff {
 public:
  double operator()(const PointSet& s) const {
    keys_.insert(fingerprint(s));
    return 0.0;
  }
  [[nodiscard]] std::size_t distinct() const { return keys_.size(); }

 private:
  mutable std::unordered_set<SetKey, SetKeyHash> keys_;
};

/// Number of distinct payoff queries a run will issue; equals the run's
/// evaluation count when it starts from an empty memo.
inline std::uint64_t expected_evaluation_count(const HierarchyTree& tree, HcdvConfig cfg) {
  cfg.workers = 1;
  RecordingPayoff rec;
  run_hcdv_with(rec, 1.0, tree, cfg);
  return rec.distinct();
}

/// Closed-form upper bound on the evaluation count:
///   2 + sum over games of K_g (T + 1) + sum over leaves of leaf cost,
/// where the leaf cost is 2^|G| for exact leaves, T |G| for sampled ones and 0
/// for uniform splits.
inline std::uint64_t evaluation_bound(const HierarchyTree& tree, const HcdvConfig& cfg) {
  std::uint64_t total = 2;
  for (std::size_t l = 1; l < tree.levels.size(); ++l) {
    if (cfg.global_games) {
      total += tree.levels[l].size() * (cfg.T + 1);
    } else {
      for (std::size_t p : tree.levels[l - 1]) total += tree.nodes[p].children.size() * (cfg.T + 1);
    }
  }
  for (std::size_t id : tree.leaves()) {
    const std::size_t m = tree.nodes[id].members.size();
    switch (leaf_plan(cfg, m)) {
      case LeafPlan::uniform: break;
      case LeafPlan::exact: total += std::uint64_t{1} << m; break;
      case LeafPlan::monte_carlo: total += cfg.T * m; break;
    }
  }
  return total;
}

inline nlohmann::json budget_report(const HcdvResult& r, const HierarchyTree& tree) {
  nlohmann::json j;
  j["v_full"] = r.v_full;
  j["v_empty"] = r.v_empty;
  j["root_surplus"] = r.root_surplus;
  j["evaluation_count"] = r.evaluations;
  j["warnings"] = r.warnings;
  auto& nodes = j["nodes"] = nlohmann::json::array();
  for (std::size_t id = 0; id < r.nodes.size(); ++id) {
    const auto& rec = r.nodes[id];
    if (!rec.present) continue;
    const auto& node = tree.nodes[id];
    nodes.push_back({{"id", id},
                     {"level", node.level},
                     {"size", node.members.size()},
                     {"raw_shapley", rec.raw},
                     {"mass", rec.mass},
                     {"budget", rec.budget},
                     {"weight", rec.weight}});
  }
  return j;
}

}  // namespace hcdv

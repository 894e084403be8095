#pragma once

// Balanced, capacity-constrained recursive k-means over embeddings, producing
// a coarse-to-fine tree whose every level partitions the dataset.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hcdv/core.hpp"
#include "hcdv/embedding.hpp"

namespace hcdv {

/// Size window [lo, hi] for the K children of a parent with n members:
/// s = ceil(n/K), lo = max(1, floor((1-gamma)s)), hi = ceil((1+gamma)s).
struct CapacityWindow {
  std::size_t lo = 1;
  std::size_t hi = 1;
  std::size_t target = 1;

  static CapacityWindow of(std::size_t n, std::size_t k, double gamma) {
    CapacityWindow w;
    w.target = (n + k - 1) / k;
    const double s = static_cast<double>(w.target);
    // The small epsilon keeps exact products like 0.8 * 5 from rounding down.
    w.lo = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor((1.0 - gamma) * s + 1e-9)));
    w.hi = static_cast<std::size_t>(std::ceil((1.0 + gamma) * s - 1e-9));
    w.hi = std::max(w.hi, w.target);
    return w;
  }

  [[nodiscard]] bool contains(std::size_t size) const { return size >= lo && size <= hi; }
};

namespace detail {

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = a[k] - b[k];
    s += d * d;
  }
  return s;
}

inline std::vector<double> embedding_row(const EmbeddingMatrix& emb, Index i) {
  const auto row = emb.vectors.row(i);
  return {row.begin(), row.end()};
}

}  // namespace detail

struct KMeansSettings {
  int max_iterations = 50;
  double tolerance = 1e-6;
};

/// Lloyd's k-means with k-means++ seeding on the given rows. Returns the
/// K x d centroid matrix.
inline Matrix kmeans_centroids(const EmbeddingMatrix& emb, const PointSet& members, std::size_t k,
                               RngStream& rng, const KMeansSettings& settings = {}) {
  const std::size_t n = members.size(), d = emb.d();
  Matrix points(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = emb.vectors.row(members[i]);
    for (std::size_t c = 0; c < d; ++c) points(i, c) = row[c];
  }
  Matrix centroids(k, d);
  std::vector<double> best(n, std::numeric_limits<double>::infinity());
  std::size_t first = static_cast<std::size_t>(rng.below(n));
  for (std::size_t c = 0; c < d; ++c) centroids(0, c) = points(first, c);
  for (std::size_t j = 1; j < k; ++j) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      best[i] = std::min(best[i], detail::squared_distance(points.row(i), centroids.row(j - 1)));
      total += best[i];
    }
    std::size_t pick = 0;
    if (total <= 0.0) {
      pick = static_cast<std::size_t>(rng.below(n));
    } else {
      double u = rng.uniform() * total;
      for (pick = 0; pick + 1 < n; ++pick) {
        u -= best[pick];
        if (u < 0.0) break;
      }
    }
    for (std::size_t c = 0; c < d; ++c) centroids(j, c) = points(pick, c);
  }

  std::vector<std::size_t> assign(n, 0), count(k);
  Matrix sums(k, d);
  for (int it = 0; it < settings.max_iterations; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      double bd = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < k; ++j) {
        const double dist = detail::squared_distance(points.row(i), centroids.row(j));
        if (dist < bd) {
          bd = dist;
          assign[i] = j;
        }
      }
    }
    std::fill(sums.data().begin(), sums.data().end(), 0.0);
    std::fill(count.begin(), count.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++count[assign[i]];
      for (std::size_t c = 0; c < d; ++c) sums(assign[i], c) += points(i, c);
    }
    double shift = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      if (count[j] == 0) continue;
      double moved = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double next = sums(j, c) / static_cast<double>(count[j]);
        moved += (next - centroids(j, c)) * (next - centroids(j, c));
        centroids(j, c) = next;
      }
      shift = std::max(shift, std::sqrt(moved));
    }
    if (shift <= settings.tolerance) break;
  }
  return centroids;
}

/// k-means followed by a capacity-aware reassignment: points are placed in
/// descending order of margin (second-nearest minus nearest centroid
/// distance, ties by index) into the nearest centroid that still has room,
/// while reserving enough points to bring every part up to the window floor.
inline std::vector<PointSet> balanced_split(const EmbeddingMatrix& emb, const PointSet& members,
                                            std::size_t k, double gamma, RngStream& rng) {
  if (k == 0) throw Error("balanced_split: K must be positive");
  if (members.size() < k) {
    throw Error("balanced_split: node has " + std::to_string(members.size()) +
                " members, fewer than K=" + std::to_string(k) + "; use a smaller K");
  }
  if (!(gamma > 0.0 && gamma < 1.0)) throw Error("capacity tolerance gamma must lie in (0, 1)");
  const std::size_t n = members.size();
  const Matrix centroids = kmeans_centroids(emb, members, k, rng);
  const CapacityWindow window = CapacityWindow::of(n, k, gamma);
  // Rounding lets tiny windows span a 3:1 size ratio; capping the upper size
  // at ratio * lo keeps max/min within (1+gamma)/(1-gamma) + 1. The cap is
  // never below the target size, so the split stays feasible.
  const double ratio = (1.0 + gamma) / (1.0 - gamma) + 1.0;
  const std::size_t cap =
      std::min(window.hi, std::max(window.target, static_cast<std::size_t>(std::floor(ratio * static_cast<double>(window.lo) + 1e-9))));

  struct Candidate {
    std::size_t local;
    double margin;
    std::vector<std::size_t> order;  // centroids by distance
  };
  std::vector<Candidate> cands(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto z = detail::embedding_row(emb, members[i]);
    std::vector<double> dist(k);
    for (std::size_t j = 0; j < k; ++j) dist[j] = std::sqrt(detail::squared_distance(z, centroids.row(j)));
    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
    const double margin = k > 1 ? dist[order[1]] - dist[order[0]] : 0.0;
    cands[i] = {i, margin, std::move(order)};
  }
  std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    if (a.margin != b.margin) return a.margin > b.margin;
    return a.local < b.local;
  });

  std::vector<std::size_t> size(k, 0);
  std::vector<std::vector<Index>> parts(k);
  std::size_t deficit = k * window.lo;
  std::size_t remaining = n;
  for (const auto& c : cands) {
    const bool must_fill = remaining <= deficit;
    std::size_t chosen = k;
    for (std::size_t j : c.order) {
      if (size[j] >= cap) continue;
      if (must_fill && size[j] >= window.lo) continue;
      chosen = j;
      break;
    }
    if (chosen == k) throw Error("balanced_split: capacity window is infeasible");
    if (size[chosen] < window.lo) --deficit;
    ++size[chosen];
    --remaining;
    parts[chosen].push_back(members[c.local]);
  }
  std::vector<PointSet> out;
  out.reserve(k);
  for (auto& p : parts) out.emplace_back(std::move(p));
  return out;
}

struct TreeNode {
  std::size_t id = 0;
  std::size_t level = 0;
  std::optional<std::size_t> parent;
  std::vector<std::size_t> children;
  PointSet members;
  std::vector<double> prototype;
  std::optional<double> cached_shapley;
  std::optional<double> budget;
  /// Epoch at which this node's estimate was last computed; part of its RNG key.
  std::uint64_t version = 0;

  [[nodiscard]] bool is_leaf() const noexcept { return children.empty(); }
};

inline std::vector<double> mean_embedding(const EmbeddingMatrix& emb, const PointSet& members) {
  std::vector<double> proto(emb.d(), 0.0);
  if (members.empty()) return proto;
  for (Index i : members) {
    const auto row = emb.vectors.row(i);
    for (std::size_t c = 0; c < proto.size(); ++c) proto[c] += row[c];
  }
  for (double& v : proto) v /= static_cast<double>(members.size());
  return proto;
}

struct TreeConfig {
  std::vector<std::size_t> branching{4};
  std::size_t leaf_cap = 12;
  double gamma = 0.25;
  std::uint64_t seed = 0;
};

/// Coarse-to-fine partition tree. levels[l] lists the ids of the level-l
/// nodes; nodes no longer referenced by any level are retired.
struct HierarchyTree {
  std::vector<TreeNode> nodes;
  std::vector<std::vector<std::size_t>> levels;
  std::vector<std::size_t> branching;
  std::size_t leaf_cap = 12;
  double gamma = 0.25;

  [[nodiscard]] std::size_t depth() const noexcept { return levels.empty() ? 0 : levels.size() - 1; }
  [[nodiscard]] const TreeNode& root() const { return nodes.at(levels.at(0).at(0)); }
  [[nodiscard]] const std::vector<std::size_t>& leaves() const { return levels.back(); }
  [[nodiscard]] std::size_t point_count() const { return root().members.size(); }

  std::size_t add_node(std::size_t level, std::optional<std::size_t> parent, PointSet members,
                       std::vector<double> prototype) {
    TreeNode node;
    node.id = nodes.size();
    node.level = level;
    node.parent = parent;
    node.members = std::move(members);
    node.prototype = std::move(prototype);
    nodes.push_back(std::move(node));
    if (parent) nodes[*parent].children.push_back(nodes.back().id);
    return nodes.back().id;
  }

  /// Ancestor chain of a node, nearest first, ending at the root.
  [[nodiscard]] std::vector<std::size_t> ancestors(std::size_t id) const {
    std::vector<std::size_t> out;
    for (auto p = nodes.at(id).parent; p; p = nodes.at(*p).parent) out.push_back(*p);
    return out;
  }

  /// Leaf id per point.
  [[nodiscard]] std::vector<std::size_t> leaf_of_points() const {
    std::vector<std::size_t> out(point_count(), std::numeric_limits<std::size_t>::max());
    for (std::size_t id : leaves()) {
      for (Index i : nodes[id].members) out.at(i) = id;
    }
    return out;
  }

  /// Throws unless every level is an exact partition of {0..n-1} and every
  /// child is a subset of its parent.
  void check_partition(std::size_t n) const {
    for (std::size_t l = 0; l < levels.size(); ++l) {
      std::vector<int> seen(n, 0);
      for (std::size_t id : levels[l]) {
        const auto& node = nodes.at(id);
        if (node.level != l) throw Error("node " + std::to_string(id) + " sits on the wrong level");
        for (Index i : node.members) {
          if (i >= n || seen[i]++) {
            throw Error("level " + std::to_string(l) + " is not a partition (point " + std::to_string(i) + ")");
          }
        }
        if (node.parent) {
          const auto& parent = nodes.at(*node.parent);
          if (!std::includes(parent.members.begin(), parent.members.end(), node.members.begin(),
                             node.members.end())) {
            throw Error("node " + std::to_string(id) + " is not a subset of its parent");
          }
        }
      }
      for (std::size_t i = 0; i < n; ++i) {
        if (!seen[i]) throw Error("level " + std::to_string(l) + " misses point " + std::to_string(i));
      }
    }
  }

  /// Families whose child sizes fall outside the capacity window of their parent.
  [[nodiscard]] std::vector<std::size_t> capacity_violations() const {
    std::vector<std::size_t> bad;
    for (std::size_t l = 0; l + 1 < levels.size(); ++l) {
      for (std::size_t id : levels[l]) {
        const auto& node = nodes[id];
        if (node.children.size() <= 1) continue;
        const auto w = CapacityWindow::of(node.members.size(), node.children.size(), gamma);
        for (std::size_t c : node.children) {
          if (!w.contains(nodes[c].members.size())) {
            bad.push_back(id);
            break;
          }
        }
      }
    }
    return bad;
  }

  [[nodiscard]] std::vector<std::size_t> oversized_leaves() const {
    std::vector<std::size_t> out;
    for (std::size_t id : leaves()) {
      if (nodes[id].members.size() > leaf_cap) out.push_back(id);
    }
    return out;
  }

  void recompute_prototypes(const EmbeddingMatrix& emb) {
    for (const auto& level : levels) {
      for (std::size_t id : level) nodes[id].prototype = mean_embedding(emb, nodes[id].members);
    }
  }
};

/// Splits every node larger than the leaf cap with balanced_split, one level
/// per branching factor; smaller nodes are carried down unchanged as their
/// own single child so every level stays a full partition.
inline HierarchyTree build_tree(const EmbeddingMatrix& emb, const TreeConfig& cfg) {
  if (cfg.branching.empty()) throw Error("branching list must be non-empty");
  for (std::size_t k : cfg.branching) {
    if (k < 2) throw Error("every branching factor must be at least 2");
  }
  if (cfg.leaf_cap == 0) throw Error("leaf cap M must be positive");
  if (emb.n() == 0) throw Error("cannot build a tree over zero points");
  HierarchyTree tree;
  tree.branching = cfg.branching;
  tree.leaf_cap = cfg.leaf_cap;
  tree.gamma = cfg.gamma;
  const PointSet all = PointSet::range(emb.n());
  tree.levels.push_back({tree.add_node(0, std::nullopt, all, mean_embedding(emb, all))});

  for (std::size_t l = 0; l < cfg.branching.size(); ++l) {
    const auto& current = tree.levels.back();
    const bool any_large = std::any_of(current.begin(), current.end(), [&](std::size_t id) {
      return tree.nodes[id].members.size() > cfg.leaf_cap;
    });
    if (!any_large) break;
    std::vector<std::size_t> next;
    const std::vector<std::size_t> parents = current;
    for (std::size_t pid : parents) {
      const PointSet members = tree.nodes[pid].members;
      if (members.size() <= cfg.leaf_cap) {
        auto proto = tree.nodes[pid].prototype;
        next.push_back(tree.add_node(l + 1, pid, members, std::move(proto)));
        continue;
      }
      RngStream rng(cfg.seed, {Purpose::kmeans, pid, 0});
      const std::size_t k = std::min(cfg.branching[l], members.size());
      for (auto& part : balanced_split(emb, members, k, cfg.gamma, rng)) {
        auto proto = mean_embedding(emb, part);
        next.push_back(tree.add_node(l + 1, pid, std::move(part), std::move(proto)));
      }
    }
    tree.levels.push_back(std::move(next));
  }
  return tree;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const HierarchyTree& tree) {
  nlohmann::json j;
  j["branching"] = tree.branching;
  j["leaf_cap"] = tree.leaf_cap;
  j["gamma"] = tree.gamma;
  j["levels"] = tree.levels;
  auto& nodes = j["nodes"] = nlohmann::json::array();
  for (const auto& n : tree.nodes) {
    nlohmann::json jn;
    jn["id"] = n.id;
    jn["level"] = n.level;
    jn["parent"] = n.parent ? nlohmann::json(*n.parent) : nlohmann::json(nullptr);
    jn["children"] = n.children;
    jn["members"] = std::vector<Index>(n.members.begin(), n.members.end());
    jn["prototype"] = n.prototype;
    jn["shapley"] = n.cached_shapley ? nlohmann::json(*n.cached_shapley) : nlohmann::json(nullptr);
    jn["budget"] = n.budget ? nlohmann::json(*n.budget) : nlohmann::json(nullptr);
    jn["version"] = n.version;
    nodes.push_back(std::move(jn));
  }
  return j;
}

inline HierarchyTree tree_from_json(const nlohmann::json& j) {
  HierarchyTree tree;
  tree.branching = j.at("branching").get<std::vector<std::size_t>>();
  tree.leaf_cap = j.at("leaf_cap").get<std::size_t>();
  tree.gamma = j.at("gamma").get<double>();
  tree.levels = j.at("levels").get<std::vector<std::vector<std::size_t>>>();
  for (const auto& jn : j.at("nodes")) {
    TreeNode n;
    n.id = jn.at("id").get<std::size_t>();
    if (n.id != tree.nodes.size()) throw Error("tree JSON: node ids must be dense and ordered");
    n.level = jn.at("level").get<std::size_t>();
    if (!jn.at("parent").is_null()) n.parent = jn.at("parent").get<std::size_t>();
    n.children = jn.at("children").get<std::vector<std::size_t>>();
    n.members = PointSet::from_sorted(jn.at("members").get<std::vector<Index>>());
    n.prototype = jn.at("prototype").get<std::vector<double>>();
    if (!jn.at("shapley").is_null()) n.cached_shapley = jn.at("shapley").get<double>();
    if (!jn.at("budget").is_null()) n.budget = jn.at("budget").get<double>();
    n.version = jn.value("version", std::uint64_t{0});
    tree.nodes.push_back(std::move(n));
  }
  if (tree.levels.empty() || tree.levels[0].size() != 1) throw Error("tree JSON: level 0 must hold one root");
  return tree;
}

}  // namespace hcdv

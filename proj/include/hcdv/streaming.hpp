#pragma once

// Incremental valuation over a growing corpus: nearest-leaf assignment with a
// spawn threshold, refresh of the affected subtree only, residual budget
// re-propagation, and periodic rebalancing of overloaded leaves.

#include <chrono>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "hcdv/core.hpp"
#include "hcdv/dataset.hpp"
#include "hcdv/embedding.hpp"
#include "hcdv/hcdv.hpp"
#include "hcdv/hierarchy.hpp"
#include "hcdv/utility.hpp"

namespace hcdv {

/// Maps a standardised feature row to its embedding; frozen during streaming.
using Embedder = std::function<std::vector<float>(std::span<const double>)>;

inline Embedder identity_embedder() {
  return [](std::span<const double> x) { return std::vector<float>(x.begin(), x.end()); };
}

struct StreamConfig {
  double assign_threshold = 0.35;
  std::size_t rebalance_period = 3;
};

struct StepMetrics {
  std::uint64_t epoch = 0;
  std::size_t batch_size = 0;
  std::size_t new_leaves = 0;
  std::size_t affected_leaves = 0;
  std::size_t dirty_nodes = 0;
  std::size_t total_nodes = 0;
  std::uint64_t evaluations = 0;
  std::uint64_t evaluation_bound = 0;
  std::int64_t latency_ms = 0;
  bool rebalanced = false;
};

struct StreamState {
  std::shared_ptr<const LabeledDataset> data;
  std::shared_ptr<const EmbeddingMatrix> embedding;
  Embedder embed;
  UtilityConfig utility;
  TreeConfig tree_config;
  HcdvConfig hcdv;
  StreamConfig stream;
  std::shared_ptr<PayoffCache> cache = std::make_shared<PayoffCache>();

  HierarchyTree tree;
  std::vector<NodeRecord> records;
  std::vector<double> values;
  double root_surplus = 0.0;
  std::uint64_t epoch = 0;
  std::size_t updates_since_rebalance = 0;

  [[nodiscard]] CharacteristicFn characteristic() const {
    return CharacteristicFn(data, embedding, utility, cache);
  }

  [[nodiscard]] ValueVector value_vector() const {
    ValueVector v;
    v.values = values;
    v.method_tag = "hcdv_stream";
    v.seed = hcdv.seed;
    v.permutations_T = static_cast<std::int64_t>(hcdv.T);
    return v;
  }
};

/// Builds the tree on the initial corpus and runs the full valuation.
inline StreamState init_stream(std::shared_ptr<const LabeledDataset> data, std::shared_ptr<const EmbeddingMatrix> embedding,
                               Embedder embed, const UtilityConfig& utility, const TreeConfig& tree_config,
                               const HcdvConfig& hcdv, const StreamConfig& stream) {
  StreamState s;
  s.data = std::move(data);
  s.embedding = std::move(embedding);
  s.embed = std::move(embed);
  s.utility = utility;
  s.tree_config = tree_config;
  s.hcdv = hcdv;
  s.stream = stream;
  s.tree = build_tree(*s.embedding, tree_config);
  const auto cf = s.characteristic();
  auto result = run_hcdv(cf, s.tree, hcdv);
  store_in_tree(result, s.tree);
  s.records = std::move(result.nodes);
  s.values = std::move(result.values.values);
  s.root_surplus = result.root_surplus;
  return s;
}

namespace detail {

inline double cosine_to(std::span<const float> z, const std::vector<double>& proto) {
  std::vector<double> zd(z.begin(), z.end());
  return cosine_distance<double>(zd, proto);
}

inline void add_member(TreeNode& node, Index i) {
  std::vector<Index> m(node.members.begin(), node.members.end());
  m.push_back(i);
  node.members = PointSet(std::move(m));
}

/// Replaces an oversized leaf by a balanced split of its members, attached
/// under the same parent so that siblings keep their identity.
inline std::vector<std::size_t> split_leaf(HierarchyTree& tree, std::size_t leaf, const EmbeddingMatrix& emb,
                                           const TreeConfig& cfg, std::uint64_t epoch) {
  const PointSet members = tree.nodes[leaf].members;
  const std::size_t level = tree.nodes[leaf].level;
  const std::size_t parent = *tree.nodes[leaf].parent;
  std::size_t k = 2;
  while (k < members.size() && CapacityWindow::of(members.size(), k, cfg.gamma).hi > tree.leaf_cap) ++k;
  k = std::min(k, members.size());
  std::erase(tree.levels[level], leaf);
  std::erase(tree.nodes[parent].children, leaf);
  RngStream rng(cfg.seed, {Purpose::kmeans, leaf, epoch});
  std::vector<std::size_t> fresh;
  for (auto& part : balanced_split(emb, members, k, cfg.gamma, rng)) {
    auto proto = mean_embedding(emb, part);
    const std::size_t id = tree.add_node(level, parent, std::move(part), std::move(proto));
    tree.nodes[id].version = epoch;
    tree.levels[level].push_back(id);
    fresh.push_back(id);
  }
  return fresh;
}

}  // namespace detail

/// Appends a batch of raw rows (last column already split off as labels),
/// updating the tree and refreshing only the affected subtree.
inline StepMetrics ingest_batch(StreamState& s, const RawTable& batch) {
  const auto start = std::chrono::steady_clock::now();
  if (batch.rows() == 0) throw Error("ingest_batch: empty batch");
  if (batch.features.cols() != s.data->dim()) throw Error("ingest_batch: batch has the wrong feature width");
  for (int y : batch.labels) {
    if (y < 0 || y >= s.data->num_classes) throw Error("ingest_batch: unseen label id " + std::to_string(y));
  }
  StepMetrics metrics;
  metrics.epoch = ++s.epoch;
  metrics.batch_size = batch.rows();

  // Copy-on-write so readers of the previous state are never disturbed.
  auto data = std::make_shared<LabeledDataset>(*s.data);
  auto emb = std::make_shared<EmbeddingMatrix>(*s.embedding);
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    const auto x = data->standardise(batch.features.row(r));
    for (double v : x) {
      if (!std::isfinite(v)) throw Error("ingest_batch: non-finite feature in batch row " + std::to_string(r));
    }
    data->features.append_row(x);
    data->labels.push_back(batch.labels[r]);
    const auto z = s.embed(x);
    if (z.size() != emb->d()) throw Error("ingest_batch: embedder returned the wrong dimension");
    emb->vectors.append_row(z);
  }

  HierarchyTree& tree = s.tree;
  const std::size_t depth = tree.depth();
  std::vector<char> dirty(tree.nodes.size(), 0);
  auto mark = [&](std::size_t id) {
    if (dirty.size() < tree.nodes.size()) dirty.resize(tree.nodes.size(), 0);
    dirty[id] = 1;
    for (std::size_t a : tree.ancestors(id)) dirty[a] = 1;
  };

  const std::size_t first_new = s.data->n();
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    const Index i = static_cast<Index>(first_new + r);
    const auto z = emb->vectors.row(i);
    std::size_t best = tree.leaves().front();
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t id : tree.leaves()) {
      const double d = detail::cosine_to(z, tree.nodes[id].prototype);
      if (d < best_d) {
        best_d = d;
        best = id;
      }
    }
    std::size_t leaf = best;
    if (best_d > s.stream.assign_threshold && depth >= 1) {
      std::size_t parent = tree.levels[depth - 1].front();
      double pd = std::numeric_limits<double>::infinity();
      for (std::size_t id : tree.levels[depth - 1]) {
        const double d = detail::cosine_to(z, tree.nodes[id].prototype);
        if (d < pd) {
          pd = d;
          parent = id;
        }
      }
      leaf = tree.add_node(depth, parent, PointSet{}, std::vector<double>(z.begin(), z.end()));
      tree.nodes[leaf].version = s.epoch;
      tree.levels[depth].push_back(leaf);
      s.records.emplace_back();
      ++metrics.new_leaves;
    }
    auto& node = tree.nodes[leaf];
    const double count = static_cast<double>(node.members.size());
    for (std::size_t c = 0; c < node.prototype.size(); ++c) {
      node.prototype[c] = (node.prototype[c] * count + z[c]) / (count + 1.0);
    }
    detail::add_member(node, i);
    for (std::size_t a : tree.ancestors(leaf)) detail::add_member(tree.nodes[a], i);
    mark(leaf);
  }

  ++s.updates_since_rebalance;
  if (s.stream.rebalance_period > 0 && s.epoch % s.stream.rebalance_period == 0 && depth >= 1) {
    for (std::size_t id : tree.oversized_leaves()) {
      for (std::size_t fresh : detail::split_leaf(tree, id, *emb, s.tree_config, s.epoch)) {
        s.records.emplace_back();
        mark(fresh);
      }
      dirty[id] = 0;
      metrics.rebalanced = true;
    }
    if (metrics.rebalanced) s.updates_since_rebalance = 0;
  }
  dirty.resize(tree.nodes.size(), 0);
  for (std::size_t id = 0; id < tree.nodes.size(); ++id) {
    if (!dirty[id]) continue;
    tree.nodes[id].version = s.epoch;
    if (!tree.nodes[id].is_leaf()) tree.nodes[id].prototype = mean_embedding(*emb, tree.nodes[id].members);
  }

  s.data = data;
  s.embedding = emb;
  s.values.resize(data->n(), 0.0);
  s.records.resize(tree.nodes.size());
  const auto cf = s.characteristic();
  const auto before = cf.evaluation_count();
  const HcdvConfig& cfg = s.hcdv;

  // Root.
  const double v_full = cf(tree.root().members);
  const double v_empty = cf(PointSet{});
  s.root_surplus = v_full - v_empty;
  const std::size_t root = tree.levels[0][0];
  s.records[root] = {true, s.root_surplus, s.root_surplus, s.root_surplus, 1.0};

  std::uint64_t bound = 2;
  for (std::size_t l = 1; l < tree.levels.size(); ++l) {
    for (std::size_t p : tree.levels[l - 1]) {
      if (!dirty[p]) continue;
      const auto& kids = tree.nodes[p].children;
      const double parent_mass = s.records[p].mass;
      const auto weights = children_weights(cf, tree, p, cfg);
      bound += kids.size();
      std::vector<std::size_t> stale;
      for (std::size_t j = 0; j < kids.size(); ++j) {
        if (dirty[kids[j]]) stale.push_back(j);
      }
      if (stale.size() == kids.size()) {
        const auto raw = children_estimates(cf, cf.bound(), tree, p, cfg);
        bound += kids.size() * cfg.T;
        const auto mass = positive_part_allocation(raw, parent_mass);
        for (std::size_t j = 0; j < kids.size(); ++j) {
          detail::require_finite(raw[j], kids[j], "coalition estimate");
          s.records[kids[j]] = {true, raw[j], mass[j], weights[j] * parent_mass, weights[j]};
        }
        continue;
      }
      const auto game = parent_game(cf, cf.bound(), tree, p);
      double clean_mass = 0.0, clean_budget = 0.0, stale_weight = 0.0;
      for (std::size_t j = 0; j < kids.size(); ++j) {
        if (dirty[kids[j]]) {
          stale_weight += weights[j];
        } else {
          clean_mass += s.records[kids[j]].mass;
          clean_budget += s.records[kids[j]].budget;
        }
      }
      std::vector<double> raw(stale.size());
      for (std::size_t k = 0; k < stale.size(); ++k) {
        RngStream rng(cfg.seed, {Purpose::node_refresh, kids[stale[k]], s.epoch});
        const auto log = draw_permutation_log(cfg.T, rng);
        raw[k] = player_shapley(game, stale[k], log);
        bound += 2 * cfg.T;
        detail::require_finite(raw[k], kids[stale[k]], "coalition estimate");
      }
      const auto mass = positive_part_allocation(raw, parent_mass - clean_mass);
      const double residual_budget = parent_mass - clean_budget;
      for (std::size_t k = 0; k < stale.size(); ++k) {
        const std::size_t j = stale[k];
        const double share = stale_weight > 0.0 ? weights[j] / stale_weight : 1.0 / static_cast<double>(stale.size());
        s.records[kids[j]] = {true, raw[k], mass[k], share * residual_budget, weights[j]};
      }
    }
  }

  for (std::size_t id : tree.leaves()) {
    if (!dirty[id]) continue;
    ++metrics.affected_leaves;
    const auto& members = tree.nodes[id].members;
    const auto v = leaf_point_values(cf, cf.bound(), tree, id, s.records[id].mass, cfg);
    for (std::size_t j = 0; j < members.size(); ++j) s.values[members[j]] = v[j];
    switch (leaf_plan(cfg, members.size())) {
      case LeafPlan::uniform: break;
      case LeafPlan::exact: bound += std::uint64_t{1} << members.size(); break;
      case LeafPlan::monte_carlo: bound += cfg.T * members.size(); break;
    }
  }
  for (std::size_t id = 0; id < tree.nodes.size(); ++id) {
    if (!s.records[id].present) continue;
    tree.nodes[id].cached_shapley = s.records[id].raw;
    tree.nodes[id].budget = s.records[id].budget;
  }

  for (const auto& level : tree.levels) {
    metrics.total_nodes += level.size();
    for (std::size_t id : level) metrics.dirty_nodes += dirty[id] != 0;
  }
  metrics.evaluations = cf.evaluation_count() - before;
  metrics.evaluation_bound = bound;
  metrics.latency_ms = detail::elapsed_ms(start);
  return metrics;
}

/// Runs the full valuation on the state's current tree with a fresh memo.
inline HcdvResult recompute_current_tree(const StreamState& s) {
  const CharacteristicFn cf(s.data, s.embedding, s.utility);
  return run_hcdv(cf, s.tree, s.hcdv);
}

/// Rebuilds the hierarchy from scratch on the current corpus and revalues it
/// with a fresh memo; the streaming reference.
inline HcdvResult full_recompute(const StreamState& s, HierarchyTree* rebuilt = nullptr) {
  const auto tree = build_tree(*s.embedding, s.tree_config);
  const CharacteristicFn cf(s.data, s.embedding, s.utility);
  auto result = run_hcdv(cf, tree, s.hcdv);
  if (rebuilt) *rebuilt = tree;
  return result;
}

// ---------------------------------------------------------------------------
// Synthetic click stream

struct ClickStreamSpec {
  std::size_t initial = 1500;
  std::size_t batch = 150;
  std::size_t steps = 10;
  std::size_t dim = 6;
  std::size_t components = 8;
  double positive_rate = 0.15;
  /// Mixture components active in each batch; the rest stay quiet.
  std::size_t hot_components = 2;
  std::uint64_t seed = 0;
};

struct ClickStream {
  RawTable initial;
  std::vector<RawTable> batches;
};

/// Gaussian-mixture traffic with a logistic click model. Each batch draws
/// from a few "hot" components so that arrivals are spatially local.
inline ClickStream make_click_stream(const ClickStreamSpec& spec) {
  if (spec.components == 0 || spec.dim == 0) throw Error("click stream needs components and dimensions");
  RngStream rng(spec.seed, {Purpose::synthetic, 7, 0});
  Matrix centres(spec.components, spec.dim);
  for (double& v : centres.data()) v = 3.0 * rng.normal();
  std::vector<double> w(spec.dim);
  for (double& v : w) v = rng.normal();
  // Intercept chosen so that the click rate at the mixture centres is roughly the target.
  std::vector<double> margins;
  for (std::size_t c = 0; c < spec.components; ++c) {
    double s = 0.0;
    for (std::size_t k = 0; k < spec.dim; ++k) s += w[k] * centres(c, k);
    margins.push_back(s);
  }
  std::sort(margins.begin(), margins.end());
  const double q = margins[static_cast<std::size_t>((1.0 - spec.positive_rate) * static_cast<double>(spec.components - 1))];

  auto draw = [&](RawTable& t, std::size_t component) {
    std::vector<double> x(spec.dim);
    double s = -q;
    for (std::size_t k = 0; k < spec.dim; ++k) {
      x[k] = centres(component, k) + rng.normal();
      s += w[k] * x[k];
    }
    const double p = 1.0 / (1.0 + std::exp(-s));
    t.features.append_row(x);
    t.labels.push_back(rng.uniform() < p ? 1 : 0);
  };

  ClickStream out;
  for (std::size_t i = 0; i < spec.initial; ++i) draw(out.initial, static_cast<std::size_t>(rng.below(spec.components)));
  for (std::size_t step = 0; step < spec.steps; ++step) {
    std::vector<std::size_t> hot(spec.components);
    for (std::size_t c = 0; c < hot.size(); ++c) hot[c] = c;
    rng.shuffle(hot);
    hot.resize(std::min(spec.hot_components, spec.components));
    RawTable batch;
    for (std::size_t i = 0; i < spec.batch; ++i) draw(batch, hot[static_cast<std::size_t>(rng.below(hot.size()))]);
    out.batches.push_back(std::move(batch));
  }
  return out;
}

}  // namespace hcdv

#include <gtest/gtest.h>

#include "hcdv/streaming.hpp"
#include "support.hpp"

using namespace hcdv;

namespace {

struct Fixture {
  ClickStream cs;
  StreamState s;
};

Fixture click_fixture(std::size_t initial, std::size_t batch, std::size_t steps, std::vector<std::size_t> branching,
                      std::size_t M, std::size_t T, std::uint64_t seed, StreamConfig sc = {}) {
  ClickStreamSpec spec;
  spec.initial = initial;
  spec.batch = batch;
  spec.steps = steps;
  spec.seed = seed;
  Fixture f;
  f.cs = make_click_stream(spec);
  auto data = std::make_shared<const LabeledDataset>(split_dataset(f.cs.initial, 0.2, seed));
  auto emb = std::make_shared<const EmbeddingMatrix>(identity_embedding(data->features));
  UtilityConfig uc;
  uc.lambda = 0.1;
  TreeConfig tc;
  tc.branching = std::move(branching);
  tc.leaf_cap = M;
  tc.seed = seed;
  HcdvConfig hc;
  hc.T = T;
  hc.lambda = 0.1;
  hc.M = M;
  hc.seed = seed;
  f.s = init_stream(data, emb, identity_embedder(), uc, tc, hc, sc);
  return f;
}

/// A raw row that standardises to the given leaf's prototype.
std::vector<double> raw_at_prototype(const StreamState& s, std::size_t leaf) {
  const auto& proto = s.tree.nodes[leaf].prototype;
  std::vector<double> x(proto.size());
  for (std::size_t c = 0; c < x.size(); ++c) x[c] = proto[c] * s.data->feature_scale[c] + s.data->feature_mean[c];
  return x;
}

RawTable table_of(const std::vector<std::vector<double>>& rows, const std::vector<int>& labels) {
  RawTable t;
  t.features = Matrix(0, rows.front().size());
  for (const auto& r : rows) t.features.append_row(r);
  t.labels = labels;
  return t;
}

}  // namespace

TEST(Streaming, InitialStateMatchesBatchRun) {
  auto f = click_fixture(400, 50, 1, {4, 3}, 40, 32, 1);
  const auto full = full_recompute(f.s);
  EXPECT_EQ(full.values.values, f.s.values);
  const auto same = recompute_current_tree(f.s);
  EXPECT_EQ(same.values.values, f.s.values);
  EXPECT_EQ(f.s.value_vector().method_tag, "hcdv_stream");
}

TEST(Streaming, UntouchedLeavesAreBitIdentical) {
  StreamConfig sc;
  sc.rebalance_period = 0;
  auto f = click_fixture(500, 50, 1, {4, 3}, 60, 32, 2, sc);
  const auto before_values = f.s.values;
  const auto before_tree = f.s.tree;
  const std::size_t target = f.s.tree.leaves()[3];
  const auto row = raw_at_prototype(f.s, target);
  const auto m = ingest_batch(f.s, table_of({row, row, row}, {0, 1, 0}));
  EXPECT_EQ(m.affected_leaves, 1u);
  EXPECT_EQ(m.new_leaves, 0u);
  EXPECT_FALSE(m.rebalanced);
  std::size_t checked = 0;
  for (std::size_t id : before_tree.leaves()) {
    if (id == target) continue;
    for (Index i : before_tree.nodes[id].members) {
      EXPECT_EQ(f.s.values[i], before_values[i]);
      ++checked;
    }
  }
  EXPECT_GT(checked, 0u);
  EXPECT_NEAR(std::accumulate(f.s.values.begin(), f.s.values.end(), 0.0), f.s.root_surplus, 1e-9);
}

TEST(Streaming, CleanNodesKeepEstimatesAndMatchKeyedRecompute) {
  StreamConfig sc;
  sc.rebalance_period = 0;
  auto f = click_fixture(600, 50, 1, {4, 3}, 60, 32, 3, sc);
  const auto before = f.s.records;
  const std::size_t target = f.s.tree.leaves()[0];
  const auto row = raw_at_prototype(f.s, target);
  ingest_batch(f.s, table_of({row, row}, {1, 0}));
  const auto ancestors = f.s.tree.ancestors(target);
  auto is_dirty = [&](std::size_t id) {
    return id == target || std::find(ancestors.begin(), ancestors.end(), id) != ancestors.end();
  };
  const auto fresh = recompute_current_tree(f.s);
  std::size_t compared = 0;
  for (std::size_t id = 0; id < before.size(); ++id) {
    if (is_dirty(id)) continue;
    EXPECT_EQ(f.s.records[id].raw, before[id].raw) << "node " << id;
    EXPECT_EQ(*f.s.tree.nodes[id].cached_shapley, before[id].raw);
    const auto parent = f.s.tree.nodes[id].parent;
    if (parent && !is_dirty(*parent)) {
      EXPECT_EQ(fresh.nodes[id].raw, f.s.records[id].raw) << "node " << id;
      ++compared;
    }
  }
  EXPECT_GT(compared, 0u);
}

TEST(Streaming, FarPointSpawnsLeaf) {
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  RngStream rng(4);
  for (int i = 0; i < 40; ++i) {
    const bool a = i % 2 == 0;
    rows.push_back({a ? 3.0 + 0.1 * rng.normal() : 0.1 * rng.normal(), a ? 0.1 * rng.normal() : 3.0 + 0.1 * rng.normal(), 0.0});
    labels.push_back(a ? 0 : 1);
  }
  auto data = std::make_shared<const LabeledDataset>(
      hcdv::testing::literal_dataset(rows, labels, {{3.0, 0.0, 0.0}, {0.0, 3.0, 0.0}}, {0, 1}));
  auto emb = std::make_shared<const EmbeddingMatrix>(identity_embedding(data->features));
  TreeConfig tc;
  tc.branching = {2};
  tc.leaf_cap = 25;
  HcdvConfig hc;
  hc.T = 16;
  hc.M = 25;
  auto s = init_stream(data, emb, identity_embedder(), UtilityConfig{}, tc, hc, StreamConfig{});
  const std::size_t leaves = s.tree.leaves().size();
  const auto m = ingest_batch(s, table_of({{0.0, 0.0, 5.0}}, {1}));
  EXPECT_EQ(m.new_leaves, 1u);
  EXPECT_EQ(s.tree.leaves().size(), leaves + 1);
  EXPECT_NO_THROW(s.tree.check_partition(s.data->n()));
  EXPECT_NEAR(std::accumulate(s.values.begin(), s.values.end(), 0.0), s.root_surplus, 1e-9);
}

TEST(Streaming, ClickStreamDirtySetsAndCost) {
  auto f = click_fixture(600, 50, 10, {8, 8}, 12, 32, 5);
  const std::size_t L = f.s.tree.depth();
  std::uint64_t incremental = 0, full = 0;
  for (const auto& b : f.cs.batches) {
    const auto m = ingest_batch(f.s, b);
    EXPECT_NO_THROW(f.s.tree.check_partition(f.s.data->n()));
    EXPECT_EQ(f.s.values.size(), f.s.data->n());
    EXPECT_LE(m.dirty_nodes, m.affected_leaves + L * m.affected_leaves);
    EXPECT_LT(m.dirty_nodes, m.total_nodes);
    EXPECT_LE(m.evaluations, m.evaluation_bound);
    EXPECT_NEAR(std::accumulate(f.s.values.begin(), f.s.values.end(), 0.0), f.s.root_surplus, 1e-9);
    for (std::size_t id = 0; id < f.s.tree.nodes.size(); ++id) {
      if (f.s.records[id].present) {
        EXPECT_TRUE(f.s.tree.nodes[id].cached_shapley.has_value());
      }
    }
    incremental += m.evaluations;
    full += full_recompute(f.s).evaluations;
  }
  EXPECT_LT(incremental, full);
}

TEST(Streaming, AmortisedCostWithUniformLeaves) {
  StreamConfig sc;
  sc.rebalance_period = 0;
  auto f = click_fixture(800, 60, 4, {6, 4}, 40, 24, 6, sc);
  f.s.hcdv.leaf_mode = LeafMode::always_uniform;
  for (const auto& b : f.cs.batches) {
    const auto m = ingest_batch(f.s, b);
    EXPECT_LE(m.evaluations, 2 * f.s.hcdv.T * m.dirty_nodes + m.dirty_nodes + 2 + f.s.tree.nodes.size());
  }
}

TEST(Streaming, EveryLeafAffectedCostsAboutAFullRun) {
  StreamConfig sc;
  sc.rebalance_period = 0;
  sc.assign_threshold = 2.5;
  auto f = click_fixture(600, 50, 1, {4, 3}, 60, 32, 7, sc);
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  for (std::size_t id : f.s.tree.leaves()) {
    rows.push_back(raw_at_prototype(f.s, id));
    labels.push_back(static_cast<int>(id % 2));
  }
  const auto m = ingest_batch(f.s, table_of(rows, labels));
  ASSERT_EQ(m.affected_leaves, f.s.tree.leaves().size());
  const auto full = recompute_current_tree(f.s);
  const double ratio = static_cast<double>(m.evaluations) / static_cast<double>(full.evaluations);
  EXPECT_NEAR(ratio, 1.0, 0.05);
  ASSERT_EQ(f.s.values.size(), full.values.values.size());
  for (std::size_t i = 0; i < f.s.values.size(); ++i) EXPECT_NEAR(f.s.values[i], full.values.values[i], 1e-12);
}

TEST(Streaming, RebalanceRestoresCapacity) {
  StreamConfig sc;
  sc.rebalance_period = 1;
  sc.assign_threshold = 2.5;
  auto f = click_fixture(400, 50, 1, {4}, 100, 16, 8, sc);
  const std::size_t target = f.s.tree.leaves()[0];
  const auto row = raw_at_prototype(f.s, target);
  std::vector<std::vector<double>> rows(60, row);
  const auto m = ingest_batch(f.s, table_of(rows, std::vector<int>(60, 1)));
  EXPECT_TRUE(m.rebalanced);
  EXPECT_TRUE(f.s.tree.oversized_leaves().empty());
  EXPECT_NO_THROW(f.s.tree.check_partition(f.s.data->n()));
  EXPECT_NEAR(std::accumulate(f.s.values.begin(), f.s.values.end(), 0.0), f.s.root_surplus, 1e-9);
}

TEST(Streaming, RejectsBadBatches) {
  auto f = click_fixture(300, 20, 1, {3}, 40, 8, 9);
  const auto epoch = f.s.epoch;
  const auto n = f.s.data->n();
  auto bad = f.cs.batches.front();
  bad.labels[0] = 7;
  EXPECT_THROW(ingest_batch(f.s, bad), Error);
  EXPECT_EQ(f.s.epoch, epoch);
  EXPECT_EQ(f.s.data->n(), n);
  EXPECT_THROW(ingest_batch(f.s, RawTable{}), Error);
  RawTable narrow = table_of({{1.0, 2.0}}, {0});
  EXPECT_THROW(ingest_batch(f.s, narrow), Error);
}

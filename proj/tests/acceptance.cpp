// Prints one PASS/FAIL line per acceptance criterion; exits non-zero if any fails.

#include <chrono>
#include <cstdio>
#include <functional>
#include <sstream>
#include <string>

#include "hcdv/encoder.hpp"
#include "hcdv/eval.hpp"
#include "hcdv/streaming.hpp"

using namespace hcdv;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::size_t mask_of(std::span<const std::size_t> ids) {
  std::size_t m = 0;
  for (auto i : ids) m |= std::size_t{1} << i;
  return m;
}

CoalitionGame table_game(std::vector<double> table, std::size_t K) {
  CoalitionGame g;
  g.K = K;
  g.bound = 1.0;
  g.value = [t = std::move(table)](std::span<const std::size_t> ids) { return t[mask_of(ids)]; };
  return g;
}

CoalitionGame random_table_game(std::size_t K, RngStream& rng) {
  std::vector<double> t(std::size_t{1} << K);
  for (std::size_t m = 1; m < t.size(); ++m) t[m] = rng.uniform(-1.0, 1.0);
  return table_game(std::move(t), K);
}

CoalitionGame sum_game(const CoalitionGame& a, const CoalitionGame& b) {
  CoalitionGame g;
  g.K = a.K;
  g.bound = a.bound + b.bound;
  g.value = [a, b](std::span<const std::size_t> ids) { return a(ids) + b(ids); };
  return g;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Outcome oracle_correctness() {
  std::vector<double> t(8, 0.0);
  for (std::size_t m = 0; m < 8; ++m) t[m] = (m & 1) && (m & 6) ? 1.0 : 0.0;
  const auto glove = exact_shapley(table_game(t, 3)).values;
  double worst = std::max({std::abs(glove[0] - 2.0 / 3.0), std::abs(glove[1] - 1.0 / 6.0), std::abs(glove[2] - 1.0 / 6.0)});
  RngStream rng(1, {Purpose::check, 10, 0});
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t K = 1 + rng.below(6);
    const auto g = random_table_game(K, rng);
    const auto h = random_table_game(K, rng);
    const auto phi = exact_shapley(g).values;
    const auto oracle = all_permutations_shapley(g).values;
    const auto ph = exact_shapley(h).values;
    const auto both = exact_shapley(sum_game(g, h)).values;
    double sum = 0.0;
    for (std::size_t i = 0; i < K; ++i) {
      worst = std::max(worst, std::abs(phi[i] - oracle[i]));
      worst = std::max(worst, std::abs(both[i] - phi[i] - ph[i]));
      sum += phi[i];
    }
    worst = std::max(worst, std::abs(sum - (g.grand_value() - g.empty_value())));
    CoalitionGame with_dummy;
    with_dummy.K = K + 1;
    with_dummy.value = [&g, K](std::span<const std::size_t> ids) {
      std::vector<std::size_t> kept;
      for (auto i : ids) {
        if (i != K) kept.push_back(i);
      }
      return g(kept);
    };
    worst = std::max(worst, std::abs(exact_shapley(with_dummy).values[K]));
    if (K >= 2) {
      // Players 0 and 1 enter only through how many of them are present.
      CoalitionGame sym;
      sym.K = K;
      sym.value = [&g](std::span<const std::size_t> ids) {
        std::size_t c = 0;
        std::vector<std::size_t> rest;
        for (auto i : ids) {
          if (i < 2) {
            ++c;
          } else {
            rest.push_back(i);
          }
        }
        if (c >= 1) rest.push_back(0);
        if (c == 2) rest.push_back(1);
        return g(rest);
      };
      const auto s = exact_shapley(sym).values;
      worst = std::max(worst, std::abs(s[0] - s[1]));
    }
  }
  return {worst <= 1e-9, fmt("max axiom error %.3g", worst)};
}

Outcome concentration() {
  RngStream rng(1, {Purpose::check, 0, 0});
  const auto game = random_bounded_game(5, rng);
  const auto rep = concentration_check(game, {64, 256, 1024}, 200, 0.05, 1);
  std::ostringstream os;
  for (const auto& row : rep.rows) os << "T=" << row.T << " exceed " << row.exceed_fraction << "/" << row.allowed_fraction << "; ";
  os << "slope " << rep.slope;
  return {rep.pass, os.str()};
}

Outcome efficiency() {
  double worst = 0.0;
  std::size_t configs = 0;
  RngStream rng(3, {Purpose::check, 30, 0});
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 100 + rng.below(2000);
    auto data = std::make_shared<const LabeledDataset>(
        make_synthetic({.n = n, .subclusters = 3, .overlap = rng.uniform(0.0, 1.0), .dim = 2, .seed = static_cast<std::uint64_t>(trial)}));
    auto emb = std::make_shared<const EmbeddingMatrix>(identity_embedding(data->features));
    UtilityConfig uc;
    uc.lambda = trial % 3 == 0 ? 0.0 : rng.uniform(0.0, 1.0);
    uc.learner = trial % 2 ? Learner::ridge_logistic : Learner::nearest_centroid;
    const CharacteristicFn cf(data, emb, uc);
    TreeConfig tc;
    tc.branching = {2 + rng.below(10), 2 + rng.below(10)};
    tc.leaf_cap = 4 + rng.below(40);
    tc.seed = static_cast<std::uint64_t>(trial);
    const auto tree = build_tree(*emb, tc);
    HcdvConfig hc;
    hc.T = 16 + rng.below(128);
    hc.lambda = uc.lambda;
    hc.M = tc.leaf_cap;
    hc.seed = static_cast<std::uint64_t>(trial);
    hc.global_games = trial % 4 == 1;
    hc.leaf_mode = trial % 5 == 2 ? LeafMode::always_uniform : LeafMode::exact_if_small;
    worst = std::max(worst, efficiency_check(run_hcdv(cf, tree, hc).values, cf));
    ++configs;
  }
  std::size_t diag_ok = 0, diag_total = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto data = std::make_shared<const LabeledDataset>(make_synthetic({.n = 50, .seed = seed}));
    auto emb = std::make_shared<const EmbeddingMatrix>(identity_embedding(data->features));
    UtilityConfig uc;
    uc.lambda = 0.1;
    const CharacteristicFn cf(data, emb, uc);
    TreeConfig tc;
    tc.branching = {3, 2};
    tc.leaf_cap = 12;
    tc.seed = seed;
    const auto tree = build_tree(*emb, tc);
    if (tree.depth() != 2) continue;
    HcdvConfig hc;
    hc.T = 32;
    hc.lambda = 0.1;
    hc.seed = seed;
    const auto d = efficiency_diagnostic(cf, tree, hc);
    diag_ok += d.holds;
    ++diag_total;
  }
  return {worst <= 1e-6 && diag_total > 0 && diag_ok == diag_total,
          fmt("max deviation %.3g over %zu configs; diagnostic bound held %zu/%zu", worst, configs, diag_ok, diag_total)};
}

Outcome additivity() {
  double worst = 0.0;
  RngStream rng(4, {Purpose::check, 12, 0});
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t K = 2 + rng.below(7);
    const auto a = random_table_game(K, rng);
    const auto b = random_table_game(K, rng);
    const auto log = draw_permutation_log(64, rng);
    const auto va = permutation_shapley(a, log).values;
    const auto vb = permutation_shapley(b, log).values;
    const auto vab = permutation_shapley(sum_game(a, b), log).values;
    for (std::size_t i = 0; i < K; ++i) worst = std::max(worst, std::abs(vab[i] - va[i] - vb[i]));
  }
  return {worst <= 1e-12, fmt("max additivity gap %.3g on 50 pairs", worst)};
}

Outcome regret() {
  RngStream rng(5, {Purpose::check, 1, 0});
  std::size_t violations = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.below(100);
    const std::size_t k = 1 + rng.below(n);
    const double amp = rng.uniform(0.0, 0.2);
    ValueVector r, t;
    for (std::size_t i = 0; i < n; ++i) {
      r.values.push_back(rng.uniform(-1.0, 1.0));
      t.values.push_back(r.values.back() + rng.uniform(-amp, amp));
    }
    violations += !surrogate_regret(r, t, k).holds;
  }
  return {violations == 0, fmt("%zu violations in 1000 triples", violations)};
}

Outcome hierarchy_balance() {
  RngStream rng(6, {Purpose::check, 4, 0});
  std::size_t bad = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 20 + rng.below(1500);
    auto data = make_synthetic({.n = n + n / 4, .subclusters = 1 + rng.below(4), .dim = 2 + rng.below(4), .seed = static_cast<std::uint64_t>(trial)});
    const auto emb = identity_embedding(data.features);
    TreeConfig cfg;
    cfg.branching = {2 + rng.below(12), 2 + rng.below(8)};
    cfg.leaf_cap = 4 + rng.below(60);
    cfg.gamma = rng.uniform(0.1, 0.5);
    cfg.seed = static_cast<std::uint64_t>(trial);
    const auto tree = build_tree(emb, cfg);
    try {
      tree.check_partition(data.n());
    } catch (const Error&) {
      ++bad;
      continue;
    }
    bad += !tree.capacity_violations().empty();
  }
  return {bad == 0, fmt("%zu of 100 trees broke the window or partition", bad)};
}

Outcome streaming() {
  // Part 1: a batch landing in one leaf leaves other leaves untouched.
  ClickStreamSpec spec;
  spec.seed = 7;
  const auto cs = make_click_stream(spec);
  auto data = std::make_shared<const LabeledDataset>(split_dataset(cs.initial, 0.2, 7));
  auto emb = std::make_shared<const EmbeddingMatrix>(identity_embedding(data->features));
  UtilityConfig uc;
  uc.lambda = 0.1;
  TreeConfig tc;
  tc.branching = {16, 16};
  tc.leaf_cap = 12;
  tc.seed = 7;
  HcdvConfig hc;
  hc.T = 256;
  hc.lambda = 0.1;
  hc.M = 12;
  hc.seed = 7;
  StreamConfig frozen;
  frozen.rebalance_period = 0;
  auto s = init_stream(data, emb, identity_embedder(), uc, tc, hc, frozen);
  const auto before = s.values;
  const auto tree_before = s.tree;
  const std::size_t target = s.tree.leaves()[5];
  const auto& proto = s.tree.nodes[target].prototype;
  RawTable local;
  local.features = Matrix(0, proto.size());
  std::vector<double> row(proto.size());
  for (std::size_t c = 0; c < row.size(); ++c) row[c] = proto[c] * data->feature_scale[c] + data->feature_mean[c];
  for (int r = 0; r < 4; ++r) {
    local.features.append_row(row);
    local.labels.push_back(r % 2);
  }
  const auto m0 = ingest_batch(s, local);
  std::size_t changed = 0, untouched = 0;
  for (std::size_t id : tree_before.leaves()) {
    if (id == target) continue;
    for (Index i : tree_before.nodes[id].members) {
      changed += s.values[i] != before[i];
      ++untouched;
    }
  }
  const bool bit_identical = m0.affected_leaves == 1 && !m0.rebalanced && changed == 0 && untouched > 0;

  // Part 2: ten batches of 150 against ten full recomputes.
  auto live = init_stream(data, emb, identity_embedder(), uc, tc, hc, StreamConfig{});
  std::uint64_t incremental = 0, full = 0;
  std::int64_t worst_ms = 0;
  for (const auto& batch : cs.batches) {
    const auto m = ingest_batch(live, batch);
    incremental += m.evaluations;
    worst_ms = std::max(worst_ms, m.latency_ms);
    full += full_recompute(live).evaluations;
  }
  const double ratio = static_cast<double>(incremental) / static_cast<double>(full);
  return {bit_identical && ratio < 0.5 && worst_ms < 10000,
          fmt("untouched points changed %zu/%zu; evaluations %llu vs %llu full (ratio %.3f); slowest step %lld ms", changed,
              untouched, static_cast<unsigned long long>(incremental), static_cast<unsigned long long>(full), ratio,
              static_cast<long long>(worst_ms))};
}

Outcome downstream() {
  DownstreamSpec spec;
  spec.data.n = 3000;
  double gap = 0.0;
  std::ostringstream os;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto r = downstream_run(spec, seed);
    gap += r.auc_hcdv - r.auc_random;
    os << "seed " << seed << ": " << r.auc_hcdv << " vs " << r.auc_random << "; ";
  }
  gap /= 3.0;
  os << "mean gap " << gap;
  return {gap >= 0.03, os.str()};
}

std::string downstream_uniform_note() {
  DownstreamSpec spec;
  spec.data.n = 3000;
  spec.noise_model = NoiseModel::uniform;
  double gap = 0.0;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto r = downstream_run(spec, seed);
    gap += r.auc_hcdv - r.auc_random;
  }
  return fmt("uniform label noise: mean AUC gap %.4f", gap / 3.0);
}

Outcome cost_accounting() {
  bool exact = true;
  std::ostringstream os;
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    auto data = std::make_shared<const LabeledDataset>(make_synthetic({.n = 200 + 150 * seed, .seed = seed}));
    auto emb = std::make_shared<const EmbeddingMatrix>(identity_embedding(data->features));
    UtilityConfig uc;
    uc.lambda = 0.1;
    const CharacteristicFn cf(data, emb, uc);
    TreeConfig tc;
    tc.branching = {4 + seed, 3};
    tc.leaf_cap = 8 + 4 * seed;
    tc.seed = seed;
    const auto tree = build_tree(*emb, tc);
    HcdvConfig hc;
    hc.T = 32 * (1 + seed);
    hc.lambda = 0.1;
    hc.M = tc.leaf_cap;
    hc.seed = seed;
    const auto r = run_hcdv(cf, tree, hc);
    exact = exact && r.evaluations == expected_evaluation_count(tree, hc) && r.evaluations <= evaluation_bound(tree, hc);
  }
  auto data = std::make_shared<const LabeledDataset>(make_synthetic({.n = 375, .seed = 9}));
  auto emb = std::make_shared<const EmbeddingMatrix>(identity_embedding(data->features));
  UtilityConfig uc;
  uc.lambda = 0.1;
  TreeConfig tc;
  tc.branching = {6};
  tc.seed = 9;
  const auto tree = build_tree(*emb, tc);
  HcdvConfig hc;
  hc.lambda = 0.1;
  hc.seed = 9;
  const CharacteristicFn cf_h(data, emb, uc), cf_f(data, emb, uc);
  const auto h = run_hcdv(cf_h, tree, hc);
  RngStream rng(9, {Purpose::baseline, 1, 0});
  flat_mcds(cf_f, hc.T, rng);
  const double ratio = static_cast<double>(h.evaluations) / static_cast<double>(cf_f.evaluation_count());
  os << "counts match replay: " << (exact ? "yes" : "no") << "; n=" << data->n() << " K=6 T=" << hc.T << ": hcdv "
     << h.evaluations << " vs flat " << cf_f.evaluation_count() << " (ratio " << ratio << ")";
  return {exact && ratio < 0.2, os.str()};
}

Outcome encoder_sanity() {
  const auto data = make_blobs(400, 8, 3.0, 21);
  EncoderConfig cfg;
  cfg.d = 2;
  cfg.lambda = 1.0;
  cfg.epochs = 20;
  cfg.seed = 3;
  const auto trained = train_linear_encoder(data, cfg);
  auto d = std::make_shared<const LabeledDataset>(data);
  auto dispersion = [&](const EmbeddingMatrix& e) {
    return CharacteristicFn(d, std::make_shared<const EmbeddingMatrix>(e), {}).normalized_dispersion(data.all_points()).value;
  };
  const double before = dispersion(LinearEncoder::random(2, data.dim(), 3).embed(data.features));
  const double after = dispersion(trained.embeddings);

  const auto range = FeatureRange::of(data.features);
  RngStream rng(21, {Purpose::check, 2, 0});
  EncoderConfig probe_cfg;
  probe_cfg.partners_per_anchor = 1;
  std::size_t negative = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto enc = LinearEncoder::random(2, data.dim(), static_cast<std::uint64_t>(trial));
    const Index p = static_cast<Index>(rng.below(data.n()));
    Index q = static_cast<Index>(rng.below(data.n()));
    while (data.labels[q] == data.labels[p]) q = static_cast<Index>(rng.below(data.n()));
    const auto probes = draw_smoothness_probes(data, PointSet{p, q}, probe_cfg, rng);
    const double omega = smoothness_penalty(data, enc, probes, rng.uniform(1e-4, 0.5), range);
    negative += !(omega >= 0.0);
  }
  return {after >= before && trained.final_objective >= trained.initial_objective && negative == 0,
          fmt("dispersion %.4f -> %.4f; objective %.4f -> %.4f; negative penalties %zu/1000", before, after,
              trained.initial_objective, trained.final_objective, negative)};
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    double limit_s;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "oracle correctness", 10, oracle_correctness},
      {2, "concentration", 120, concentration},
      {3, "efficiency", 300, efficiency},
      {4, "additivity", 0, additivity},
      {5, "regret", 0, regret},
      {6, "hierarchy balance", 0, hierarchy_balance},
      {7, "streaming soundness", 0, streaming},
      {8, "downstream utility", 900, downstream},
      {9, "cost accounting", 0, cost_accounting},
      {10, "encoder sanity", 0, encoder_sanity},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = c.limit_s <= 0 || secs < c.limit_s;
    const bool pass = o.pass && in_time;
    failures += !pass;
    std::printf("criterion %d (%s): %s  %s; %.2f s%s\n", c.id, c.name, pass ? "PASS" : "FAIL", o.detail.c_str(), secs,
                in_time ? "" : " (over time limit)");
    std::fflush(stdout);
    if (c.id == 8) {
      std::printf("  note: %s\n", downstream_uniform_note().c_str());
      std::fflush(stdout);
    }
  }
  return failures == 0 ? 0 : 1;
}

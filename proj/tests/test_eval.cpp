#include <gtest/gtest.h>

#include "hcdv/eval.hpp"
#include "support.hpp"

using namespace hcdv;

namespace {

ValueVector vv(std::vector<double> v) {
  ValueVector out;
  out.values = std::move(v);
  return out;
}

}  // namespace

TEST(Synthetic, SeparableWhenOverlapIsZero) {
  const auto d = make_synthetic({.n = 1000, .subclusters = 3, .overlap = 0.0, .dim = 2, .seed = 1});
  const auto acc = selection_score(d, d.all_points(), d.val_features, d.val_labels, Learner::ridge_logistic,
                                   Metric::accuracy);
  EXPECT_GE(acc, 0.99);
}

TEST(Synthetic, BalancedClassesAndDeterministic) {
  const SyntheticSpec spec{.n = 3000, .subclusters = 3, .overlap = 0.5, .dim = 2, .seed = 2};
  const auto t = make_synthetic_table(spec);
  ASSERT_EQ(t.rows(), 3000u);
  const auto ones = std::count(t.labels.begin(), t.labels.end(), 1);
  EXPECT_EQ(ones, 1500);
  const auto again = make_synthetic_table(spec);
  EXPECT_EQ(t.features.data(), again.features.data());
  EXPECT_EQ(t.labels, again.labels);
  const auto d = make_synthetic(spec);
  EXPECT_EQ(d.n(), 2400u);
  EXPECT_EQ(d.val_labels.size(), 600u);
}

TEST(Noise, FlipsRequestedFraction) {
  for (auto model : {NoiseModel::uniform, NoiseModel::localised}) {
    auto d = make_synthetic({.n = 500, .seed = 3});
    const auto before = d.labels;
    const auto flipped = plant_label_noise(d, 0.2, 3, model);
    EXPECT_EQ(flipped.size(), 80u);
    EXPECT_TRUE(std::is_sorted(flipped.begin(), flipped.end()));
    std::size_t changed = 0;
    for (std::size_t i = 0; i < d.n(); ++i) changed += d.labels[i] != before[i];
    EXPECT_EQ(changed, flipped.size());
  }
  auto d = make_synthetic({.n = 100, .seed = 3});
  EXPECT_THROW(plant_label_noise(d, 1.5, 3), Error);
}

TEST(TopK, Examples) {
  EXPECT_EQ(topk_select(vv({3, 1, 2}), 2), PointSet(std::vector<Index>{0, 2}));
  EXPECT_EQ(topk_select(vv({5, 5, 5, 5}), 2), PointSet(std::vector<Index>{0, 1}));
  EXPECT_EQ(topk_select(vv({0.1, 0.3, 0.2}), 3).size(), 3u);
  EXPECT_THROW(topk_select(vv({1, 2}), 0), Error);
  EXPECT_THROW(topk_select(vv({1, 2}), 3), Error);
}

TEST(Regret, Examples) {
  const auto ref = vv({0.5, 0.1, 0.9, 0.3, 0.7});
  const auto same = surrogate_regret(ref, ref, 2);
  EXPECT_EQ(same.regret, 0.0);
  EXPECT_TRUE(same.holds);
  auto shifted = ref;
  for (double& v : shifted.values) v += 0.25;
  const auto s = surrogate_regret(ref, shifted, 2);
  EXPECT_EQ(s.regret, 0.0);
  EXPECT_NEAR(s.bound, 2 * 2 * 0.25, 1e-15);

  RngStream rng(4);
  std::vector<double> r(50), t(50);
  for (std::size_t i = 0; i < 50; ++i) {
    r[i] = rng.uniform();
    t[i] = r[i] + rng.uniform(-0.01, 0.01);
  }
  const auto rep = surrogate_regret(vv(r), vv(t), 10);
  EXPECT_LE(rep.regret, 0.2);
  EXPECT_LE(rep.regret, rep.bound);
  EXPECT_GE(rep.regret, 0.0);
}

TEST(Regret, RandomTriplesRespectBound) {
  RngStream rng(5, {Purpose::check, 1, 0});
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.below(60);
    const std::size_t k = 1 + rng.below(n);
    const double amp = rng.uniform(0.0, 0.2);
    std::vector<double> r(n), t(n);
    for (std::size_t i = 0; i < n; ++i) {
      r[i] = rng.uniform(-1.0, 1.0);
      t[i] = r[i] + rng.uniform(-amp, amp);
    }
    const auto rep = surrogate_regret(vv(r), vv(t), k);
    EXPECT_TRUE(rep.holds) << rep.regret << " vs " << rep.bound;
  }
}

TEST(Concentration, BoundedGamePasses) {
  RngStream rng(6, {Purpose::check, 0, 0});
  const auto game = random_bounded_game(5, rng);
  EXPECT_EQ(game.bound, 1.0);
  for (std::uint64_t m = 0; m < 32; ++m) {
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < 5; ++i) {
      if (m >> i & 1) ids.push_back(i);
    }
    EXPECT_LE(std::abs(game(ids)), 1.0 + 1e-12);
  }
  const auto rep = concentration_check(game, {64, 256, 1024}, 200, 0.05, 6);
  EXPECT_TRUE(rep.pass);
  ASSERT_TRUE(rep.slope_defined);
  EXPECT_GE(rep.slope, -0.7);
  EXPECT_LE(rep.slope, -0.3);
  EXPECT_FALSE(to_json(rep)["rows"].empty());
}

TEST(Concentration, ZeroVarianceGame) {
  const std::size_t K = 4;
  CoalitionGame g;
  g.K = K;
  g.bound = 1.0;
  g.value = [K](std::span<const std::size_t> ids) { return static_cast<double>(ids.size()) / static_cast<double>(K); };
  const auto rep = concentration_check(g, {64, 256}, 50, 0.05, 7);
  for (const auto& row : rep.rows) EXPECT_EQ(row.median_deviation, 0.0);
  EXPECT_TRUE(rep.pass);
  EXPECT_FALSE(rep.slope_defined);
}

TEST(Concentration, QuadruplingTHalvesDeviation) {
  RngStream rng(8, {Purpose::check, 0, 0});
  const auto game = random_bounded_game(6, rng);
  const auto rep = concentration_check(game, {100, 400}, 300, 0.05, 8);
  const double ratio = rep.rows[0].median_deviation / rep.rows[1].median_deviation;
  EXPECT_GE(ratio, 1.4);
  EXPECT_LE(ratio, 2.8);
}

TEST(Concentration, EtaFormula) {
  EXPECT_NEAR(hoeffding_eta(1.0, 5, 0.05, 64), std::sqrt(8.0 * std::log(200.0) / 64.0), 1e-15);
  EXPECT_NEAR(hoeffding_eta(2.0, 5, 0.05, 256) / hoeffding_eta(2.0, 5, 0.05, 1024), 2.0, 1e-12);
}

TEST(Stability, Examples) {
  const auto same = stability_report({vv({1, 2}), vv({1, 2}), vv({1, 2})}, 1e-6);
  for (double c : same.cv) EXPECT_EQ(c, 0.0);
  const auto two = stability_report({vv({1, 1}), vv({3, 3})}, 0.0);
  EXPECT_NEAR(two.cv[0], std::sqrt(2.0) / 2.0, 1e-12);
  EXPECT_NEAR(two.mean_cv, std::sqrt(2.0) / 2.0, 1e-12);
  const auto tiny = stability_report({vv({1e-12}), vv({-1e-12})}, 1e-6);
  EXPECT_TRUE(std::isfinite(tiny.cv[0]));
  EXPECT_THROW(stability_report({vv({1})}, 0.0), Error);
  EXPECT_THROW(stability_report({vv({1}), vv({1, 2})}, 0.0), Error);
}

TEST(Efficiency, ExactShapleyIsEfficient) {
  auto data = std::make_shared<const LabeledDataset>(make_synthetic({.n = 14, .seed = 9}));
  auto emb = std::make_shared<const EmbeddingMatrix>(identity_embedding(data->features));
  UtilityConfig uc;
  uc.lambda = 0.3;
  const CharacteristicFn cf(data, emb, uc);
  ASSERT_LE(data->n(), kExactShapleyLimit);
  std::vector<Index> pts(data->n());
  std::iota(pts.begin(), pts.end(), Index{0});
  const auto exact = exact_shapley(point_game(pts, cf, cf.bound()));
  EXPECT_LE(efficiency_check(vv(exact.values), cf), 1e-9);
  auto off = exact.values;
  off[0] += 0.01;
  EXPECT_NEAR(efficiency_check(vv(off), cf), 0.01, 1e-9);
}

TEST(CheckSuite, PassesAndCatchesWeightFault) {
  CheckSettings cs;
  cs.seed = 10;
  const auto ok = run_check_suite(cs);
  EXPECT_TRUE(ok.pass) << ok.report.dump(2);
  for (const char* key : {"concentration", "efficiency", "regret", "stability", "pass"}) {
    EXPECT_TRUE(ok.report.contains(key)) << key;
  }
  cs.weight_fault = 0.9;
  const auto bad = run_check_suite(cs);
  EXPECT_FALSE(bad.pass);
  EXPECT_FALSE(bad.report["efficiency"]["pass"].get<bool>());
}

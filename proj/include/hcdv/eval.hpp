#pragma once

// Synthetic generators, selection metrics and the checks that turn the
// efficiency, concentration, regret and stability statements into
// executable pass/fail reports.

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "hcdv/core.hpp"
#include "hcdv/dataset.hpp"
#include "hcdv/embedding.hpp"
#include "hcdv/hierarchy.hpp"
#include "hcdv/hcdv.hpp"
#include "hcdv/shapley.hpp"
#include "hcdv/utility.hpp"

namespace hcdv {

// ---------------------------------------------------------------------------
// Generators

struct SyntheticSpec {
  std::size_t n = 3000;
  std::size_t subclusters = 3;
  double overlap = 0.5;
  std::size_t dim = 2;
  std::uint64_t seed = 0;
};

/// Two classes, each a mixture of `subclusters` Gaussian components whose
/// means sit on a circle of radius 3: class 0 on the arc around angle 0,
/// class 1 on the arc around angle pi. Component spread grows with
/// `overlap` (0 gives well separated classes). Extra dimensions beyond the
/// first two are standard-normal nuisance features.
inline RawTable make_synthetic_table(const SyntheticSpec& spec, std::uint64_t stream = 0) {
  if (spec.subclusters == 0 || spec.n < 2 * spec.subclusters) throw Error("make_synthetic: need n >= 2 * subclusters");
  if (spec.dim < 2) throw Error("make_synthetic: need at least two dimensions");
  if (spec.overlap < 0.0 || spec.overlap > 1.0) throw Error("make_synthetic: overlap must lie in [0, 1]");
  RngStream rng(spec.seed, {Purpose::synthetic, 1, stream});
  const double sigma = 0.3 + 1.5 * spec.overlap;
  const double arc = std::numbers::pi * 5.0 / 9.0;  // 100 degrees per class
  RawTable t;
  for (std::size_t i = 0; i < spec.n; ++i) {
    const int label = i < spec.n / 2 ? 0 : 1;
    const std::size_t within = label == 0 ? i : i - spec.n / 2;
    const std::size_t comp = within % spec.subclusters;
    const double offset = spec.subclusters == 1
                              ? 0.0
                              : arc * (static_cast<double>(comp) / static_cast<double>(spec.subclusters - 1) - 0.5);
    const double angle = label * std::numbers::pi + offset;
    std::vector<double> x(spec.dim);
    x[0] = 3.0 * std::cos(angle) + sigma * rng.normal();
    x[1] = 3.0 * std::sin(angle) + sigma * rng.normal();
    for (std::size_t k = 2; k < spec.dim; ++k) x[k] = rng.normal();
    t.features.append_row(x);
    t.labels.push_back(label);
  }
  return t;
}

inline LabeledDataset make_synthetic(const SyntheticSpec& spec, double val_fraction = 0.2) {
  return split_dataset(make_synthetic_table(spec), val_fraction, spec.seed);
}

/// Two isotropic unit-variance Gaussian blobs in `dim` dimensions whose means
/// are `separation` standard deviations apart along the first axis.
inline RawTable make_blobs_table(std::size_t n, std::size_t dim, double separation, std::uint64_t seed) {
  if (dim == 0 || n < 4) throw Error("make_blobs: need dim >= 1 and n >= 4");
  RngStream rng(seed, {Purpose::synthetic, 2, 0});
  RawTable t;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    std::vector<double> x(dim);
    for (double& v : x) v = rng.normal();
    x[0] += (label == 0 ? -0.5 : 0.5) * separation;
    t.features.append_row(x);
    t.labels.push_back(label);
  }
  return t;
}

inline LabeledDataset make_blobs(std::size_t n, std::size_t dim, double separation, std::uint64_t seed,
                                 double val_fraction = 0.2) {
  return split_dataset(make_blobs_table(n, dim, separation, seed), val_fraction, seed);
}

/// uniform: flipped points drawn uniformly without replacement.
/// localised: the points nearest (in feature space) to one training point
/// drawn uniformly at random, i.e. a contiguous corrupted region.
enum class NoiseModel { uniform, localised };

inline NoiseModel parse_noise_model(std::string_view s) {
  if (s == "uniform") return NoiseModel::uniform;
  if (s == "localised") return NoiseModel::localised;
  throw Error("unknown noise model: " + std::string(s));
}

/// Flips round(rate * n) training labels; binary labels swap, others move to
/// a random different class. Returns the flipped indices, sorted.
inline std::vector<Index> plant_label_noise(LabeledDataset& data, double rate, std::uint64_t seed,
                                            NoiseModel model = NoiseModel::uniform) {
  if (rate < 0.0 || rate > 1.0) throw Error("noise rate must lie in [0, 1]");
  RngStream rng(seed, {Purpose::noise, static_cast<std::uint64_t>(model), 0});
  std::vector<Index> order(data.n());
  std::iota(order.begin(), order.end(), Index{0});
  if (model == NoiseModel::uniform) {
    rng.shuffle(order);
  } else {
    const auto anchor = data.features.row(static_cast<std::size_t>(rng.below(data.n())));
    std::vector<double> dist(data.n());
    for (std::size_t i = 0; i < data.n(); ++i) {
      const auto row = data.features.row(i);
      for (std::size_t c = 0; c < row.size(); ++c) dist[i] += (row[c] - anchor[c]) * (row[c] - anchor[c]);
    }
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return dist[a] < dist[b]; });
  }
  const auto count = static_cast<std::size_t>(std::llround(rate * static_cast<double>(data.n())));
  order.resize(count);
  for (Index i : order) {
    int& y = data.labels[i];
    if (data.num_classes == 2) {
      y = 1 - y;
    } else {
      y = (y + 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(data.num_classes - 1)))) % data.num_classes;
    }
  }
  std::sort(order.begin(), order.end());
  return order;
}

// ---------------------------------------------------------------------------
// Selection

/// The k largest values; ties broken by ascending index.
inline PointSet topk_select(const ValueVector& values, std::size_t k) {
  const std::size_t n = values.size();
  if (k < 1 || k > n) throw Error("topk_select: k must lie in [1, n]");
  std::vector<Index> order(n);
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return values.values[a] > values.values[b]; });
  order.resize(k);
  return PointSet(std::move(order));
}

/// Score of the learner trained on `selected` and evaluated on (x, y).
inline double selection_score(const LabeledDataset& data, const PointSet& selected, const Matrix& x,
                              std::span<const int> y, Learner learner, Metric metric,
                              const LearnerSettings& settings = {}) {
  const auto model = fit_learner(learner, data.features, data.labels, selected.indices(), data.num_classes, settings);
  return evaluate_classifier(model, x, y, metric);
}

struct RegretReport {
  std::size_t k = 0;
  double eps_inf = 0.0;
  double regret = 0.0;
  double bound = 0.0;
  bool holds = false;
};

/// Shapley-mass gap between the ideal top-k under phi_ref and the top-k
/// induced by phi_test, with the 2 k eps_inf bound. Sums are accumulated in
/// long double; `holds` allows 1e-12 of rounding slack.
inline RegretReport surrogate_regret(const ValueVector& phi_ref, const ValueVector& phi_test, std::size_t k) {
  if (phi_ref.size() != phi_test.size()) throw Error("surrogate_regret: length mismatch");
  RegretReport r;
  r.k = k;
  for (std::size_t i = 0; i < phi_ref.size(); ++i) {
    r.eps_inf = std::max(r.eps_inf, std::abs(phi_test.values[i] - phi_ref.values[i]));
  }
  const auto s_ref = topk_select(phi_ref, k);
  const auto s_test = topk_select(phi_test, k);
  long double u_ref = 0.0L, u_test = 0.0L;
  for (Index i : s_ref) u_ref += phi_ref.values[i];
  for (Index i : s_test) u_test += phi_ref.values[i];
  r.regret = static_cast<double>(u_ref - u_test);
  r.bound = 2.0 * static_cast<double>(k) * r.eps_inf;
  r.holds = r.regret >= -1e-12 && r.regret <= r.bound + 1e-12;
  return r;
}

// ---------------------------------------------------------------------------
// Random games

/// Linear plus pairwise-interaction game scaled so |v(S)| <= 1, v(empty) = 0.
inline CoalitionGame random_bounded_game(std::size_t K, RngStream& rng) {
  std::vector<double> a(K);
  std::vector<double> b(K * K, 0.0);
  double scale = 0.0;
  for (auto& w : a) {
    w = rng.uniform(-1.0, 1.0);
    scale += std::abs(w);
  }
  for (std::size_t i = 0; i < K; ++i) {
    for (std::size_t j = i + 1; j < K; ++j) {
      b[i * K + j] = rng.uniform(-0.5, 0.5);
      scale += std::abs(b[i * K + j]);
    }
  }
  if (scale == 0.0) scale = 1.0;
  CoalitionGame g;
  g.K = K;
  g.bound = 1.0;
  g.value = [a = std::move(a), b = std::move(b), K, scale](std::span<const std::size_t> ids) {
    double v = 0.0;
    for (std::size_t x = 0; x < ids.size(); ++x) {
      v += a[ids[x]];
      for (std::size_t y = 0; y < ids.size(); ++y) {
        if (ids[x] < ids[y]) v += b[ids[x] * K + ids[y]];
      }
    }
    return v / scale;
  };
  return g;
}

// ---------------------------------------------------------------------------
// Concentration

struct ConcentrationRow {
  std::size_t T = 0;
  double eta = 0.0;
  double exceed_fraction = 0.0;
  double allowed_fraction = 0.0;
  double median_deviation = 0.0;
  bool within_budget = false;
};

struct ConcentrationReport {
  std::vector<ConcentrationRow> rows;
  double slope = 0.0;
  bool slope_defined = false;
  bool pass = false;
};

/// eta(T) = sqrt(8 B^2 ln(2K/delta) / T).
inline double hoeffding_eta(double bound, std::size_t K, double delta, std::size_t T) {
  return std::sqrt(8.0 * bound * bound * std::log(2.0 * static_cast<double>(K) / delta) / static_cast<double>(T));
}

inline double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

/// Least-squares slope of log(y) against log(x).
inline double loglog_slope(std::span<const double> x, std::span<const double> y) {
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(x.size());
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

/// For each T: the fraction of trials whose max-player deviation from the
/// exact values reaches eta(T) must stay within delta + 3 sqrt(delta(1-delta)/trials),
/// and the median deviation must fall with a log-log slope in [-0.7, -0.3].
/// A game whose deviations are all zero passes the slope check trivially.
inline ConcentrationReport concentration_check(const CoalitionGame& game, const std::vector<std::size_t>& T_grid,
                                               std::size_t trials, double delta, std::uint64_t seed,
                                               std::size_t workers = 1) {
  const auto exact = exact_shapley(game).values;
  ConcentrationReport rep;
  std::vector<double> xs, ys;
  bool all_zero = true;
  rep.pass = true;
  for (std::size_t T : T_grid) {
    ConcentrationRow row;
    row.T = T;
    row.eta = hoeffding_eta(game.bound, game.K, delta, T);
    row.allowed_fraction = delta + 3.0 * std::sqrt(delta * (1.0 - delta) / static_cast<double>(trials));
    std::vector<double> dev(trials);
    parallel_for(trials, workers, [&](std::size_t t) {
      RngStream rng(seed, {Purpose::trial, T, t});
      const auto est = monte_carlo_shapley(game, T, rng);
      double d = 0.0;
      for (std::size_t i = 0; i < game.K; ++i) d = std::max(d, std::abs(est.values[i] - exact[i]));
      dev[t] = d;
    });
    std::size_t exceed = 0;
    for (double d : dev) exceed += d >= row.eta;
    row.exceed_fraction = static_cast<double>(exceed) / static_cast<double>(trials);
    row.within_budget = row.exceed_fraction <= row.allowed_fraction;
    row.median_deviation = median_of(dev);
    if (row.median_deviation > 0.0) all_zero = false;
    rep.pass = rep.pass && row.within_budget;
    xs.push_back(static_cast<double>(T));
    ys.push_back(row.median_deviation);
    rep.rows.push_back(row);
  }
  if (!all_zero && xs.size() >= 2) {
    if (std::all_of(ys.begin(), ys.end(), [](double y) { return y > 0.0; })) {
      rep.slope = loglog_slope(xs, ys);
      rep.slope_defined = true;
      rep.pass = rep.pass && rep.slope >= -0.7 && rep.slope <= -0.3;
    } else {
      rep.pass = false;
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Stability and efficiency

struct StabilityReport {
  std::vector<double> cv;
  double mean_cv = 0.0;
  std::size_t R = 0;
  double epsilon_guard = 0.0;
};

/// CV_i = sample std / (|mean| + guard) across runs; 0/0 counts as 0.
inline StabilityReport stability_report(const std::vector<ValueVector>& runs, double epsilon_guard) {
  if (runs.size() < 2) throw Error("stability_report needs at least two runs");
  const std::size_t n = runs[0].size();
  for (const auto& r : runs) {
    if (r.size() != n) throw Error("stability_report: runs differ in length");
  }
  StabilityReport rep;
  rep.R = runs.size();
  rep.epsilon_guard = epsilon_guard;
  rep.cv.resize(n);
  const double R = static_cast<double>(runs.size());
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (const auto& r : runs) mean += r.values[i];
    mean /= R;
    double ss = 0.0;
    for (const auto& r : runs) ss += (r.values[i] - mean) * (r.values[i] - mean);
    const double sd = std::sqrt(ss / (R - 1.0));
    const double denom = std::abs(mean) + epsilon_guard;
    rep.cv[i] = sd == 0.0 ? 0.0 : sd / denom;
  }
  rep.mean_cv = n ? std::accumulate(rep.cv.begin(), rep.cv.end(), 0.0) / static_cast<double>(n) : 0.0;
  return rep;
}

/// |sum phi - (v(D) - v(empty))|.
inline double efficiency_check(const ValueVector& phi, const CharacteristicFn& cf) {
  const double surplus = cf(cf.dataset().all_points()) - cf(PointSet{});
  return std::abs(phi.sum() - surplus);
}

struct EfficiencyDiagnostic {
  double deviation = 0.0;
  std::vector<double> eps_mc;  // per level, level 0 first
  double eps_leaf = 0.0;
  double bound = 0.0;
  bool holds = false;
};

/// Runs the un-normalised global-game variant and compares its efficiency
/// deviation with the sum of measured per-level errors (against exact level
/// games) plus the measured leaf error. Needs every level and every
/// uniformly split leaf small enough for exact enumeration.
inline EfficiencyDiagnostic efficiency_diagnostic(const CharacteristicFn& cf, const HierarchyTree& tree, HcdvConfig cfg) {
  cfg.global_games = true;
  cfg.normalise = false;
  const auto result = run_hcdv(cf, tree, cfg);
  EfficiencyDiagnostic diag;
  diag.deviation = std::abs(result.values.sum() - result.root_surplus);
  diag.eps_mc.push_back(0.0);  // the root surplus is computed exactly
  for (std::size_t l = 1; l < tree.levels.size(); ++l) {
    const auto game = level_game(cf, cf.bound(), tree, l);
    const auto exact = exact_shapley(game).values;
    double e = 0.0;
    for (std::size_t j = 0; j < exact.size(); ++j) e = std::max(e, std::abs(result.level_estimates[l - 1][j] - exact[j]));
    diag.eps_mc.push_back(e);
  }
  for (std::size_t id : tree.leaves()) {
    const auto& node = tree.nodes[id];
    if (leaf_plan(cfg, node.members.size()) != LeafPlan::uniform || node.members.size() <= 1) continue;
    const auto game = point_game(std::vector<Index>(node.members.begin(), node.members.end()), cf, cf.bound());
    const double mass = result.nodes[id].mass;
    const auto reference = positive_part_allocation(exact_shapley(game).values, mass);
    for (double r : reference) diag.eps_leaf += std::abs(r - mass / static_cast<double>(node.members.size()));
  }
  diag.bound = std::accumulate(diag.eps_mc.begin(), diag.eps_mc.end(), 0.0) + diag.eps_leaf;
  diag.holds = diag.deviation <= diag.bound + 1e-9;
  return diag;
}

/// Largest deviation of any child budget family from its parent's mass.
inline double mass_conservation_gap(const HcdvResult& r, const HierarchyTree& tree) {
  double gap = 0.0;
  for (std::size_t l = 0; l + 1 < tree.levels.size(); ++l) {
    for (std::size_t p : tree.levels[l]) {
      double budgets = 0.0, masses = 0.0;
      for (std::size_t c : tree.nodes[p].children) {
        budgets += r.nodes[c].budget;
        masses += r.nodes[c].mass;
      }
      gap = std::max(gap, std::abs(budgets - r.nodes[p].mass));
      gap = std::max(gap, std::abs(masses - r.nodes[p].mass));
    }
  }
  return gap;
}

inline nlohmann::json to_json(const ConcentrationReport& r) {
  nlohmann::json j;
  j["pass"] = r.pass;
  j["slope"] = r.slope_defined ? nlohmann::json(r.slope) : nlohmann::json(nullptr);
  auto& rows = j["rows"] = nlohmann::json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"T", row.T},
                    {"eta", row.eta},
                    {"exceed_fraction", row.exceed_fraction},
                    {"allowed_fraction", row.allowed_fraction},
                    {"median_deviation", row.median_deviation},
                    {"within_budget", row.within_budget}});
  }
  return j;
}

// ---------------------------------------------------------------------------
// Downstream selection experiment

struct DownstreamSpec {
  SyntheticSpec data{};
  double noise_rate = 0.2;
  NoiseModel noise_model = NoiseModel::localised;
  double keep_fraction = 0.3;
  std::vector<std::size_t> branching{16, 16};
  std::size_t leaf_cap = 12;
  std::size_t T = 256;
  double lambda = 0.1;
  Learner learner = Learner::nearest_centroid;
  std::size_t workers = 1;
};

struct DownstreamRun {
  std::uint64_t seed = 0;
  double auc_hcdv = 0.0;
  double auc_random = 0.0;
  std::size_t noisy_in_hcdv = 0;
  std::size_t noisy_in_random = 0;
  std::uint64_t evaluations = 0;
};

/// Values a noisy synthetic training set with HCDV (identity embedding),
/// keeps the top fraction, trains the learner on it and scores AUC on a
/// fresh test draw from the same generator; the same for a random subset.
inline DownstreamRun downstream_run(DownstreamSpec spec, std::uint64_t seed) {
  spec.data.seed = seed;
  auto data = std::make_shared<LabeledDataset>(make_synthetic(spec.data));
  const auto flipped = plant_label_noise(*data, spec.noise_rate, seed, spec.noise_model);
  const auto test = make_synthetic_table(spec.data, 1);
  Matrix tx(test.rows(), data->dim());
  for (std::size_t i = 0; i < test.rows(); ++i) {
    const auto z = data->standardise(test.features.row(i));
    std::copy(z.begin(), z.end(), tx.row(i).begin());
  }
  auto emb = std::make_shared<EmbeddingMatrix>(identity_embedding(data->features));
  UtilityConfig uc;
  uc.lambda = spec.lambda;
  uc.learner = spec.learner;
  const CharacteristicFn cf(data, emb, uc);
  TreeConfig tc;
  tc.branching = spec.branching;
  tc.leaf_cap = spec.leaf_cap;
  tc.seed = seed;
  const auto tree = build_tree(*emb, tc);
  HcdvConfig hc;
  hc.T = spec.T;
  hc.M = spec.leaf_cap;
  hc.lambda = spec.lambda;
  hc.seed = seed;
  hc.workers = spec.workers;
  const auto result = run_hcdv(cf, tree, hc);

  const auto k = static_cast<std::size_t>(std::llround(spec.keep_fraction * static_cast<double>(data->n())));
  const auto top = topk_select(result.values, k);
  RngStream rng(seed, {Purpose::baseline, 0, 0});
  const auto rnd = topk_select(random_values(data->n(), rng), k);
  std::vector<char> noisy(data->n(), 0);
  for (Index i : flipped) noisy[i] = 1;
  DownstreamRun run;
  run.seed = seed;
  run.auc_hcdv = selection_score(*data, top, tx, test.labels, spec.learner, Metric::auc);
  run.auc_random = selection_score(*data, rnd, tx, test.labels, spec.learner, Metric::auc);
  for (Index i : top) run.noisy_in_hcdv += noisy[i];
  for (Index i : rnd) run.noisy_in_random += noisy[i];
  run.evaluations = result.evaluations;
  return run;
}

// ---------------------------------------------------------------------------
// Property suite

struct CheckSettings {
  std::size_t n = 300;
  std::vector<std::size_t> branching{6};
  std::size_t M = 12;
  std::size_t T = 128;
  double lambda = 0.1;
  std::size_t concentration_trials = 200;
  std::vector<std::size_t> T_grid{64, 256, 1024};
  double delta = 0.05;
  std::size_t regret_triples = 1000;
  std::size_t stability_runs = 3;
  double stability_guard = 1e-3;
  double weight_fault = 1.0;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

struct CheckOutcome {
  nlohmann::json report;
  bool pass = false;
};

/// Concentration, efficiency, regret and stability suites on a synthetic
/// corpus. `weight_fault` is forwarded to every HCDV run.
inline CheckOutcome run_check_suite(const CheckSettings& cs) {
  CheckOutcome out;
  auto& rep = out.report;
  rep["seed"] = cs.seed;
  rep["weight_fault"] = cs.weight_fault;

  RngStream game_rng(cs.seed, {Purpose::check, 0, 0});
  const auto game = random_bounded_game(5, game_rng);
  const auto conc = concentration_check(game, cs.T_grid, cs.concentration_trials, cs.delta, cs.seed, cs.workers);
  rep["concentration"] = to_json(conc);

  SyntheticSpec spec;
  spec.n = cs.n;
  spec.seed = cs.seed;
  auto data = std::make_shared<const LabeledDataset>(make_synthetic(spec));
  auto emb = std::make_shared<const EmbeddingMatrix>(identity_embedding(data->features));
  UtilityConfig uc;
  uc.lambda = cs.lambda;
  TreeConfig tc;
  tc.branching = cs.branching;
  tc.leaf_cap = cs.M;
  tc.seed = cs.seed;
  const auto tree = build_tree(*emb, tc);
  HcdvConfig hc;
  hc.T = cs.T;
  hc.M = cs.M;
  hc.lambda = cs.lambda;
  hc.seed = cs.seed;
  hc.workers = cs.workers;
  hc.weight_fault = cs.weight_fault;
  const CharacteristicFn cf(data, emb, uc);
  const auto result = run_hcdv(cf, tree, hc);
  const double deviation = efficiency_check(result.values, cf);
  const double gap = mass_conservation_gap(result, tree);
  const bool eff_pass = deviation <= 1e-6 && gap <= 1e-6;

  SyntheticSpec small_spec = spec;
  small_spec.n = 50;
  auto small = std::make_shared<const LabeledDataset>(make_synthetic(small_spec));
  auto small_emb = std::make_shared<const EmbeddingMatrix>(identity_embedding(small->features));
  TreeConfig small_tc = tc;
  small_tc.branching = {3, 2};
  const auto small_tree = build_tree(*small_emb, small_tc);
  const CharacteristicFn small_cf(small, small_emb, uc);
  const auto diag = efficiency_diagnostic(small_cf, small_tree, hc);
  rep["efficiency"] = {{"deviation", deviation},
                       {"mass_gap", gap},
                       {"root_surplus", result.root_surplus},
                       {"diagnostic", {{"deviation", diag.deviation},
                                       {"eps_mc", diag.eps_mc},
                                       {"eps_leaf", diag.eps_leaf},
                                       {"bound", diag.bound},
                                       {"holds", diag.holds}}},
                       {"pass", eff_pass && diag.holds}};

  RngStream regret_rng(cs.seed, {Purpose::check, 1, 0});
  std::size_t violations = 0;
  double worst_ratio = 0.0;
  for (std::size_t t = 0; t < cs.regret_triples; ++t) {
    const std::size_t n = 2 + regret_rng.below(60);
    ValueVector ref, test;
    ref.values.resize(n);
    test.values.resize(n);
    const double eps = regret_rng.uniform(0.0, 0.5);
    for (std::size_t i = 0; i < n; ++i) {
      ref.values[i] = regret_rng.normal();
      test.values[i] = ref.values[i] + regret_rng.uniform(-eps, eps);
    }
    const auto k = static_cast<std::size_t>(1 + regret_rng.below(n));
    const auto r = surrogate_regret(ref, test, k);
    if (!r.holds) ++violations;
    if (r.bound > 0.0) worst_ratio = std::max(worst_ratio, r.regret / r.bound);
  }
  rep["regret"] = {{"triples", cs.regret_triples},
                   {"violations", violations},
                   {"worst_ratio", worst_ratio},
                   {"pass", violations == 0}};

  std::vector<ValueVector> runs;
  for (std::size_t r = 0; r < cs.stability_runs; ++r) {
    HcdvConfig rc = hc;
    rc.seed = cs.seed + 1000 + r;
    runs.push_back(run_hcdv(cf, tree, rc).values);
  }
  bool stab_pass = true;
  nlohmann::json stab = {{"runs", cs.stability_runs}};
  if (runs.size() >= 2) {
    const auto st = stability_report(runs, cs.stability_guard);
    stab_pass = std::isfinite(st.mean_cv);
    stab["mean_cv"] = st.mean_cv;
    stab["epsilon_guard"] = st.epsilon_guard;
  }
  stab["pass"] = stab_pass;
  rep["stability"] = stab;

  out.pass = conc.pass && eff_pass && diag.holds && violations == 0 && stab_pass;
  rep["pass"] = out.pass;
  return out;
}

}  // namespace hcdv

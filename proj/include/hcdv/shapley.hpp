#pragma once

// Cooperative-game kernels: exact Shapley by subset enumeration, the
// permutation estimator with replayable logs, and the flat point-level
// baselines (MC Data-Shapley, Group Shapley, leave-one-out, random).

#include <algorithm>
#include <atomic>
#include <bit>
#include <chrono>
#include <exception>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "hcdv/core.hpp"
#include "hcdv/utility.hpp"

namespace hcdv {

/// Runs fn(i) for i in [0, count) on up to `workers` threads. Results must be
/// written to per-index slots so that the outcome does not depend on timing.
inline void parallel_for(std::size_t count, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, count));
  if (workers == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= count || failed.load()) return;
        try {
          fn(i);
        } catch (...) {
          if (!failed.exchange(true)) failure = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

/// A K-player game. `value` receives the sorted ids of a coalition's players.
struct CoalitionGame {
  std::size_t K = 0;
  std::function<double(std::span<const std::size_t>)> value;
  /// Payoff bound B with |value(S)| <= B for every S.
  double bound = 1.0;

  [[nodiscard]] double operator()(std::span<const std::size_t> ids) const { return value(ids); }
  [[nodiscard]] double empty_value() const { return value({}); }
  [[nodiscard]] double grand_value() const {
    std::vector<std::size_t> all(K);
    for (std::size_t i = 0; i < K; ++i) all[i] = i;
    return value(all);
  }
};

/// Game whose players are disjoint point sets and whose payoff is a set
/// function evaluated on the union of the selected players. The payoff is
/// held by reference and must outlive the game.
template <typename Payoff>
CoalitionGame union_game(std::vector<PointSet> players, const Payoff& payoff, double bound) {
  std::size_t total = 0;
  for (const auto& p : players) total += p.size();
  if (set_union(players).size() != total) throw Error("coalition players must be pairwise disjoint");
  CoalitionGame g;
  g.K = players.size();
  g.bound = bound;
  g.value = [players = std::move(players), &payoff](std::span<const std::size_t> ids) {
    std::vector<Index> merged;
    for (std::size_t id : ids) merged.insert(merged.end(), players[id].begin(), players[id].end());
    std::sort(merged.begin(), merged.end());
    return static_cast<double>(payoff(PointSet::from_sorted(std::move(merged))));
  };
  return g;
}

/// Game whose players are individual points.
template <typename Payoff>
CoalitionGame point_game(std::vector<Index> points, const Payoff& payoff, double bound) {
  std::sort(points.begin(), points.end());
  CoalitionGame g;
  g.K = points.size();
  g.bound = bound;
  g.value = [points = std::move(points), &payoff](std::span<const std::size_t> ids) {
    std::vector<Index> s(ids.size());
    for (std::size_t k = 0; k < ids.size(); ++k) s[k] = points[ids[k]];
    return static_cast<double>(payoff(PointSet::from_sorted(std::move(s))));
  };
  return g;
}

enum class EstimateMode { exact, monte_carlo };

struct ShapleyEstimate {
  std::vector<double> values;
  std::size_t T = 0;
  EstimateMode mode = EstimateMode::exact;
  std::vector<std::uint64_t> permutation_log;
  /// Standard error per player (Monte-Carlo mode only).
  std::vector<double> std_errors;

  [[nodiscard]] double sum() const {
    double s = 0.0;
    for (double v : values) s += v;
    return s;
  }
};

inline constexpr std::size_t kExactShapleyLimit = 12;

/// Exact Shapley values by the subset-weight formula over all 2^K coalitions.
inline ShapleyEstimate exact_shapley(const CoalitionGame& game) {
  const std::size_t K = game.K;
  if (K > kExactShapleyLimit) {
    throw Error("exact Shapley is limited to " + std::to_string(kExactShapleyLimit) + " players (got " +
                std::to_string(K) + "); use monte_carlo_shapley instead");
  }
  const std::size_t subsets = std::size_t{1} << K;
  std::vector<double> v(subsets);
  std::vector<std::size_t> ids;
  for (std::size_t mask = 0; mask < subsets; ++mask) {
    ids.clear();
    for (std::size_t i = 0; i < K; ++i) {
      if (mask >> i & 1U) ids.push_back(i);
    }
    v[mask] = game(ids);
  }
  // weight[s] = s! (K - s - 1)! / K!
  std::vector<double> weight(K == 0 ? 1 : K);
  for (std::size_t s = 0; s < K; ++s) {
    double w = 1.0 / static_cast<double>(K);
    // 1 / (K * C(K-1, s))
    for (std::size_t j = 1; j <= s; ++j) w *= static_cast<double>(j) / static_cast<double>(K - j);
    weight[s] = w;
  }
  ShapleyEstimate est;
  est.mode = EstimateMode::exact;
  est.values.assign(K, 0.0);
  for (std::size_t i = 0; i < K; ++i) {
    const std::size_t bit = std::size_t{1} << i;
    double phi = 0.0;
    for (std::size_t mask = 0; mask < subsets; ++mask) {
      if (mask & bit) continue;
      phi += weight[static_cast<std::size_t>(std::popcount(mask))] * (v[mask | bit] - v[mask]);
    }
    est.values[i] = phi;
  }
  return est;
}

namespace detail {

inline void check_marginal(double m, double bound) {
  if (!(std::abs(m) <= 2.0 * bound) || !std::isfinite(m)) {
    throw Error("marginal contribution " + std::to_string(m) + " lies outside [-2B, 2B] with B = " +
                std::to_string(bound));
  }
}

/// Marginals of every player along one permutation.
inline std::vector<double> sweep(const CoalitionGame& game, const std::vector<std::size_t>& perm) {
  std::vector<double> out(game.K);
  std::vector<std::size_t> prefix;
  prefix.reserve(game.K);
  double prev = game.empty_value();
  for (std::size_t p : perm) {
    prefix.insert(std::upper_bound(prefix.begin(), prefix.end(), p), p);
    const double cur = game(prefix);
    out[p] = cur - prev;
    check_marginal(out[p], game.bound);
    prev = cur;
  }
  return out;
}

}  // namespace detail

/// Replays the permutation estimator from a log of per-permutation seeds.
/// Each permutation yields every player's marginal with one prefix sweep.
inline ShapleyEstimate permutation_shapley(const CoalitionGame& game, std::span<const std::uint64_t> log,
                                           std::size_t workers = 1) {
  if (log.empty()) throw Error("permutation estimator needs T >= 1");
  const std::size_t T = log.size(), K = game.K;
  std::vector<std::vector<double>> marginals(T);
  parallel_for(T, workers, [&](std::size_t t) {
    marginals[t] = detail::sweep(game, permutation_from_seed(log[t], K));
  });
  ShapleyEstimate est;
  est.mode = EstimateMode::monte_carlo;
  est.T = T;
  est.permutation_log.assign(log.begin(), log.end());
  est.values.assign(K, 0.0);
  est.std_errors.assign(K, 0.0);
  std::vector<double> sq(K, 0.0);
  for (const auto& m : marginals) {
    for (std::size_t i = 0; i < K; ++i) {
      est.values[i] += m[i];
      sq[i] += m[i] * m[i];
    }
  }
  const double tt = static_cast<double>(T);
  for (std::size_t i = 0; i < K; ++i) {
    est.values[i] /= tt;
    if (T > 1) {
      const double var = std::max(0.0, (sq[i] - tt * est.values[i] * est.values[i]) / (tt - 1.0));
      est.std_errors[i] = std::sqrt(var / tt);
    }
  }
  return est;
}

inline std::vector<std::uint64_t> draw_permutation_log(std::size_t T, RngStream& rng) {
  std::vector<std::uint64_t> log(T);
  for (auto& s : log) s = rng.next_u64();
  return log;
}

inline ShapleyEstimate monte_carlo_shapley(const CoalitionGame& game, std::size_t T, RngStream& rng,
                                           std::size_t workers = 1) {
  if (T < 1) throw Error("monte_carlo_shapley requires T >= 1");
  const auto log = draw_permutation_log(T, rng);
  return permutation_shapley(game, log, workers);
}

/// Average over all K! permutations; equals exact Shapley.
inline ShapleyEstimate all_permutations_shapley(const CoalitionGame& game) {
  if (game.K > 9) throw Error("full permutation enumeration is limited to 9 players");
  std::vector<std::size_t> perm(game.K);
  for (std::size_t i = 0; i < game.K; ++i) perm[i] = i;
  ShapleyEstimate est;
  est.mode = EstimateMode::exact;
  est.values.assign(game.K, 0.0);
  std::size_t count = 0;
  do {
    const auto m = detail::sweep(game, perm);
    for (std::size_t i = 0; i < game.K; ++i) est.values[i] += m[i];
    ++count;
  } while (std::next_permutation(perm.begin(), perm.end()));
  for (double& v : est.values) v /= static_cast<double>(count);
  est.T = count;
  return est;
}

/// Permutation estimate for one player only: two payoff queries per
/// permutation instead of a full sweep.
inline double player_shapley(const CoalitionGame& game, std::size_t player, std::span<const std::uint64_t> log) {
  if (log.empty()) throw Error("player estimator needs T >= 1");
  double total = 0.0;
  for (std::uint64_t seed : log) {
    const auto perm = permutation_from_seed(seed, game.K);
    std::vector<std::size_t> prefix;
    for (std::size_t p : perm) {
      if (p == player) break;
      prefix.push_back(p);
    }
    std::sort(prefix.begin(), prefix.end());
    const double without = game(prefix);
    prefix.insert(std::upper_bound(prefix.begin(), prefix.end(), player), player);
    const double m = game(prefix) - without;
    detail::check_marginal(m, game.bound);
    total += m;
  }
  return total / static_cast<double>(log.size());
}

// ---------------------------------------------------------------------------
// Flat point-level baselines

namespace detail {
inline std::int64_t elapsed_ms(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start).count();
}
}  // namespace detail

/// Monte-Carlo Data-Shapley: the permutation estimator on the n-player game.
inline ValueVector flat_mcds(const CharacteristicFn& cf, std::size_t T, RngStream& rng, std::size_t workers = 1) {
  if (T < 1) throw Error("flat_mcds requires T >= 1");
  const auto start = std::chrono::steady_clock::now();
  const std::size_t n = cf.dataset().n();
  std::vector<Index> pts(n);
  for (std::size_t i = 0; i < n; ++i) pts[i] = static_cast<Index>(i);
  const auto game = point_game(std::move(pts), cf, cf.bound());
  const auto est = monte_carlo_shapley(game, T, rng, workers);
  ValueVector out;
  out.values = est.values;
  out.method_tag = "mcds";
  out.seed = rng.root_seed();
  out.permutations_T = static_cast<std::int64_t>(T);
  out.wallclock_ms = detail::elapsed_ms(start);
  return out;
}

/// Throws unless the groups partition {0..n-1}.
inline void check_groups_partition(const std::vector<PointSet>& groups, std::size_t n) {
  std::vector<char> seen(n, 0);
  for (const auto& g : groups) {
    if (g.empty()) throw Error("groups must be non-empty");
    for (Index i : g) {
      if (i >= n) throw Error("group index out of range");
      if (seen[i]++) throw Error("groups overlap at point " + std::to_string(i));
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!seen[i]) throw Error("groups do not cover point " + std::to_string(i));
  }
}

/// Group Shapley: the permutation estimator over the group game; each point
/// receives its group's value divided by the group size.
inline ValueVector group_shapley(const CharacteristicFn& cf, const std::vector<PointSet>& groups, std::size_t T,
                                 RngStream& rng, std::size_t workers = 1) {
  if (T < 1) throw Error("group_shapley requires T >= 1");
  const auto start = std::chrono::steady_clock::now();
  const std::size_t n = cf.dataset().n();
  check_groups_partition(groups, n);
  const auto game = union_game(groups, cf, cf.bound());
  const auto est = monte_carlo_shapley(game, T, rng, workers);
  ValueVector out;
  out.values.assign(n, 0.0);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    for (Index i : groups[g]) out.values[i] = est.values[g] / static_cast<double>(groups[g].size());
  }
  out.method_tag = "group_shapley";
  out.seed = rng.root_seed();
  out.permutations_T = static_cast<std::int64_t>(T);
  out.wallclock_ms = detail::elapsed_ms(start);
  return out;
}

/// phi_i = v(D) - v(D \ {i}).
inline ValueVector leave_one_out(const CharacteristicFn& cf) {
  const auto start = std::chrono::steady_clock::now();
  const std::size_t n = cf.dataset().n();
  if (n < 2) throw Error("leave_one_out needs n >= 2");
  const double full = cf(PointSet::range(n));
  ValueVector out;
  out.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<Index> rest;
    rest.reserve(n - 1);
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) rest.push_back(static_cast<Index>(j));
    }
    out.values[i] = full - cf(PointSet::from_sorted(std::move(rest)));
  }
  out.method_tag = "loo";
  out.wallclock_ms = detail::elapsed_ms(start);
  return out;
}

inline ValueVector random_values(std::size_t n, RngStream& rng) {
  ValueVector out;
  out.values.resize(n);
  for (double& v : out.values) v = rng.uniform();
  out.method_tag = "random";
  out.seed = rng.root_seed();
  return out;
}

}  // namespace hcdv

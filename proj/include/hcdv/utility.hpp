#pragma once

// Characteristic functions: base utility of a fast learner trained on a point
// set and scored on the validation split, the normalised cross-label cosine
// dispersion of the set's embeddings, and their bounded combination.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <memory>
#include <mutex>
#include <numeric>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "hcdv/core.hpp"
#include "hcdv/embedding.hpp"

namespace hcdv {

enum class Metric { accuracy, balanced_accuracy, auc };
enum class Learner { nearest_centroid, ridge_logistic };

inline Metric parse_metric(std::string_view s) {
  if (s == "accuracy") return Metric::accuracy;
  if (s == "balanced_accuracy") return Metric::balanced_accuracy;
  if (s == "auc") return Metric::auc;
  throw Error("unknown metric: " + std::string(s));
}

inline Learner parse_learner(std::string_view s) {
  if (s == "nearest_centroid") return Learner::nearest_centroid;
  if (s == "ridge_logistic") return Learner::ridge_logistic;
  throw Error("unknown learner: " + std::string(s));
}

inline const char* to_string(Metric m) {
  switch (m) {
    case Metric::accuracy: return "accuracy";
    case Metric::balanced_accuracy: return "balanced_accuracy";
    case Metric::auc: return "auc";
  }
  return "?";
}

inline const char* to_string(Learner l) {
  return l == Learner::nearest_centroid ? "nearest_centroid" : "ridge_logistic";
}

/// Upper bound of the cosine distance.
inline constexpr double kCosineDMax = 2.0;

/// 1 - cos(u, v), clamped to [0, 2]. A zero-norm vector is at distance 2
/// from everything, itself included.
template <typename T>
double cosine_distance(std::span<const T> u, std::span<const T> v) {
  double uu = 0.0, vv = 0.0, uv = 0.0;
  for (std::size_t k = 0; k < u.size(); ++k) {
    uu += static_cast<double>(u[k]) * u[k];
    vv += static_cast<double>(v[k]) * v[k];
    uv += static_cast<double>(u[k]) * v[k];
  }
  if (uu <= 0.0 || vv <= 0.0) return kCosineDMax;
  return std::clamp(1.0 - uv / std::sqrt(uu * vv), 0.0, kCosineDMax);
}

// ---------------------------------------------------------------------------
// Learners and metrics

/// Chance-level score used for the empty coalition: 0.5 for AUC, 1/C otherwise.
inline double chance_score(Metric metric, int num_classes) {
  return metric == Metric::auc ? 0.5 : 1.0 / static_cast<double>(num_classes);
}

/// Rank-based AUC with ties counted as one half. Needs both classes present.
inline double binary_auc(std::span<const double> scores, std::span<const int> labels) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0.0;
  std::size_t n_pos = 0, n_neg = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + j + 1);  // 1-based
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1) {
        rank_sum_pos += avg_rank;
        ++n_pos;
      } else {
        ++n_neg;
      }
    }
    i = j;
  }
  if (n_pos == 0 || n_neg == 0) return 0.5;
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

inline double accuracy_score(std::span<const int> pred, std::span<const int> truth) {
  if (truth.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += pred[i] == truth[i];
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

inline double balanced_accuracy_score(std::span<const int> pred, std::span<const int> truth,
                                      int num_classes) {
  std::vector<std::size_t> total(static_cast<std::size_t>(num_classes), 0), hit(total);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ++total[static_cast<std::size_t>(truth[i])];
    hit[static_cast<std::size_t>(truth[i])] += pred[i] == truth[i];
  }
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < num_classes; ++c) {
    if (total[static_cast<std::size_t>(c)] == 0) continue;
    sum += static_cast<double>(hit[static_cast<std::size_t>(c)]) /
           static_cast<double>(total[static_cast<std::size_t>(c)]);
    ++present;
  }
  return present == 0 ? 0.0 : sum / present;
}

/// A fitted classifier: per-class linear scores score_c(x) = w_c . x + b_c.
/// Nearest-centroid fits map onto the same form (w_c = 2 mu_c,
/// b_c = -|mu_c|^2); absent classes score -inf.
struct LinearClassifier {
  int num_classes = 0;
  std::size_t dim = 0;
  std::vector<double> weights;  // num_classes x dim
  std::vector<double> bias;     // num_classes
  std::vector<bool> present;

  [[nodiscard]] double score(int c, std::span<const double> x) const {
    if (!present[static_cast<std::size_t>(c)]) return -std::numeric_limits<double>::infinity();
    const double* w = weights.data() + static_cast<std::size_t>(c) * dim;
    double s = bias[static_cast<std::size_t>(c)];
    for (std::size_t k = 0; k < dim; ++k) s += w[k] * x[k];
    return s;
  }

  [[nodiscard]] int predict(std::span<const double> x) const {
    int best = -1;
    double best_score = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < num_classes; ++c) {
      if (!present[static_cast<std::size_t>(c)]) continue;
      const double s = score(c, x);
      if (best < 0 || s > best_score) {
        best = c;
        best_score = s;
      }
    }
    return best < 0 ? 0 : best;
  }

  /// Binary decision score (class 1 minus class 0); constant when either
  /// class is missing from the training set.
  [[nodiscard]] double margin(std::span<const double> x) const {
    if (!present[0] || !present[1]) return 0.0;
    return score(1, x) - score(0, x);
  }
};

struct LearnerSettings {
  int steps = 200;
  double step_size = 0.1;
  double ridge = 1e-3;
};

inline LinearClassifier fit_nearest_centroid(const Matrix& x, std::span<const int> y,
                                             std::span<const Index> rows, int num_classes) {
  LinearClassifier m;
  m.num_classes = num_classes;
  m.dim = x.cols();
  m.weights.assign(static_cast<std::size_t>(num_classes) * m.dim, 0.0);
  m.bias.assign(static_cast<std::size_t>(num_classes), 0.0);
  m.present.assign(static_cast<std::size_t>(num_classes), false);
  std::vector<std::size_t> count(static_cast<std::size_t>(num_classes), 0);
  for (Index r : rows) {
    const auto c = static_cast<std::size_t>(y[r]);
    ++count[c];
    const auto row = x.row(r);
    double* w = m.weights.data() + c * m.dim;
    for (std::size_t k = 0; k < m.dim; ++k) w[k] += row[k];
  }
  for (std::size_t c = 0; c < count.size(); ++c) {
    if (count[c] == 0) continue;
    m.present[c] = true;
    double* w = m.weights.data() + c * m.dim;
    double sq = 0.0;
    for (std::size_t k = 0; k < m.dim; ++k) {
      w[k] /= static_cast<double>(count[c]);
      sq += w[k] * w[k];
      w[k] *= 2.0;
    }
    m.bias[c] = -sq;
  }
  return m;
}

/// Softmax regression with an L2 ridge, fixed-step full-batch gradient descent
/// from zero. Every class keeps its logit, so classes missing from the set
/// are driven down rather than dropped.
inline LinearClassifier fit_ridge_logistic(const Matrix& x, std::span<const int> y,
                                           std::span<const Index> rows, int num_classes,
                                           const LearnerSettings& settings = {}) {
  LinearClassifier m;
  m.num_classes = num_classes;
  m.dim = x.cols();
  const std::size_t C = static_cast<std::size_t>(num_classes), D = m.dim;
  m.weights.assign(C * D, 0.0);
  m.bias.assign(C, 0.0);
  m.present.assign(C, true);
  if (rows.empty()) return m;
  std::vector<double> gw(C * D), gb(C), logits(C);
  const double inv_n = 1.0 / static_cast<double>(rows.size());
  for (int step = 0; step < settings.steps; ++step) {
    std::fill(gw.begin(), gw.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (Index r : rows) {
      const auto row = x.row(r);
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < C; ++c) {
        double s = m.bias[c];
        const double* w = m.weights.data() + c * D;
        for (std::size_t k = 0; k < D; ++k) s += w[k] * row[k];
        logits[c] = s;
        mx = std::max(mx, s);
      }
      double z = 0.0;
      for (std::size_t c = 0; c < C; ++c) z += (logits[c] = std::exp(logits[c] - mx));
      for (std::size_t c = 0; c < C; ++c) {
        const double g = logits[c] / z - (static_cast<int>(c) == y[r] ? 1.0 : 0.0);
        gb[c] += g;
        double* gwc = gw.data() + c * D;
        for (std::size_t k = 0; k < D; ++k) gwc[k] += g * row[k];
      }
    }
    for (std::size_t i = 0; i < C * D; ++i) {
      m.weights[i] -= settings.step_size * (gw[i] * inv_n + settings.ridge * m.weights[i]);
    }
    for (std::size_t c = 0; c < C; ++c) m.bias[c] -= settings.step_size * gb[c] * inv_n;
  }
  return m;
}

inline LinearClassifier fit_learner(Learner learner, const Matrix& x, std::span<const int> y,
                                    std::span<const Index> rows, int num_classes,
                                    const LearnerSettings& settings = {}) {
  return learner == Learner::nearest_centroid
             ? fit_nearest_centroid(x, y, rows, num_classes)
             : fit_ridge_logistic(x, y, rows, num_classes, settings);
}

/// Scores a fitted classifier on (x, y).
inline double evaluate_classifier(const LinearClassifier& model, const Matrix& x,
                                  std::span<const int> y, Metric metric) {
  if (metric == Metric::auc) {
    if (model.num_classes != 2) throw Error("AUC requires a binary task");
    std::vector<double> scores(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) scores[i] = model.margin(x.row(i));
    return binary_auc(scores, y);
  }
  std::vector<int> pred(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) pred[i] = model.predict(x.row(i));
  return metric == Metric::accuracy ? accuracy_score(pred, y)
                                    : balanced_accuracy_score(pred, y, model.num_classes);
}

// ---------------------------------------------------------------------------
// Payoff memo

/// Thread-safe memo of set payoffs keyed by a 128-bit set fingerprint.
class PayoffCache {
 public:
  bool lookup(const SetKey& key, double& value) const {
    std::shared_lock lock(mutex_);
    const auto it = map_.find(key);
    if (it == map_.end()) return false;
    value = it->second;
    return true;
  }

  /// Returns true when the key was newly inserted.
  bool insert(const SetKey& key, double value) {
    std::unique_lock lock(mutex_);
    return map_.emplace(key, value).second;
  }

  void clear() {
    std::unique_lock lock(mutex_);
    map_.clear();
  }

  [[nodiscard]] std::size_t size() const {
    std::shared_lock lock(mutex_);
    return map_.size();
  }

 private:
  mutable std::shared_mutex mutex_;
  std::unordered_map<SetKey, double, SetKeyHash> map_;
};

struct DispersionResult {
  double value = 0.0;
  std::size_t pair_count = 0;
};

struct UtilityConfig {
  double lambda = 0.0;
  Metric metric = Metric::accuracy;
  Learner learner = Learner::nearest_centroid;
  LearnerSettings learner_settings{};
};

/// v(S) = M(S) + lambda * normalised dispersion(S), memoised and counted.
/// |v(S)| <= B = 1 + lambda * d_max for every S.
class CharacteristicFn {
 public:
  CharacteristicFn(std::shared_ptr<const LabeledDataset> data,
                   std::shared_ptr<const EmbeddingMatrix> embedding, UtilityConfig config,
                   std::shared_ptr<PayoffCache> cache = nullptr)
      : data_(std::move(data)),
        embedding_(std::move(embedding)),
        config_(config),
        cache_(cache ? std::move(cache) : std::make_shared<PayoffCache>()) {
    if (!data_) throw std::invalid_argument("CharacteristicFn: null dataset");
    if (config_.lambda < 0.0) throw Error("lambda must be non-negative");
    if (config_.metric == Metric::auc && data_->num_classes != 2) {
      throw Error("metric auc requires exactly two classes");
    }
    if (data_->val_labels.empty()) throw Error("validation split is empty");
    if (config_.lambda > 0.0) {
      if (!embedding_) throw Error("lambda > 0 needs an embedding");
      embedding_->validate(data_->n());
    }
    if (embedding_) prepare_unit_vectors();
  }

  [[nodiscard]] const LabeledDataset& dataset() const noexcept { return *data_; }
  [[nodiscard]] std::shared_ptr<const LabeledDataset> dataset_ptr() const noexcept { return data_; }
  [[nodiscard]] std::shared_ptr<const EmbeddingMatrix> embedding_ptr() const noexcept { return embedding_; }
  [[nodiscard]] const UtilityConfig& config() const noexcept { return config_; }
  [[nodiscard]] std::shared_ptr<PayoffCache> cache() const noexcept { return cache_; }
  [[nodiscard]] double lambda() const noexcept { return config_.lambda; }
  [[nodiscard]] static constexpr double d_max() noexcept { return kCosineDMax; }
  [[nodiscard]] double bound() const noexcept { return 1.0 + config_.lambda * d_max(); }

  [[nodiscard]] double empty_score() const {
    return chance_score(config_.metric, data_->num_classes);
  }

  /// M(S): learner trained on S, scored on the validation split.
  [[nodiscard]] double base_utility(const PointSet& s) const {
    if (s.empty()) return empty_score();
    if (!s.valid_for(data_->n())) throw std::out_of_range("point index out of range");
    const auto model = fit_learner(config_.learner, data_->features, data_->labels, s.indices(),
                                   data_->num_classes, config_.learner_settings);
    const double score = evaluate_classifier(model, data_->val_features, data_->val_labels, config_.metric);
    if (!std::isfinite(score)) return empty_score();
    return std::clamp(score, 0.0, 1.0);
  }

  /// Mean cosine distance over unordered cross-label pairs of S; 0 when there
  /// is no such pair.
  [[nodiscard]] DispersionResult normalized_dispersion(const PointSet& s) const {
    if (!embedding_) throw Error("dispersion needs an embedding");
    if (!s.valid_for(data_->n())) throw std::out_of_range("point index out of range");
    const std::size_t C = static_cast<std::size_t>(data_->num_classes);
    const std::size_t d = embedding_->d();
    // Per class: unit-vector sum over non-zero rows, and zero-row counts.
    std::vector<double> sums(C * d, 0.0);
    std::vector<std::size_t> nonzero(C, 0), zero(C, 0);
    for (Index i : s) {
      const auto c = static_cast<std::size_t>(data_->labels[i]);
      if (!has_norm_[i]) {
        ++zero[c];
        continue;
      }
      ++nonzero[c];
      const double* u = unit_.data() + static_cast<std::size_t>(i) * d;
      double* acc = sums.data() + c * d;
      for (std::size_t k = 0; k < d; ++k) acc[k] += u[k];
    }
    DispersionResult out;
    double total = 0.0;
    for (std::size_t a = 0; a < C; ++a) {
      for (std::size_t b = a + 1; b < C; ++b) {
        const std::size_t na = nonzero[a] + zero[a], nb = nonzero[b] + zero[b];
        const std::size_t pairs = na * nb;
        if (pairs == 0) continue;
        out.pair_count += pairs;
        const std::size_t nz_pairs = nonzero[a] * nonzero[b];
        double dot = 0.0;
        for (std::size_t k = 0; k < d; ++k) dot += sums[a * d + k] * sums[b * d + k];
        total += static_cast<double>(nz_pairs) - dot;
        total += d_max() * static_cast<double>(pairs - nz_pairs);
      }
    }
    if (out.pair_count > 0) {
      out.value = std::clamp(total / static_cast<double>(out.pair_count), 0.0, d_max());
    }
    return out;
  }

  /// Uncached v(S).
  [[nodiscard]] double evaluate_uncached(const PointSet& s) const {
    double v = base_utility(s);
    if (config_.lambda > 0.0) v += config_.lambda * normalized_dispersion(s).value;
    return std::clamp(v, -bound(), bound());
  }

  /// Memoised v(S); counts cache misses.
  double operator()(const PointSet& s) const {
    const SetKey key = fingerprint(s);
    double v = 0.0;
    if (cache_->lookup(key, v)) return v;
    v = evaluate_uncached(s);
    if (cache_->insert(key, v)) evaluations_.fetch_add(1, std::memory_order_relaxed);
    return v;
  }

  /// v_l over a family of disjoint coalitions: v of their union.
  double level_payoff(std::span<const PointSet> coalitions) const {
    return (*this)(set_union(coalitions));
  }

  [[nodiscard]] std::uint64_t evaluation_count() const noexcept {
    return evaluations_.load(std::memory_order_relaxed);
  }
  void reset_evaluation_count() noexcept { evaluations_.store(0, std::memory_order_relaxed); }

 private:
  void prepare_unit_vectors() {
    const std::size_t n = embedding_->n(), d = embedding_->d();
    unit_.assign(n * d, 0.0);
    has_norm_.assign(n, false);
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = embedding_->vectors.row(i);
      double nn = 0.0;
      for (float v : row) nn += static_cast<double>(v) * v;
      if (nn <= 0.0) continue;
      has_norm_[i] = true;
      const double inv = 1.0 / std::sqrt(nn);
      for (std::size_t k = 0; k < d; ++k) unit_[i * d + k] = row[k] * inv;
    }
  }

  std::shared_ptr<const LabeledDataset> data_;
  std::shared_ptr<const EmbeddingMatrix> embedding_;
  UtilityConfig config_;
  std::shared_ptr<PayoffCache> cache_;
  std::vector<double> unit_;
  std::vector<bool> has_norm_;
  mutable std::atomic<std::uint64_t> evaluations_{0};
};

/// Any set function usable as a payoff: callable on a PointSet.
template <typename F>
concept SetPayoff = requires(const F& f, const PointSet& s) {
  { f(s) } -> std::convertible_to<double>;
};

/// Memo + counter around an arbitrary set function, for hand-built games.
template <typename F>
class MemoizedPayoff {
 public:
  explicit MemoizedPayoff(F fn) : fn_(std::move(fn)), cache_(std::make_shared<PayoffCache>()) {}

  double operator()(const PointSet& s) const {
    const SetKey key = fingerprint(s);
    double v = 0.0;
    if (cache_->lookup(key, v)) return v;
    v = static_cast<double>(fn_(s));
    if (cache_->insert(key, v)) evaluations_.fetch_add(1, std::memory_order_relaxed);
    return v;
  }

  [[nodiscard]] std::uint64_t evaluation_count() const noexcept {
    return evaluations_.load(std::memory_order_relaxed);
  }
  void reset_evaluation_count() noexcept { evaluations_.store(0, std::memory_order_relaxed); }
  void clear_cache() { cache_->clear(); }

 private:
  F fn_;
  std::shared_ptr<PayoffCache> cache_;
  mutable std::atomic<std::uint64_t> evaluations_{0};
};

template <typename F>
concept CountingPayoff = SetPayoff<F> && requires(const F& f) {
  { f.evaluation_count() } -> std::convertible_to<std::uint64_t>;
};

template <typename F>
std::uint64_t evaluation_count_of(const F& f) {
  if constexpr (CountingPayoff<F>) return f.evaluation_count();
  else return 0;
}

}  // namespace hcdv

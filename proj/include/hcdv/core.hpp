#pragma once

// Shared domain types: matrices, datasets, point sets, value vectors and
// keyed random streams.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace hcdv {

/// Raised for data, configuration and numerical failures that callers are
/// expected to report rather than recover from.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Index = std::uint32_t;

/// Dense row-major matrix.
template <typename T>
class BasicMatrix {
 public:
  BasicMatrix() = default;
  BasicMatrix(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  BasicMatrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw std::invalid_argument("matrix data size does not match shape");
    }
  }

  [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
  [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
  [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

  [[nodiscard]] std::span<T> row(std::size_t r) {
    return {data_.data() + r * cols_, cols_};
  }
  [[nodiscard]] std::span<const T> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }
  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }

  [[nodiscard]] const std::vector<T>& data() const noexcept { return data_; }
  [[nodiscard]] std::vector<T>& data() noexcept { return data_; }

  void append_row(std::span<const T> values) {
    if (rows_ == 0 && cols_ == 0) cols_ = values.size();
    if (values.size() != cols_) {
      throw std::invalid_argument("appended row has wrong width");
    }
    data_.insert(data_.end(), values.begin(), values.end());
    ++rows_;
  }

  friend bool operator==(const BasicMatrix&, const BasicMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Matrix = BasicMatrix<double>;

/// Sorted, duplicate-free set of dataset-local point indices.
class PointSet {
 public:
  PointSet() = default;
  PointSet(std::initializer_list<Index> items)
      : PointSet(std::vector<Index>(items)) {}
  explicit PointSet(std::vector<Index> items) : items_(std::move(items)) {
    std::sort(items_.begin(), items_.end());
    items_.erase(std::unique(items_.begin(), items_.end()), items_.end());
  }

  /// Contiguous range [0, n).
  static PointSet range(std::size_t n) {
    std::vector<Index> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<Index>(i);
    return from_sorted(std::move(v));
  }

  /// Adopts an already sorted, deduplicated list. Throws if the order is broken.
  static PointSet from_sorted(std::vector<Index> items) {
    for (std::size_t i = 1; i < items.size(); ++i) {
      if (items[i - 1] >= items[i]) {
        throw std::invalid_argument("PointSet::from_sorted: indices not strictly increasing");
      }
    }
    PointSet s;
    s.items_ = std::move(items);
    return s;
  }

  [[nodiscard]] std::size_t size() const noexcept { return items_.size(); }
  [[nodiscard]] bool empty() const noexcept { return items_.empty(); }
  [[nodiscard]] auto begin() const noexcept { return items_.begin(); }
  [[nodiscard]] auto end() const noexcept { return items_.end(); }
  [[nodiscard]] Index operator[](std::size_t i) const { return items_[i]; }
  [[nodiscard]] std::span<const Index> indices() const noexcept { return items_; }

  [[nodiscard]] bool contains(Index i) const {
    return std::binary_search(items_.begin(), items_.end(), i);
  }

  /// Every index is below `n`.
  [[nodiscard]] bool valid_for(std::size_t n) const {
    return items_.empty() || items_.back() < n;
  }

  friend bool operator==(const PointSet&, const PointSet&) = default;
  friend auto operator<=>(const PointSet&, const PointSet&) = default;

 private:
  std::vector<Index> items_;
};

/// Sorted deduplicated union of any number of point sets.
inline PointSet set_union(std::span<const PointSet> sets) {
  std::size_t total = 0;
  for (const auto& s : sets) total += s.size();
  std::vector<Index> merged;
  merged.reserve(total);
  for (const auto& s : sets) merged.insert(merged.end(), s.begin(), s.end());
  return PointSet(std::move(merged));
}

inline PointSet set_union(std::initializer_list<PointSet> sets) {
  return set_union(std::span<const PointSet>(sets.begin(), sets.size()));
}

/// 128-bit fingerprint of a point set, used as the payoff memo key.
struct SetKey {
  std::uint64_t hi = 0;
  std::uint64_t lo = 0;
  friend bool operator==(const SetKey&, const SetKey&) = default;
};

struct SetKeyHash {
  std::size_t operator()(const SetKey& k) const noexcept {
    return static_cast<std::size_t>(k.hi ^ (k.lo * 0x9e3779b97f4a7c15ULL));
  }
};

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline SetKey fingerprint(std::span<const Index> sorted) {
  std::uint64_t a = 0x243f6a8885a308d3ULL ^ sorted.size();
  std::uint64_t b = 0x13198a2e03707344ULL + sorted.size() * 0x9e3779b97f4a7c15ULL;
  for (Index i : sorted) {
    a = splitmix64(a ^ i);
    b = splitmix64(b + (static_cast<std::uint64_t>(i) << 1 | 1ULL)) ^ (b >> 17);
  }
  return {a, b};
}

inline SetKey fingerprint(const PointSet& s) { return fingerprint(s.indices()); }

/// What a random stream is used for; part of the stream key.
enum class Purpose : std::uint64_t {
  split = 1,
  encoder_init,
  encoder_batches,
  encoder_probe,
  kmeans,
  level_game,
  global_game,
  leaf_game,
  node_refresh,
  baseline,
  random_values,
  synthetic,
  noise,
  trial,
  check,
};

struct StreamKey {
  Purpose purpose = Purpose::trial;
  std::uint64_t node = 0;
  std::uint64_t epoch = 0;
  friend bool operator==(const StreamKey&, const StreamKey&) = default;
};

/// Deterministic random stream derived from (root seed, key). Two streams
/// with the same seed and key produce identical draws on every platform:
/// only the engine is taken from <random>, the transforms are local.
class RngStream {
 public:
  RngStream(std::uint64_t root_seed, StreamKey key)
      : root_seed_(root_seed), key_(key), engine_(derive(root_seed, key)) {}

  explicit RngStream(std::uint64_t root_seed)
      : RngStream(root_seed, StreamKey{}) {}

  [[nodiscard]] std::uint64_t root_seed() const noexcept { return root_seed_; }
  [[nodiscard]] StreamKey key() const noexcept { return key_; }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, bound), unbiased.
  std::uint64_t below(std::uint64_t bound) {
    if (bound == 0) throw std::invalid_argument("RngStream::below(0)");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % bound;
  }

  /// Standard normal via Box-Muller.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  /// Seed for a derived child stream; keeps permutation logs replayable.
  static std::uint64_t derive(std::uint64_t root_seed, StreamKey key) noexcept {
    std::uint64_t h = splitmix64(root_seed ^ 0x6a09e667f3bcc909ULL);
    h = splitmix64(h ^ static_cast<std::uint64_t>(key.purpose));
    h = splitmix64(h ^ key.node);
    h = splitmix64(h ^ (key.epoch * 0x3c6ef372fe94f82bULL));
    return h;
  }

 private:
  std::uint64_t root_seed_;
  StreamKey key_;
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Uniformly random permutation of [0, k) drawn from its own seed.
inline std::vector<std::size_t> permutation_from_seed(std::uint64_t seed, std::size_t k) {
  std::vector<std::size_t> perm(k);
  for (std::size_t i = 0; i < k; ++i) perm[i] = i;
  RngStream rng(seed);
  rng.shuffle(perm);
  return perm;
}

/// Point-level valuation with provenance.
struct ValueVector {
  std::vector<double> values;
  std::string method_tag;
  std::uint64_t seed = 0;
  std::int64_t permutations_T = 0;
  std::int64_t wallclock_ms = 0;

  [[nodiscard]] std::size_t size() const noexcept { return values.size(); }

  [[nodiscard]] double sum() const {
    double s = 0.0;
    for (double v : values) s += v;
    return s;
  }

  void validate(std::size_t n) const {
    if (values.size() != n) {
      throw Error("value vector has " + std::to_string(values.size()) +
                  " entries, dataset has " + std::to_string(n));
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (std::isnan(values[i])) {
        throw Error("value vector entry " + std::to_string(i) + " is NaN");
      }
    }
  }
};

/// Features and labels with a frozen validation split. Training features are
/// standardised with training-split statistics, which are kept so that rows
/// arriving later can be mapped into the same space.
struct LabeledDataset {
  Matrix features;
  std::vector<int> labels;
  Matrix val_features;
  std::vector<int> val_labels;
  int num_classes = 0;
  std::vector<double> feature_mean;
  std::vector<double> feature_scale;

  [[nodiscard]] std::size_t n() const noexcept { return labels.size(); }
  [[nodiscard]] std::size_t dim() const noexcept { return features.cols(); }

  [[nodiscard]] std::vector<double> standardise(std::span<const double> raw) const {
    std::vector<double> out(raw.size());
    for (std::size_t c = 0; c < raw.size(); ++c) {
      out[c] = (raw[c] - feature_mean[c]) / feature_scale[c];
    }
    return out;
  }

  [[nodiscard]] PointSet all_points() const { return PointSet::range(n()); }

  /// Count of validation rows per class.
  [[nodiscard]] std::vector<std::size_t> val_class_counts() const {
    std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes), 0);
    for (int y : val_labels) ++counts[static_cast<std::size_t>(y)];
    return counts;
  }

  void validate() const {
    if (n() == 0) throw Error("dataset has no training rows");
    if (num_classes < 2) throw Error("dataset needs at least two classes");
    if (features.rows() != labels.size() || val_features.rows() != val_labels.size()) {
      throw Error("feature/label row counts disagree");
    }
    for (int y : labels) {
      if (y < 0 || y >= num_classes) throw Error("label out of range: " + std::to_string(y));
    }
    for (int y : val_labels) {
      if (y < 0 || y >= num_classes) throw Error("label out of range: " + std::to_string(y));
    }
    for (double v : features.data()) {
      if (!std::isfinite(v)) throw Error("non-finite feature value after ingestion");
    }
  }
};

}  // namespace hcdv

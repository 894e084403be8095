#pragma once

// Linear contrastive encoder trained by finite-difference stochastic ascent on
// the batch objective  M(S) + lambda * dispersion(S) - alpha * Omega_FD.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hcdv/core.hpp"
#include "hcdv/embedding.hpp"
#include "hcdv/utility.hpp"

namespace hcdv {

struct EncoderConfig {
  std::size_t d = 2;
  double lambda = 1.0;
  double alpha = 0.1;
  int epochs = 20;
  std::size_t batch_size = 64;
  std::size_t partners_per_anchor = 3;
  double fd_step = 1e-2;
  int fd_draws = 1;
  double lr = 0.05;
  std::uint64_t seed = 0;
  /// Step for the central differences taken over parameters.
  double param_step = 1e-3;
  std::size_t val_subsample = 256;
  /// Gradient norm cap per update.
  double grad_clip = 10.0;
  /// Step halvings tried when an update lowers the batch objective.
  int backtrack = 4;

  void validate(std::size_t input_dim) const {
    if (d == 0) throw Error("encoder dimension d must be positive");
    if (fd_step <= 0.0) throw Error("fd_step epsilon must be positive");
    if (batch_size < 2) throw Error("batch_size must be at least 2");
    if (fd_draws < 1) throw Error("fd_draws must be at least 1");
    if (lr <= 0.0) throw Error("lr must be positive");
    if (lambda < 0.0 || alpha < 0.0) throw Error("lambda and alpha must be non-negative");
    if (epochs < 0) throw Error("epochs must be non-negative");
    if (param_step <= 0.0) throw Error("param_step must be positive");
    if (d * input_dim > 4096) {
      throw Error("encoder has " + std::to_string(d * input_dim) +
                  " parameters; finite-difference training is capped at 4096");
    }
  }
};

/// z = W x with W stored row-major as d x D.
struct LinearEncoder {
  std::size_t d = 0;
  std::size_t input_dim = 0;
  std::vector<double> weights;

  [[nodiscard]] std::size_t parameter_count() const noexcept { return weights.size(); }

  void apply(std::span<const double> x, std::span<double> z) const {
    for (std::size_t r = 0; r < d; ++r) {
      const double* w = weights.data() + r * input_dim;
      double s = 0.0;
      for (std::size_t k = 0; k < input_dim; ++k) s += w[k] * x[k];
      z[r] = s;
    }
  }

  [[nodiscard]] std::vector<double> apply(std::span<const double> x) const {
    std::vector<double> z(d);
    apply(x, z);
    return z;
  }

  [[nodiscard]] EmbeddingMatrix embed(const Matrix& x) const {
    EmbeddingMatrix e;
    e.source = EmbeddingSource::trained_linear;
    e.vectors = BasicMatrix<float>(x.rows(), d);
    std::vector<double> z(d);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      apply(x.row(i), z);
      for (std::size_t r = 0; r < d; ++r) e.vectors(i, r) = static_cast<float>(z[r]);
    }
    return e;
  }

  /// Seeded Gaussian initialisation scaled by 1/sqrt(D).
  static LinearEncoder random(std::size_t d, std::size_t input_dim, std::uint64_t seed) {
    LinearEncoder enc{d, input_dim, std::vector<double>(d * input_dim)};
    RngStream rng(seed, {Purpose::encoder_init, 0, 0});
    const double scale = 1.0 / std::sqrt(static_cast<double>(input_dim));
    for (double& w : enc.weights) w = rng.normal() * scale;
    return enc;
  }
};

/// Central differences of a scalar function of a parameter vector.
inline std::vector<double> finite_difference_gradient(
    const std::function<double(std::span<const double>)>& f, std::span<const double> theta,
    double step) {
  std::vector<double> probe(theta.begin(), theta.end());
  std::vector<double> grad(theta.size());
  for (std::size_t k = 0; k < theta.size(); ++k) {
    probe[k] = theta[k] + step;
    const double up = f(probe);
    probe[k] = theta[k] - step;
    const double down = f(probe);
    probe[k] = theta[k];
    grad[k] = (up - down) / (2.0 * step);
  }
  return grad;
}

/// Cross-label pairs and input directions for one batch's smoothness term.
/// Drawn once per batch so that every parameter probe sees the same sample.
struct SmoothnessProbes {
  std::vector<std::pair<Index, Index>> pairs;
  std::vector<std::vector<double>> directions;  // fd_draws per pair, flattened in order
};

inline SmoothnessProbes draw_smoothness_probes(const LabeledDataset& data, const PointSet& batch,
                                               const EncoderConfig& cfg, RngStream& rng) {
  SmoothnessProbes probes;
  for (Index p : batch) {
    std::vector<Index> partners;
    for (Index q : batch) {
      if (data.labels[q] != data.labels[p]) partners.push_back(q);
    }
    if (partners.empty()) continue;
    for (std::size_t t = 0; t < cfg.partners_per_anchor; ++t) {
      probes.pairs.emplace_back(p, partners[rng.below(partners.size())]);
    }
  }
  const std::size_t D = data.dim();
  for (std::size_t k = 0; k < probes.pairs.size() * static_cast<std::size_t>(cfg.fd_draws); ++k) {
    std::vector<double> r(D);
    double nn = 0.0;
    do {
      nn = 0.0;
      for (double& v : r) {
        v = rng.normal();
        nn += v * v;
      }
    } while (nn <= 0.0);
    for (double& v : r) v /= std::sqrt(nn);
    probes.directions.push_back(std::move(r));
  }
  return probes;
}

/// Per-column range of the training features; perturbed inputs are clamped to it.
struct FeatureRange {
  std::vector<double> lo, hi;

  static FeatureRange of(const Matrix& x) {
    FeatureRange fr{std::vector<double>(x.cols(), std::numeric_limits<double>::infinity()),
                    std::vector<double>(x.cols(), -std::numeric_limits<double>::infinity())};
    for (std::size_t i = 0; i < x.rows(); ++i) {
      for (std::size_t c = 0; c < x.cols(); ++c) {
        fr.lo[c] = std::min(fr.lo[c], x(i, c));
        fr.hi[c] = std::max(fr.hi[c], x(i, c));
      }
    }
    return fr;
  }
};

/// Omega_FD: mean of (Delta_pq(r) / eps)^2 over the probe pairs and directions.
inline double smoothness_penalty(const LabeledDataset& data, const LinearEncoder& enc,
                                 const SmoothnessProbes& probes, double eps,
                                 const FeatureRange& range) {
  if (probes.pairs.empty()) return 0.0;
  const std::size_t draws = probes.directions.size() / probes.pairs.size();
  std::vector<double> zp(enc.d), zq(enc.d), zpp(enc.d), xp(data.dim());
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t k = 0; k < probes.pairs.size(); ++k) {
    const auto [p, q] = probes.pairs[k];
    enc.apply(data.features.row(p), zp);
    enc.apply(data.features.row(q), zq);
    const double base = cosine_distance<double>(zp, zq);
    for (std::size_t t = 0; t < draws; ++t) {
      const auto& r = probes.directions[k * draws + t];
      const auto row = data.features.row(p);
      for (std::size_t c = 0; c < xp.size(); ++c) {
        xp[c] = std::clamp(row[c] + eps * r[c], range.lo[c], range.hi[c]);
      }
      enc.apply(xp, zpp);
      const double delta = cosine_distance<double>(zpp, zq) - base;
      total += (delta / eps) * (delta / eps);
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

/// Everything the batch objective needs besides the parameters.
struct EncoderObjective {
  const LabeledDataset* data = nullptr;
  std::vector<Index> val_rows;
  FeatureRange range;
  EncoderConfig cfg;

  EncoderObjective(const LabeledDataset& d, const EncoderConfig& c)
      : data(&d), range(FeatureRange::of(d.features)), cfg(c) {
    std::vector<Index> all(d.val_labels.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<Index>(i);
    if (all.size() > cfg.val_subsample) {
      RngStream rng(cfg.seed, {Purpose::encoder_probe, 1, 0});
      rng.shuffle(all);
      all.resize(cfg.val_subsample);
      std::sort(all.begin(), all.end());
    }
    val_rows = std::move(all);
  }

  /// Nearest-centroid accuracy in embedding space: centroids from the batch,
  /// scored on the fixed validation subsample.
  [[nodiscard]] double batch_utility(const LinearEncoder& enc, const PointSet& batch) const {
    Matrix zb(batch.size(), enc.d);
    std::vector<int> yb(batch.size());
    std::vector<Index> rows(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      enc.apply(data->features.row(batch[i]), zb.row(i));
      yb[i] = data->labels[batch[i]];
      rows[i] = static_cast<Index>(i);
    }
    const auto model = fit_nearest_centroid(zb, yb, rows, data->num_classes);
    std::vector<double> z(enc.d);
    std::size_t hit = 0;
    for (Index v : val_rows) {
      enc.apply(data->val_features.row(v), z);
      hit += model.predict(z) == data->val_labels[v];
    }
    return static_cast<double>(hit) / static_cast<double>(val_rows.size());
  }

  /// Mean cross-label cosine distance of the embedded batch.
  [[nodiscard]] double batch_dispersion(const LinearEncoder& enc, const PointSet& batch) const {
    std::vector<std::vector<double>> z(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) z[i] = enc.apply(data->features.row(batch[i]));
    double total = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      for (std::size_t j = i + 1; j < batch.size(); ++j) {
        if (data->labels[batch[i]] == data->labels[batch[j]]) continue;
        total += cosine_distance<double>(z[i], z[j]);
        ++pairs;
      }
    }
    return pairs == 0 ? 0.0 : total / static_cast<double>(pairs);
  }

  [[nodiscard]] double operator()(const LinearEncoder& enc, const PointSet& batch,
                                  const SmoothnessProbes& probes) const {
    double j = batch_utility(enc, batch);
    if (cfg.lambda > 0.0) j += cfg.lambda * batch_dispersion(enc, batch);
    if (cfg.alpha > 0.0) j -= cfg.alpha * smoothness_penalty(*data, enc, probes, cfg.fd_step, range);
    return j;
  }
};

struct TrainedEncoder {
  LinearEncoder encoder;
  EmbeddingMatrix embeddings;
  /// Batch objective averaged over the final epoch's batches, at the initial
  /// parameters and at the final parameters.
  double initial_objective = 0.0;
  double final_objective = 0.0;
  std::vector<double> epoch_objectives;
};

inline std::vector<PointSet> epoch_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                           std::uint64_t epoch) {
  std::vector<Index> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<Index>(i);
  RngStream rng(seed, {Purpose::encoder_batches, 0, epoch});
  rng.shuffle(order);
  std::vector<PointSet> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    if (end - start < 2) break;
    batches.emplace_back(std::vector<Index>(order.begin() + static_cast<std::ptrdiff_t>(start),
                                            order.begin() + static_cast<std::ptrdiff_t>(end)));
  }
  return batches;
}

inline TrainedEncoder train_linear_encoder(const LabeledDataset& data, const EncoderConfig& cfg) {
  cfg.validate(data.dim());
  TrainedEncoder out;
  out.encoder = LinearEncoder::random(cfg.d, data.dim(), cfg.seed);
  const LinearEncoder initial = out.encoder;
  const EncoderObjective objective(data, cfg);
  auto probes_for = [&](const PointSet& batch, std::uint64_t epoch, std::size_t b) {
    RngStream rng(cfg.seed, {Purpose::encoder_probe, b + 2, epoch});
    return draw_smoothness_probes(data, batch, cfg, rng);
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto batches = epoch_batches(data.n(), cfg.batch_size, cfg.seed, static_cast<std::uint64_t>(epoch));
    double epoch_sum = 0.0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto probes = probes_for(batches[b], static_cast<std::uint64_t>(epoch), b);
      auto f = [&](std::span<const double> theta) {
        LinearEncoder e{cfg.d, data.dim(), std::vector<double>(theta.begin(), theta.end())};
        return objective(e, batches[b], probes);
      };
      const double current = f(out.encoder.weights);
      if (!std::isfinite(current)) {
        throw Error("encoder objective is non-finite at epoch " + std::to_string(epoch) +
                    ", batch " + std::to_string(b));
      }
      epoch_sum += current;
      auto grad = finite_difference_gradient(f, out.encoder.weights, cfg.param_step);
      double gn = 0.0;
      for (double g : grad) {
        if (!std::isfinite(g)) {
          throw Error("encoder gradient is non-finite at epoch " + std::to_string(epoch) +
                      ", batch " + std::to_string(b));
        }
        gn += g * g;
      }
      gn = std::sqrt(gn);
      if (gn == 0.0) continue;
      const double scale = gn > cfg.grad_clip ? cfg.grad_clip / gn : 1.0;
      double step = cfg.lr * scale;
      for (int attempt = 0; attempt <= cfg.backtrack; ++attempt, step *= 0.5) {
        std::vector<double> trial(out.encoder.weights);
        for (std::size_t k = 0; k < trial.size(); ++k) trial[k] += step * grad[k];
        if (f(trial) >= current) {
          out.encoder.weights = std::move(trial);
          break;
        }
      }
    }
    out.epoch_objectives.push_back(batches.empty() ? 0.0 : epoch_sum / static_cast<double>(batches.size()));
  }

  const std::uint64_t last = cfg.epochs > 0 ? static_cast<std::uint64_t>(cfg.epochs - 1) : 0;
  const auto batches = epoch_batches(data.n(), cfg.batch_size, cfg.seed, last);
  double init_sum = 0.0, final_sum = 0.0;
  for (std::size_t b = 0; b < batches.size(); ++b) {
    const auto probes = probes_for(batches[b], last, b);
    init_sum += objective(initial, batches[b], probes);
    final_sum += objective(out.encoder, batches[b], probes);
  }
  if (!batches.empty()) {
    out.initial_objective = init_sum / static_cast<double>(batches.size());
    out.final_objective = final_sum / static_cast<double>(batches.size());
  }
  out.embeddings = out.encoder.embed(data.features);
  return out;
}

}  // namespace hcdv

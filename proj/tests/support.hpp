#pragma once

#include <memory>
#include <vector>

#include "hcdv/core.hpp"
#include "hcdv/embedding.hpp"

namespace hcdv::testing {

/// Dataset built from literal rows, used as-is (no standardisation).
inline LabeledDataset literal_dataset(const std::vector<std::vector<double>>& rows, std::vector<int> labels,
                                      const std::vector<std::vector<double>>& val_rows, std::vector<int> val_labels,
                                      int num_classes = 2) {
  LabeledDataset d;
  for (const auto& r : rows) d.features.append_row(r);
  for (const auto& r : val_rows) d.val_features.append_row(r);
  d.labels = std::move(labels);
  d.val_labels = std::move(val_labels);
  d.num_classes = num_classes;
  d.feature_mean.assign(d.features.cols(), 0.0);
  d.feature_scale.assign(d.features.cols(), 1.0);
  d.validate();
  return d;
}

inline EmbeddingMatrix literal_embedding(const std::vector<std::vector<float>>& rows) {
  EmbeddingMatrix e;
  e.source = EmbeddingSource::precomputed;
  for (const auto& r : rows) e.vectors.append_row(r);
  return e;
}

inline std::vector<Index> random_subset(RngStream& rng, std::size_t n, double keep) {
  std::vector<Index> v;
  for (std::size_t i = 0; i < n; ++i) {
    if (rng.uniform() < keep) v.push_back(static_cast<Index>(i));
  }
  return v;
}

}  // namespace hcdv::testing

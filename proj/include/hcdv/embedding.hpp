#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include "hcdv/core.hpp"
#include "hcdv/dataset.hpp"

namespace hcdv {

enum class EmbeddingSource { precomputed, identity, trained_linear };

inline const char* to_string(EmbeddingSource s) {
  switch (s) {
    case EmbeddingSource::precomputed: return "precomputed";
    case EmbeddingSource::identity: return "identity";
    case EmbeddingSource::trained_linear: return "trained_linear";
  }
  return "?";
}

/// Per-point embedding vectors z_i, stored at f32 precision so that the
/// on-disk format round-trips bit-exactly.
struct EmbeddingMatrix {
  BasicMatrix<float> vectors;
  EmbeddingSource source = EmbeddingSource::identity;

  [[nodiscard]] std::size_t n() const noexcept { return vectors.rows(); }
  [[nodiscard]] std::size_t d() const noexcept { return vectors.cols(); }

  void validate(std::size_t expected_rows) const {
    if (n() != expected_rows) {
      throw Error("embedding has " + std::to_string(n()) + " rows, expected " +
                  std::to_string(expected_rows));
    }
    for (std::size_t i = 0; i < vectors.data().size(); ++i) {
      if (std::isnan(vectors.data()[i])) {
        throw Error("embedding row " + std::to_string(i / d()) + " contains NaN");
      }
    }
  }
};

inline EmbeddingMatrix identity_embedding(const Matrix& features) {
  EmbeddingMatrix e;
  e.source = EmbeddingSource::identity;
  e.vectors = BasicMatrix<float>(features.rows(), features.cols());
  for (std::size_t i = 0; i < features.data().size(); ++i) {
    e.vectors.data()[i] = static_cast<float>(features.data()[i]);
  }
  return e;
}

inline void save_embeddings(const std::filesystem::path& path, const EmbeddingMatrix& emb) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  write_f32_matrix(out, emb.n(), emb.d(), emb.vectors.data());
}

/// Reads an embedding file; `expected_rows` is the dataset size it must match.
inline EmbeddingMatrix load_embeddings(const std::filesystem::path& path, std::size_t expected_rows) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::size_t rows = 0, cols = 0;
  auto values = read_f32_matrix(in, rows, cols);
  if (rows != expected_rows) {
    throw Error("embedding file " + path.string() + ": expected " + std::to_string(expected_rows) +
                " rows, found " + std::to_string(rows));
  }
  if (cols == 0) throw Error("embedding file " + path.string() + " has zero columns");
  EmbeddingMatrix e;
  e.source = EmbeddingSource::precomputed;
  e.vectors = BasicMatrix<float>(rows, cols, std::move(values));
  e.validate(expected_rows);
  return e;
}

}  // namespace hcdv

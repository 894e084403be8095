#pragma once

// Dataset ingestion: CSV and little-endian binary tables, the stratified
// deterministic train/validation split, and train-statistics standardisation.

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "hcdv/core.hpp"

namespace hcdv {

/// Unsplit rows as read from a file: features plus an integer label per row.
struct RawTable {
  Matrix features;
  std::vector<int> labels;

  [[nodiscard]] std::size_t rows() const noexcept { return labels.size(); }
};

enum class TableFormat { csv, binary };

inline TableFormat parse_table_format(std::string_view s) {
  if (s == "csv") return TableFormat::csv;
  if (s == "binary" || s == "bin") return TableFormat::binary;
  throw Error("unknown table format: " + std::string(s));
}

inline TableFormat guess_table_format(const std::filesystem::path& p) {
  const auto ext = p.extension().string();
  return (ext == ".bin" || ext == ".f32") ? TableFormat::binary : TableFormat::csv;
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == ',') {
      out.push_back(trim(line.substr(start, i - start)));
      start = i + 1;
    }
  }
  return out;
}

inline bool parse_double(std::string_view s, double& out) {
  if (s.empty()) return false;
  // from_chars rejects a leading '+'.
  if (s.front() == '+') s.remove_prefix(1);
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  if (res.ec == std::errc() && res.ptr == s.data() + s.size()) return true;
  const std::string lowered = [&] {
    std::string t(s);
    for (auto& ch : t) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    return t;
  }();
  if (lowered == "nan" || lowered == "-nan") {
    out = std::numeric_limits<double>::quiet_NaN();
    return true;
  }
  if (lowered == "inf" || lowered == "-inf" || lowered == "infinity" || lowered == "-infinity") {
    out = lowered.front() == '-' ? -std::numeric_limits<double>::infinity()
                                 : std::numeric_limits<double>::infinity();
    return true;
  }
  return false;
}

inline bool parse_int(std::string_view s, int& out) {
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  if (res.ec == std::errc() && res.ptr == s.data() + s.size()) return true;
  double d = 0;
  if (parse_double(s, d) && std::isfinite(d) && d == std::floor(d) &&
      std::abs(d) < 2147483647.0) {
    out = static_cast<int>(d);
    return true;
  }
  return false;
}

template <typename T>
void write_le(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(value);
    std::reverse(bytes.begin(), bytes.end());
    os.write(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
  } else {
    os.write(reinterpret_cast<const char*>(&value), sizeof(T));
  }
}

template <typename T>
T read_le(std::istream& is, const std::string& what) {
  std::array<unsigned char, sizeof(T)> bytes{};
  if (!is.read(reinterpret_cast<char*>(bytes.data()), sizeof(T))) {
    throw Error("truncated binary file while reading " + what);
  }
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(bytes.begin(), bytes.end());
  }
  return std::bit_cast<T>(bytes);
}

}  // namespace detail

/// Parses CSV text. The header row is optional (detected by a non-numeric
/// first field); the last column is the integer label. NaN or Inf cells are
/// rejected with the 1-based data row and column.
inline RawTable parse_csv_table(std::string_view text) {
  RawTable table;
  std::size_t line_no = 0;
  std::size_t data_row = 0;
  std::size_t width = 0;
  bool first = true;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = detail::trim(text.substr(pos, nl - pos));
    pos = nl + 1;
    ++line_no;
    if (line.empty() || line.front() == '#') {
      if (nl == text.size()) break;
      continue;
    }
    const auto fields = detail::split_fields(line);
    if (first) {
      first = false;
      double probe = 0;
      if (!detail::parse_double(fields.front(), probe)) continue;  // header
    }
    if (fields.size() < 2) {
      throw Error("csv line " + std::to_string(line_no) + ": need at least one feature and a label");
    }
    if (width == 0) width = fields.size();
    if (fields.size() != width) {
      throw Error("csv line " + std::to_string(line_no) + ": expected " + std::to_string(width) +
                  " fields, found " + std::to_string(fields.size()));
    }
    std::vector<double> row(width - 1);
    for (std::size_t c = 0; c + 1 < width; ++c) {
      if (!detail::parse_double(fields[c], row[c])) {
        throw Error("csv row " + std::to_string(data_row + 1) + ", column " + std::to_string(c + 1) +
                    ": cannot parse '" + std::string(fields[c]) + "'");
      }
      if (!std::isfinite(row[c])) {
        throw Error("csv row " + std::to_string(data_row + 1) + ", column " + std::to_string(c + 1) +
                    ": non-finite value");
      }
    }
    int label = 0;
    if (!detail::parse_int(fields.back(), label)) {
      throw Error("csv row " + std::to_string(data_row + 1) + ", column " + std::to_string(width) +
                  ": label '" + std::string(fields.back()) + "' is not an integer");
    }
    if (label < 0) {
      throw Error("csv row " + std::to_string(data_row + 1) + ": negative label");
    }
    table.features.append_row(row);
    table.labels.push_back(label);
    ++data_row;
    if (nl == text.size()) break;
  }
  if (table.rows() == 0) throw Error("csv contains no data rows");
  return table;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline RawTable read_csv_table(const std::filesystem::path& path) {
  return parse_csv_table(read_text_file(path));
}

inline void write_csv_table(const std::filesystem::path& path, const RawTable& table) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << std::setprecision(17);
  for (std::size_t c = 0; c < table.features.cols(); ++c) out << 'x' << c << ',';
  out << "label\n";
  for (std::size_t r = 0; r < table.rows(); ++r) {
    for (double v : table.features.row(r)) out << v << ',';
    out << table.labels[r] << '\n';
  }
}

/// Little-endian f32 matrix with a (u32 rows, u32 cols) header.
inline void write_f32_matrix(std::ostream& os, std::size_t rows, std::size_t cols,
                             std::span<const float> values) {
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(rows));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(cols));
  for (float v : values) detail::write_le<float>(os, v);
}

inline std::vector<float> read_f32_matrix(std::istream& is, std::size_t& rows, std::size_t& cols) {
  rows = detail::read_le<std::uint32_t>(is, "header");
  cols = detail::read_le<std::uint32_t>(is, "header");
  std::vector<float> values(rows * cols);
  for (auto& v : values) v = detail::read_le<float>(is, "matrix body");
  return values;
}

inline void write_binary_table(const std::filesystem::path& path, const RawTable& table) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  std::vector<float> values(table.features.data().begin(), table.features.data().end());
  write_f32_matrix(out, table.rows(), table.features.cols(), values);
  for (int y : table.labels) detail::write_le<std::int32_t>(out, y);
}

inline RawTable read_binary_table(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::size_t rows = 0, cols = 0;
  const auto values = read_f32_matrix(in, rows, cols);
  RawTable table;
  table.features = Matrix(rows, cols);
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw Error("binary row " + std::to_string(i / cols + 1) + ", column " +
                  std::to_string(i % cols + 1) + ": non-finite value");
    }
    table.features.data()[i] = values[i];
  }
  table.labels.resize(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    table.labels[r] = detail::read_le<std::int32_t>(in, "labels");
    if (table.labels[r] < 0) throw Error("binary row " + std::to_string(r + 1) + ": negative label");
  }
  if (rows == 0) throw Error("binary table has no rows");
  return table;
}

inline RawTable read_table(const std::filesystem::path& path, TableFormat format) {
  return format == TableFormat::csv ? read_csv_table(path) : read_binary_table(path);
}

/// Stratified deterministic split: each class contributes round(fraction *
/// count) rows to validation, keeping at least one row on each side for any
/// class with two or more rows. Standardisation uses training statistics.
inline LabeledDataset split_dataset(const RawTable& table, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw Error("val_fraction must lie in (0, 1)");
  }
  int num_classes = 0;
  for (int y : table.labels) num_classes = std::max(num_classes, y + 1);
  std::vector<std::vector<Index>> by_class(static_cast<std::size_t>(num_classes));
  for (std::size_t r = 0; r < table.rows(); ++r) {
    by_class[static_cast<std::size_t>(table.labels[r])].push_back(static_cast<Index>(r));
  }
  RngStream rng(seed, {Purpose::split, 0, 0});
  std::vector<Index> train_rows, val_rows;
  for (auto& rows : by_class) {
    rng.shuffle(rows);
    auto take = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(rows.size())));
    if (rows.size() >= 2) take = std::clamp<std::size_t>(take, 1, rows.size() - 1);
    else take = std::min(take, rows.size());
    val_rows.insert(val_rows.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(take));
    train_rows.insert(train_rows.end(), rows.begin() + static_cast<std::ptrdiff_t>(take), rows.end());
  }
  std::sort(train_rows.begin(), train_rows.end());
  std::sort(val_rows.begin(), val_rows.end());

  auto class_count = [&](const std::vector<Index>& rows) {
    std::vector<bool> seen(static_cast<std::size_t>(num_classes), false);
    for (Index r : rows) seen[static_cast<std::size_t>(table.labels[r])] = true;
    return std::count(seen.begin(), seen.end(), true);
  };
  if (class_count(train_rows) < 2 || class_count(val_rows) < 2) {
    throw Error("split leaves fewer than two classes in the training or validation part");
  }

  const std::size_t dim = table.features.cols();
  LabeledDataset ds;
  ds.num_classes = num_classes;
  ds.feature_mean.assign(dim, 0.0);
  ds.feature_scale.assign(dim, 1.0);
  for (Index r : train_rows) {
    for (std::size_t c = 0; c < dim; ++c) ds.feature_mean[c] += table.features(r, c);
  }
  for (auto& m : ds.feature_mean) m /= static_cast<double>(train_rows.size());
  if (train_rows.size() > 1) {
    std::vector<double> var(dim, 0.0);
    for (Index r : train_rows) {
      for (std::size_t c = 0; c < dim; ++c) {
        const double d = table.features(r, c) - ds.feature_mean[c];
        var[c] += d * d;
      }
    }
    for (std::size_t c = 0; c < dim; ++c) {
      const double sd = std::sqrt(var[c] / static_cast<double>(train_rows.size()));
      ds.feature_scale[c] = sd > 1e-12 ? sd : 1.0;
    }
  }
  ds.features = Matrix(0, dim);
  ds.val_features = Matrix(0, dim);
  for (Index r : train_rows) {
    ds.features.append_row(ds.standardise(table.features.row(r)));
    ds.labels.push_back(table.labels[r]);
  }
  for (Index r : val_rows) {
    ds.val_features.append_row(ds.standardise(table.features.row(r)));
    ds.val_labels.push_back(table.labels[r]);
  }
  ds.validate();
  return ds;
}

inline LabeledDataset load_dataset(const std::filesystem::path& path, TableFormat format,
                                   double val_fraction, std::uint64_t seed) {
  return split_dataset(read_table(path, format), val_fraction, seed);
}

}  // namespace hcdv

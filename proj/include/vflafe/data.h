//
// Copyright 2026 The vflafe Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//

#ifndef VFLAFE_DATA_H_
#define VFLAFE_DATA_H_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "vflafe/numerics.h"

namespace vflafe {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Encoded feature table with labels and a train/test tag per row.
struct Table {
  struct ColumnGroup {
    std::string name;
    std::size_t begin = 0;  // encoded column range [begin, end)
    std::size_t end = 0;
  };

  Matrix features;
  std::vector<int> labels;
  std::vector<bool> is_train;
  std::vector<std::size_t> ids;
  std::vector<std::string> feature_names;
  std::vector<ColumnGroup> groups;
  std::vector<std::string> label_names;
  std::size_t image_rows = 0;  // nonzero for image tables
  std::size_t image_cols = 0;

  std::size_t rows() const { return features.rows(); }
  std::size_t num_classes() const { return label_names.size(); }
};

// ---------------------------------------------------------------------------
// CSV

struct CsvDocument {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> line_numbers;  // 1-based source line of each row
};

namespace internal {

inline std::string Trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// One record of the RFC-4180 subset: quoted fields with "" escapes, no
// embedded newlines.
inline std::vector<std::string> SplitCsvLine(const std::string& line,
                                             std::size_t line_number) {
  std::vector<std::string> fields;
  std::string field;
  bool quoted = false;
  bool was_quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field.push_back(ch);
      }
    } else if (ch == '"') {
      if (!Trim(field).empty()) {
        throw DataError("line " + std::to_string(line_number) +
                        ": stray quote inside unquoted field");
      }
      field.clear();
      quoted = true;
      was_quoted = true;
    } else if (ch == ',') {
      fields.push_back(was_quoted ? field : Trim(field));
      field.clear();
      was_quoted = false;
    } else {
      field.push_back(ch);
    }
  }
  if (quoted) {
    throw DataError("line " + std::to_string(line_number) + ": unterminated quote");
  }
  fields.push_back(was_quoted ? field : Trim(field));
  return fields;
}

}  // namespace internal

inline CsvDocument ParseCsv(std::istream& in) {
  CsvDocument doc;
  std::string line;
  std::size_t line_number = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (internal::Trim(line).empty()) continue;
    auto fields = internal::SplitCsvLine(line, line_number);
    if (!have_header) {
      doc.header = std::move(fields);
      have_header = true;
      continue;
    }
    if (fields.size() != doc.header.size()) {
      throw DataError("line " + std::to_string(line_number) + ": expected " +
                      std::to_string(doc.header.size()) + " fields, found " +
                      std::to_string(fields.size()));
    }
    doc.rows.push_back(std::move(fields));
    doc.line_numbers.push_back(line_number);
  }
  if (!have_header) throw DataError("CSV input has no header row");
  return doc;
}

enum class ColumnKind { kNumeric, kCategorical, kLabel };

struct CsvColumn {
  std::string name;
  ColumnKind kind = ColumnKind::kNumeric;
};

// Columns absent from the schema are ignored. Exactly one label column.
struct CsvSchema {
  std::vector<CsvColumn> columns;
};

// Holds out `test_fraction` of the rows (seeded shuffle), fits min-max
// scaling and category vocabularies on the remaining train rows, and encodes
// every row. Numeric columns map to [0, 1] on train data; categorical columns
// become one-hot blocks, with unseen test categories encoded as all zeros.
inline Table EncodeCsv(const CsvDocument& doc, const CsvSchema& schema,
                       double test_fraction = 0.0, std::uint64_t seed = 0) {
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) {
    throw std::invalid_argument("EncodeCsv: test_fraction must be in [0, 1)");
  }
  std::vector<std::size_t> source(schema.columns.size());
  std::size_t label_slot = schema.columns.size();
  for (std::size_t s = 0; s < schema.columns.size(); ++s) {
    const auto it = std::find(doc.header.begin(), doc.header.end(), schema.columns[s].name);
    if (it == doc.header.end()) {
      throw DataError("missing column '" + schema.columns[s].name + "'");
    }
    source[s] = static_cast<std::size_t>(it - doc.header.begin());
    if (schema.columns[s].kind == ColumnKind::kLabel) {
      if (label_slot != schema.columns.size()) throw DataError("schema has two label columns");
      label_slot = s;
    }
  }
  if (label_slot == schema.columns.size()) throw DataError("schema has no label column");

  const std::size_t n = doc.rows.size();
  std::vector<bool> is_train(n, true);
  const auto test_count = static_cast<std::size_t>(test_fraction * static_cast<double>(n));
  if (test_count > 0) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed, 0x637376);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.UniformInt(i)]);
    for (std::size_t i = 0; i < test_count; ++i) is_train[order[i]] = false;
  }

  auto parse_number = [&](std::size_t row, std::size_t col) {
    const std::string& cell = doc.rows[row][col];
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(cell, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != cell.size() || !std::isfinite(v)) {
      throw DataError("line " + std::to_string(doc.line_numbers[row]) + ", column '" +
                      doc.header[col] + "': '" + cell + "' is not numeric");
    }
    return v;
  };

  Table table;
  struct Encoder {
    ColumnKind kind;
    std::size_t col;
    double min = 0.0, max = 0.0;
    std::map<std::string, std::size_t> vocabulary;
  };
  std::vector<Encoder> encoders;
  std::size_t width = 0;
  for (std::size_t s = 0; s < schema.columns.size(); ++s) {
    if (s == label_slot) continue;
    Encoder e;
    e.kind = schema.columns[s].kind;
    e.col = source[s];
    Table::ColumnGroup group{schema.columns[s].name, width, width};
    if (e.kind == ColumnKind::kNumeric) {
      bool first = true;
      for (std::size_t r = 0; r < n; ++r) {
        const double v = parse_number(r, e.col);  // validates every row
        if (!is_train[r]) continue;
        e.min = first ? v : std::min(e.min, v);
        e.max = first ? v : std::max(e.max, v);
        first = false;
      }
      table.feature_names.push_back(schema.columns[s].name);
      width += 1;
    } else {
      std::set<std::string> seen;
      for (std::size_t r = 0; r < n; ++r)
        if (is_train[r]) seen.insert(doc.rows[r][e.col]);
      for (const std::string& v : seen) {
        e.vocabulary.emplace(v, e.vocabulary.size());
        table.feature_names.push_back(schema.columns[s].name + "=" + v);
      }
      width += seen.size();
    }
    group.end = width;
    table.groups.push_back(group);
    encoders.push_back(std::move(e));
  }

  std::set<std::string> label_values;
  for (std::size_t r = 0; r < n; ++r) label_values.insert(doc.rows[r][source[label_slot]]);
  table.label_names.assign(label_values.begin(), label_values.end());
  std::map<std::string, int> label_ids;
  for (std::size_t i = 0; i < table.label_names.size(); ++i)
    label_ids[table.label_names[i]] = static_cast<int>(i);

  table.features = Matrix(n, width);
  table.labels.resize(n);
  table.ids.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t offset = 0;
    for (const Encoder& e : encoders) {
      if (e.kind == ColumnKind::kNumeric) {
        const double v = parse_number(r, e.col);
        const double range = e.max - e.min;
        table.features(r, offset) = range > 0.0 ? (v - e.min) / range : 0.0;
        offset += 1;
      } else {
        const auto it = e.vocabulary.find(doc.rows[r][e.col]);
        if (it != e.vocabulary.end()) table.features(r, offset + it->second) = 1.0;
        offset += e.vocabulary.size();
      }
    }
    table.labels[r] = label_ids.at(doc.rows[r][source[label_slot]]);
    table.ids[r] = r;
  }
  table.is_train = std::move(is_train);
  return table;
}

inline Table LoadCsv(const std::filesystem::path& path, const CsvSchema& schema,
                     double test_fraction = 0.0, std::uint64_t seed = 0) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open CSV file " + path.string());
  try {
    return EncodeCsv(ParseCsv(in), schema, test_fraction, seed);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// IDX

namespace internal {

inline std::vector<std::uint8_t> ReadBytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t BigEndianU32(std::span<const std::uint8_t> b, std::size_t at) {
  return (static_cast<std::uint32_t>(b[at]) << 24) |
         (static_cast<std::uint32_t>(b[at + 1]) << 16) |
         (static_cast<std::uint32_t>(b[at + 2]) << 8) | static_cast<std::uint32_t>(b[at + 3]);
}

}  // namespace internal

constexpr std::uint32_t kIdxImageMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

// Images (u8, n x rows x cols) and labels (u8, n) in IDX format; pixels are
// scaled by 1/255 and flattened row-major. Every row is tagged train.
inline Table ParseIdx(std::span<const std::uint8_t> images,
                      std::span<const std::uint8_t> labels) {
  if (images.size() < 16) throw DataError("IDX images: truncated header");
  if (const auto magic = internal::BigEndianU32(images, 0); magic != kIdxImageMagic) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "IDX images: unsupported magic 0x%08X", magic);
    throw DataError(buf);
  }
  if (labels.size() < 8) throw DataError("IDX labels: truncated header");
  if (const auto magic = internal::BigEndianU32(labels, 0); magic != kIdxLabelMagic) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "IDX labels: unsupported magic 0x%08X", magic);
    throw DataError(buf);
  }
  const std::size_t n = internal::BigEndianU32(images, 4);
  const std::size_t rows = internal::BigEndianU32(images, 8);
  const std::size_t cols = internal::BigEndianU32(images, 12);
  const std::size_t label_count = internal::BigEndianU32(labels, 4);
  if (n != label_count) {
    throw DataError("IDX count mismatch: " + std::to_string(n) + " images, " +
                    std::to_string(label_count) + " labels");
  }
  const std::size_t pixels = rows * cols;
  if (images.size() - 16 < n * pixels) throw DataError("IDX images: truncated payload");
  if (labels.size() - 8 < n) throw DataError("IDX labels: truncated payload");

  Table table;
  table.image_rows = rows;
  table.image_cols = cols;
  table.features = Matrix(n, pixels);
  table.labels.resize(n);
  table.ids.resize(n);
  table.is_train.assign(n, true);
  int max_label = -1;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < pixels; ++p)
      table.features(i, p) = static_cast<double>(images[16 + i * pixels + p]) / 255.0;
    table.labels[i] = labels[8 + i];
    max_label = std::max(max_label, table.labels[i]);
    table.ids[i] = i;
  }
  for (std::size_t p = 0; p < pixels; ++p)
    table.feature_names.push_back("px" + std::to_string(p));
  table.groups.push_back({"pixels", 0, pixels});
  for (int c = 0; c <= max_label; ++c) table.label_names.push_back(std::to_string(c));
  return table;
}

inline Table LoadIdx(const std::filesystem::path& images,
                     const std::filesystem::path& labels) {
  return ParseIdx(internal::ReadBytes(images), internal::ReadBytes(labels));
}

// Stacks `test` under `train`, tagging its rows as test.
inline Table AppendTestRows(Table train, const Table& test) {
  if (train.features.cols() != test.features.cols()) {
    throw DataError("train and test tables have different widths");
  }
  const std::size_t n = train.rows();
  std::vector<double> data(train.features.data().begin(), train.features.data().end());
  data.insert(data.end(), test.features.data().begin(), test.features.data().end());
  train.features = Matrix(n + test.rows(), train.features.cols(), std::move(data));
  train.labels.insert(train.labels.end(), test.labels.begin(), test.labels.end());
  train.is_train.insert(train.is_train.end(), test.rows(), false);
  for (std::size_t i = 0; i < test.rows(); ++i) train.ids.push_back(n + i);
  if (test.label_names.size() > train.label_names.size()) train.label_names = test.label_names;
  return train;
}

// ---------------------------------------------------------------------------
// Vertical partitioning

enum class ImageHalf { kLeft, kRight, kTop, kBottom };

// Feature columns owned by each passive party.
struct PartitionPlan {
  std::vector<std::vector<std::size_t>> party_columns;

  static PartitionPlan FromRanges(
      std::span<const std::pair<std::size_t, std::size_t>> ranges) {
    PartitionPlan plan;
    for (const auto& [begin, end] : ranges) {
      if (begin > end) throw DataError("partition plan: range begins after it ends");
      std::vector<std::size_t> cols(end - begin);
      std::iota(cols.begin(), cols.end(), begin);
      plan.party_columns.push_back(std::move(cols));
    }
    return plan;
  }

  static PartitionPlan FromImageHalves(std::size_t rows, std::size_t cols,
                                       std::span<const ImageHalf> halves) {
    PartitionPlan plan;
    for (ImageHalf half : halves) {
      std::vector<std::size_t> owned;
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          const bool take = (half == ImageHalf::kLeft && c < cols / 2) ||
                            (half == ImageHalf::kRight && c >= cols / 2) ||
                            (half == ImageHalf::kTop && r < rows / 2) ||
                            (half == ImageHalf::kBottom && r >= rows / 2);
          if (take) owned.push_back(r * cols + c);
        }
      }
      plan.party_columns.push_back(std::move(owned));
    }
    return plan;
  }

  // Contiguous split of `width` columns into `parties` near-equal blocks.
  static PartitionPlan Even(std::size_t width, std::size_t parties) {
    std::vector<std::pair<std::size_t, std::size_t>> ranges;
    for (std::size_t p = 0; p < parties; ++p)
      ranges.emplace_back(p * width / parties, (p + 1) * width / parties);
    return FromRanges(ranges);
  }

  // Throws unless every column in [0, width) is owned by exactly one party.
  void Validate(std::size_t width) const {
    if (party_columns.empty()) throw DataError("partition plan: no parties");
    std::vector<int> owners(width, 0);
    for (std::size_t p = 0; p < party_columns.size(); ++p) {
      if (party_columns[p].empty()) {
        throw DataError("partition plan: party " + std::to_string(p) + " owns no columns");
      }
      for (std::size_t c : party_columns[p]) {
        if (c >= width) {
          throw DataError("partition plan: column " + std::to_string(c) + " out of range");
        }
        if (++owners[c] > 1) {
          throw DataError("partition plan: column " + std::to_string(c) +
                          " assigned more than once");
        }
      }
    }
    for (std::size_t c = 0; c < width; ++c) {
      if (owners[c] == 0) {
        throw DataError("partition plan: column " + std::to_string(c) + " is not assigned");
      }
    }
  }
};

enum class SplitTag { kTrain, kTest };

// Row j of every party matrix and of `labels` is the same sample. Labels are
// read only by the active party.
struct VerticalDataset {
  std::vector<Matrix> party_features;
  std::vector<int> labels;
  std::vector<std::size_t> ids;
  SplitTag split = SplitTag::kTrain;
  std::size_t num_classes = 0;

  std::size_t rows() const { return labels.size(); }
  std::size_t parties() const { return party_features.size(); }

  VerticalDataset Subset(std::span<const std::size_t> rows) const {
    VerticalDataset out;
    for (const Matrix& m : party_features) out.party_features.push_back(SelectRows(m, rows));
    for (std::size_t r : rows) {
      out.labels.push_back(labels.at(r));
      out.ids.push_back(ids.at(r));
    }
    out.split = split;
    out.num_classes = num_classes;
    return out;
  }
};

struct VerticalSplit {
  VerticalDataset train;
  VerticalDataset test;
};

inline VerticalDataset PartitionVertical(const Table& table, const PartitionPlan& plan,
                                         std::span<const std::size_t> rows,
                                         SplitTag split = SplitTag::kTrain) {
  plan.Validate(table.features.cols());
  const Matrix selected = SelectRows(table.features, rows);
  VerticalDataset out;
  for (const auto& cols : plan.party_columns)
    out.party_features.push_back(SelectColumns(selected, cols));
  for (std::size_t r : rows) {
    out.labels.push_back(table.labels.at(r));
    out.ids.push_back(table.ids.at(r));
  }
  out.split = split;
  out.num_classes = table.num_classes();
  return out;
}

inline VerticalDataset PartitionVertical(const Table& table, const PartitionPlan& plan) {
  std::vector<std::size_t> rows(table.rows());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return PartitionVertical(table, plan, rows);
}

inline VerticalSplit PartitionTrainTest(const Table& table, const PartitionPlan& plan) {
  std::vector<std::size_t> train, test;
  for (std::size_t r = 0; r < table.rows(); ++r)
    (table.is_train.empty() || table.is_train[r] ? train : test).push_back(r);
  return {PartitionVertical(table, plan, train, SplitTag::kTrain),
          PartitionVertical(table, plan, test, SplitTag::kTest)};
}

// ---------------------------------------------------------------------------
// Synthetic blobs

struct SyntheticSpec {
  std::size_t classes = 4;
  std::size_t per_class = 250;
  std::size_t dim = 20;
  double spread = 1.0;      // per-coordinate stddev around the class mean
  double separation = 1.0;  // class means are separation * N(0, I)
  std::size_t parties = 2;
  double test_fraction = 0.2;
  std::uint64_t seed = 1;
};

// Class means of the synthetic blobs: separation * N(0, I), seeded.
inline Matrix SyntheticMeans(const SyntheticSpec& spec) {
  Rng mean_rng(spec.seed, 0x6d65616e);
  Matrix means(spec.classes, spec.dim);
  for (double& v : means.data()) v = spec.separation * mean_rng.Normal();
  return means;
}

// Isotropic Gaussian blobs, columns split evenly across parties, rows
// shuffled and split into train/test.
inline Table MakeSyntheticTable(const SyntheticSpec& spec) {
  if (spec.classes < 2) throw std::invalid_argument("MakeSynthetic: need at least 2 classes");
  if (spec.dim < spec.parties) throw std::invalid_argument("MakeSynthetic: dim < parties");
  const Matrix means = SyntheticMeans(spec);

  const std::size_t n = spec.classes * spec.per_class;
  Rng sample_rng(spec.seed, 0x73616d70);
  Table table;
  table.features = Matrix(n, spec.dim);
  table.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % spec.classes;
    table.labels[i] = static_cast<int>(c);
    for (std::size_t j = 0; j < spec.dim; ++j)
      table.features(i, j) = means(c, j) + spec.spread * sample_rng.Normal();
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng split_rng(spec.seed, 0x73706c74);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[split_rng.UniformInt(i)]);
  const auto test_count =
      static_cast<std::size_t>(spec.test_fraction * static_cast<double>(n));
  table.is_train.assign(n, true);
  for (std::size_t i = 0; i < test_count; ++i) table.is_train[order[i]] = false;
  table.ids.resize(n);
  std::iota(table.ids.begin(), table.ids.end(), std::size_t{0});
  for (std::size_t j = 0; j < spec.dim; ++j) table.feature_names.push_back("x" + std::to_string(j));
  table.groups.push_back({"x", 0, spec.dim});
  for (std::size_t c = 0; c < spec.classes; ++c) table.label_names.push_back(std::to_string(c));
  return table;
}

inline VerticalSplit MakeSynthetic(const SyntheticSpec& spec) {
  const Table table = MakeSyntheticTable(spec);
  return PartitionTrainTest(table, PartitionPlan::Even(spec.dim, spec.parties));
}

}  // namespace vflafe

#endif  // VFLAFE_DATA_H_

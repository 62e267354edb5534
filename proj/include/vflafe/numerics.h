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

#ifndef VFLAFE_NUMERICS_H_
#define VFLAFE_NUMERICS_H_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace vflafe {

// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw std::invalid_argument("Matrix: data length " +
                                  std::to_string(data_.size()) +
                                  " does not match " + std::to_string(rows_) +
                                  "x" + std::to_string(cols_));
    }
  }

  static Matrix FromRows(
      std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    Matrix m(r, c);
    std::size_t i = 0;
    for (const auto& row : rows) {
      if (row.size() != c) {
        throw std::invalid_argument("Matrix::FromRows: ragged rows");
      }
      std::copy(row.begin(), row.end(), m.row(i++).begin());
    }
    return m;
  }

  static Matrix Identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) {
    return data_[r * cols_ + c];
  }
  double operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }

  std::span<double> row(std::size_t r) {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  bool AllFinite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  Matrix Transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
  }

  Matrix& operator+=(const Matrix& other) {
    CheckSameShape(other, "operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }
  Matrix& operator-=(const Matrix& other) {
    CheckSameShape(other, "operator-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
  }
  Matrix& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }

  friend Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
  friend Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
  friend Matrix operator*(Matrix a, double s) { return a *= s; }
  friend Matrix operator*(double s, Matrix a) { return a *= s; }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  void CheckSameShape(const Matrix& other, const char* op) const {
    if (rows_ != other.rows_ || cols_ != other.cols_) {
      throw std::invalid_argument(std::string("Matrix::") + op +
                                  ": shape mismatch");
    }
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// a * b
inline Matrix MatMul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("MatMul: inner dimensions differ (" +
                                std::to_string(a.cols()) + " vs " +
                                std::to_string(b.rows()) + ")");
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out_row = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto b_row = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aik * b_row[j];
    }
  }
  return out;
}

// a^T * b
inline Matrix MatMulTransposeA(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw std::invalid_argument("MatMulTransposeA: row counts differ");
  }
  Matrix out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto a_row = a.row(k);
    auto b_row = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a_row[i];
      if (aki == 0.0) continue;
      auto out_row = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aki * b_row[j];
    }
  }
  return out;
}

// a * b^T
inline Matrix MatMulTransposeB(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw std::invalid_argument("MatMulTransposeB: column counts differ");
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto a_row = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto b_row = b.row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a_row[k] * b_row[k];
      out(i, j) = acc;
    }
  }
  return out;
}

inline double Dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double Norm(std::span<const double> v) { return std::sqrt(Dot(v, v)); }

inline double Distance(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

inline Matrix SelectRows(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(rows.size(), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= m.rows()) {
      throw std::out_of_range("SelectRows: row " + std::to_string(rows[i]) +
                              " out of range " + std::to_string(m.rows()));
    }
    std::copy(m.row(rows[i]).begin(), m.row(rows[i]).end(),
              out.row(i).begin());
  }
  return out;
}

inline Matrix SelectColumns(const Matrix& m, std::span<const std::size_t> cols) {
  Matrix out(m.rows(), cols.size());
  for (std::size_t j = 0; j < cols.size(); ++j) {
    if (cols[j] >= m.cols()) {
      throw std::out_of_range("SelectColumns: column out of range");
    }
  }
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < cols.size(); ++j) out(i, j) = m(i, cols[j]);
  return out;
}

// Columns [begin, end).
inline Matrix ColumnSlice(const Matrix& m, std::size_t begin, std::size_t end) {
  if (begin > end || end > m.cols()) {
    throw std::out_of_range("ColumnSlice: bad range");
  }
  Matrix out(m.rows(), end - begin);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = begin; j < end; ++j) out(i, j - begin) = m(i, j);
  return out;
}

inline Matrix HorizontalConcat(std::span<const Matrix> parts) {
  if (parts.empty()) return {};
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  for (const Matrix& p : parts) {
    if (p.rows() != rows) {
      throw std::invalid_argument("HorizontalConcat: row counts differ");
    }
    cols += p.cols();
  }
  Matrix out(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    std::size_t offset = 0;
    for (const Matrix& p : parts) {
      std::copy(p.row(i).begin(), p.row(i).end(),
                out.row(i).begin() + static_cast<std::ptrdiff_t>(offset));
      offset += p.cols();
    }
  }
  return out;
}

// Counter-based generator: output i is SplitMix64's finalizer applied to
// key + i * golden-gamma. Streams are keyed, so a party can derive its own
// generator from (seed, party, purpose) without sharing state, and the raw
// 64-bit stream is identical on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
      : seed_(seed), key_(Mix(Mix(seed) ^ Mix(stream + kStreamSalt))) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t NextU64() { return Mix(key_ + (counter_++) * kGamma); }

  // Uniform in [0, 1) with 53 random bits.
  double Uniform() {
    return static_cast<double>(NextU64() >> 11) * 0x1.0p-53;
  }

  // Uniform in (0, 1).
  double UniformOpen() {
    return (static_cast<double>(NextU64() >> 11) + 0.5) * 0x1.0p-53;
  }

  // Unbiased integer in [0, n).
  std::uint64_t UniformInt(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::UniformInt: n == 0");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = NextU64();
    } while (x >= limit);
    return x % n;
  }

  // Standard normal via Box-Muller; the second variate is cached.
  double Normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = UniformOpen();
    const double u2 = Uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  // Independent generator keyed by this one's key and `stream`.
  Rng Split(std::uint64_t stream) const {
    Rng child(seed_);
    child.key_ = Mix(key_ ^ Mix(stream + kSplitSalt));
    return child;
  }

 private:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;
  static constexpr std::uint64_t kStreamSalt = 0xD1B54A32D192ED03ULL;
  static constexpr std::uint64_t kSplitSalt = 0x8CB92BA72F3D8DD7ULL;

  static std::uint64_t Mix(std::uint64_t z) {
    z += kGamma;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

inline Matrix GaussianSample(Rng& rng, double mean, double stddev,
                             std::size_t rows, std::size_t cols) {
  if (!(stddev >= 0.0)) {
    throw std::invalid_argument("GaussianSample: negative stddev");
  }
  Matrix out(rows, cols, mean);
  if (stddev == 0.0) return out;
  for (double& v : out.data()) v = mean + stddev * rng.Normal();
  return out;
}

// Inverse error function.
//
// Starts from Giles' single-precision polynomial ("Approximating the erfinv
// function", GPU Computing Gems, 2011; max relative error 3.7e-7 over
// (-1, 1)) and applies one Newton step on erf(x) - p. For |p| <= 0.999999 the
// result satisfies |erf(x) - p| < 1e-12, comfortably inside the 1e-7 bound
// the quantile estimator relies on.
inline double ErfInv(double p) {
  if (!(std::fabs(p) < 1.0)) {
    throw std::domain_error("ErfInv: |p| must be < 1, got " +
                            std::to_string(p));
  }
  if (p == 0.0) return 0.0;
  double w = -std::log((1.0 - p) * (1.0 + p));
  double q;
  if (w < 5.0) {
    w -= 2.5;
    q = 2.81022636e-08;
    q = 3.43273939e-07 + q * w;
    q = -3.5233877e-06 + q * w;
    q = -4.39150654e-06 + q * w;
    q = 0.00021858087 + q * w;
    q = -0.00125372503 + q * w;
    q = -0.00417768164 + q * w;
    q = 0.246640727 + q * w;
    q = 1.50140941 + q * w;
  } else {
    w = std::sqrt(w) - 3.0;
    q = -0.000200214257;
    q = 0.000100950558 + q * w;
    q = 0.00134934322 + q * w;
    q = -0.00367342844 + q * w;
    q = 0.00573950773 + q * w;
    q = -0.0076224613 + q * w;
    q = 0.00943887047 + q * w;
    q = 1.00167406 + q * w;
    q = 2.83297682 + q * w;
  }
  double x = q * p;
  const double derivative = 2.0 / std::sqrt(std::numbers::pi) * std::exp(-x * x);
  x -= (std::erf(x) - p) / derivative;
  return x;
}

inline double NormalCdf(double z) {
  return 0.5 * std::erfc(-z / std::numbers::sqrt2);
}

// Standard normal quantile.
inline double NormalQuantile(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    throw std::domain_error("NormalQuantile: p must be in (0, 1)");
  }
  return std::numbers::sqrt2 * ErfInv(2.0 * p - 1.0);
}

// All n(n-1)/2 Euclidean distances between rows j < k, in lexicographic
// (j, k) order.
inline std::vector<double> PairwiseDistances(const Matrix& batch) {
  if (batch.rows() < 2) {
    throw std::invalid_argument("PairwiseDistances: need at least 2 rows");
  }
  const std::size_t n = batch.rows();
  std::vector<double> out;
  out.reserve(n * (n - 1) / 2);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t k = j + 1; k < n; ++k)
      out.push_back(Distance(batch.row(j), batch.row(k)));
  return out;
}

struct SampleMoments {
  double mean = 0.0;
  double stddev = 0.0;  // (n - 1) normalization
};

inline SampleMoments MeanAndSampleStddev(std::span<const double> xs) {
  SampleMoments m;
  if (xs.empty()) return m;
  for (double x : xs) m.mean += x;
  m.mean /= static_cast<double>(xs.size());
  if (xs.size() < 2) return m;
  double ss = 0.0;
  for (double x : xs) ss += (x - m.mean) * (x - m.mean);
  m.stddev = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  return m;
}

namespace internal {

struct Eigenpair {
  double value = 0.0;
  std::vector<double> vector;
};

// Dominant eigenpair of a symmetric PSD matrix by power iteration, with the
// iterate kept orthogonal to `deflated`.
inline Eigenpair PowerIteration(const Matrix& sym,
                                std::span<const std::vector<double>> deflated) {
  const std::size_t d = sym.rows();
  std::vector<double> v(d);
  for (std::size_t i = 0; i < d; ++i) v[i] = 1.0 + 0.1 * static_cast<double>(i);
  auto orthonormalize = [&](std::vector<double>& x) {
    for (const auto& u : deflated) {
      const double proj = Dot(x, u);
      for (std::size_t i = 0; i < d; ++i) x[i] -= proj * u[i];
    }
    const double norm = Norm(x);
    if (norm == 0.0) return false;
    for (double& xi : x) xi /= norm;
    return true;
  };
  if (!orthonormalize(v)) return {};
  double lambda = 0.0;
  std::vector<double> next(d);
  for (int iter = 0; iter < 20000; ++iter) {
    for (std::size_t i = 0; i < d; ++i) next[i] = Dot(sym.row(i), v);
    if (!orthonormalize(next)) return {0.0, v};
    double diff = 0.0;
    for (std::size_t i = 0; i < d; ++i) diff += std::fabs(next[i] - v[i]);
    v.swap(next);
    if (diff < 1e-14) break;
  }
  for (std::size_t i = 0; i < d; ++i) next[i] = Dot(sym.row(i), v);
  lambda = Dot(v, next);
  return {lambda, v};
}

}  // namespace internal

// Projection of the mean-centered batch onto its top two principal
// components. Each component's sign makes its largest-magnitude loading
// positive. Components with negligible variance project to zero.
inline Matrix Pca2(const Matrix& batch) {
  if (batch.rows() < 2) {
    throw std::invalid_argument("Pca2: need at least 2 rows");
  }
  const std::size_t n = batch.rows();
  const std::size_t d = batch.cols();
  Matrix centered = batch;
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += batch(i, j);
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) centered(i, j) -= mean;
  }
  Matrix cov = MatMulTransposeA(centered, centered);
  cov *= 1.0 / static_cast<double>(n - 1);
  double trace = 0.0;
  for (std::size_t i = 0; i < d; ++i) trace += cov(i, i);

  Matrix out(n, 2);
  if (trace <= 0.0) return out;
  std::vector<std::vector<double>> found;
  double first_value = 0.0;
  for (std::size_t c = 0; c < std::min<std::size_t>(2, d); ++c) {
    internal::Eigenpair pair = internal::PowerIteration(cov, found);
    const double reference = c == 0 ? trace : first_value;
    if (pair.vector.empty() || pair.value <= 1e-12 * reference) break;
    if (c == 0) first_value = pair.value;
    std::size_t arg = 0;
    for (std::size_t i = 1; i < d; ++i)
      if (std::fabs(pair.vector[i]) > std::fabs(pair.vector[arg])) arg = i;
    if (pair.vector[arg] < 0.0)
      for (double& x : pair.vector) x = -x;
    for (std::size_t i = 0; i < n; ++i)
      out(i, c) = Dot(centered.row(i), pair.vector);
    found.push_back(std::move(pair.vector));
  }
  return out;
}

}  // namespace vflafe

#endif  // VFLAFE_NUMERICS_H_

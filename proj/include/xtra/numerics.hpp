// Copyright 2026 The xtra Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Dense row-major matrices and the kernels every trainable block is built
// from. Storage is templated on the scalar type (float in production, double
// for the finite-difference oracle); every reduction accumulates in double.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "xtra/errors.hpp"

namespace xtra {

template <class T>
class BasicMatrix {
 public:
  using value_type = T;

  BasicMatrix() = default;
  BasicMatrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, T(0)) {}
  BasicMatrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw DimensionError("matrix data length " + std::to_string(data_.size()) + " does not match " +
                           shape_string(rows_, cols_));
    }
    require_finite("matrix construction");
  }
  BasicMatrix(std::initializer_list<std::initializer_list<T>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw DimensionError("ragged matrix literal");
      data_.insert(data_.end(), r.begin(), r.end());
    }
    require_finite("matrix construction");
  }

  static BasicMatrix zeros(std::size_t rows, std::size_t cols) { return BasicMatrix(rows, cols); }
  static BasicMatrix identity(std::size_t n) {
    BasicMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
    return m;
  }
  static BasicMatrix row_vector(std::span<const T> values) {
    return BasicMatrix(1, values.size(), std::vector<T>(values.begin(), values.end()));
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  T operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  const std::vector<T>& storage() const { return data_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <class U>
  BasicMatrix<U> cast() const {
    BasicMatrix<U> out(rows_, cols_);
    std::transform(data_.begin(), data_.end(), out.data().begin(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  // Rows [begin, begin + count) as a new matrix.
  BasicMatrix slice_rows(std::size_t begin, std::size_t count) const {
    if (begin + count > rows_) throw DimensionError("row slice out of range");
    BasicMatrix out(count, cols_);
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(begin * cols_), count * cols_, out.data_.begin());
    return out;
  }

  void require_finite(const std::string& context) const {
    for (std::size_t i = 0; i < data_.size(); ++i) {
      if (!std::isfinite(static_cast<double>(data_[i]))) {
        throw NumericError(context + ": non-finite entry at (" + std::to_string(i / std::max<std::size_t>(cols_, 1)) +
                           ", " + std::to_string(i % std::max<std::size_t>(cols_, 1)) + ")");
      }
    }
  }

  std::string shape() const { return shape_string(rows_, cols_); }
  static std::string shape_string(std::size_t r, std::size_t c) {
    return std::to_string(r) + "x" + std::to_string(c);
  }

  friend bool operator==(const BasicMatrix& a, const BasicMatrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Matrix = BasicMatrix<float>;

// ---------------------------------------------------------------------------
// Random numbers. std:: distributions are implementation-defined, so the
// transforms are spelled out here to keep datasets and runs bit-reproducible.

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

  void reseed(std::uint64_t seed) {
    // splitmix64 to spread low-entropy seeds over the xoshiro state.
    std::uint64_t x = seed;
    for (auto& s : s_) {
      x += 0x9e3779b97f4a7c15ULL;
      std::uint64_t z = x;
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
      s = z ^ (z >> 31);
    }
    has_spare_ = false;
  }

  std::uint64_t next_u64() {
    // xoshiro256**
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Rejection sampling keeps it unbiased.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw ParameterError("Rng::below(0)");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  // Standard normal via Box-Muller.
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
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  template <class It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      const std::uint64_t j = below(i);
      std::iter_swap(first + static_cast<std::ptrdiff_t>(i - 1), first + static_cast<std::ptrdiff_t>(j));
    }
  }

  // Derive an independent stream, e.g. one per epoch.
  static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::uint64_t s_[4]{};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Kernels

// Dot product with f64 accumulation. Eight independent partial sums keep the
// scan throughput-bound; the summation order is fixed, so results are
// reproducible.
template <class A, class B>
inline double dot(std::span<const A> a, std::span<const B> b) {
  const std::size_t n = a.size();
  double s[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (int u = 0; u < 8; ++u) s[u] += static_cast<double>(a[i + u]) * static_cast<double>(b[i + u]);
  }
  for (; i < n; ++i) s[0] += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return ((s[0] + s[1]) + (s[2] + s[3])) + ((s[4] + s[5]) + (s[6] + s[7]));
}

inline void require_same_shape(const auto& a, const auto& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape() + " vs " + b.shape());
  }
}

// a (r x n) * b (n x c)
template <class T>
BasicMatrix<T> matmul(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: shape mismatch " + a.shape() + " x " + b.shape());
  }
  const std::size_t r = a.rows(), n = a.cols(), c = b.cols();
  BasicMatrix<T> out(r, c);
  std::vector<double> acc(c);
  const T* bp = b.data().data();
  for (std::size_t i = 0; i < r; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t k = 0; k < n; ++k) {
      const double aik = static_cast<double>(a(i, k));
      if (aik == 0.0) continue;
      const T* brow = bp + k * c;
      for (std::size_t j = 0; j < c; ++j) acc[j] += aik * static_cast<double>(brow[j]);
    }
    for (std::size_t j = 0; j < c; ++j) out(i, j) = static_cast<T>(acc[j]);
  }
  return out;
}

// a^T * b with a (n x r) and b (n x c); result (r x c).
template <class T>
BasicMatrix<T> matmul_tn(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("matmul_tn: shape mismatch " + a.shape() + "^T x " + b.shape());
  }
  const std::size_t n = a.rows(), r = a.cols(), c = b.cols();
  std::vector<double> acc(r * c, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    const auto arow = a.row(k);
    const auto brow = b.row(k);
    for (std::size_t i = 0; i < r; ++i) {
      const double aki = static_cast<double>(arow[i]);
      if (aki == 0.0) continue;
      double* dst = acc.data() + i * c;
      for (std::size_t j = 0; j < c; ++j) dst[j] += aki * static_cast<double>(brow[j]);
    }
  }
  BasicMatrix<T> out(r, c);
  for (std::size_t i = 0; i < r * c; ++i) out.data()[i] = static_cast<T>(acc[i]);
  return out;
}

// a (r x n) * b^T where b is (c x n); result (r x c).
template <class T>
BasicMatrix<T> matmul_nt(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: shape mismatch " + a.shape() + " x " + b.shape() + "^T");
  }
  BasicMatrix<T> out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.rows(); ++j) out(i, j) = static_cast<T>(dot(a.row(i), b.row(j)));
  }
  return out;
}

template <class T>
BasicMatrix<T> transpose(const BasicMatrix<T>& a) {
  BasicMatrix<T> out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

template <class T>
BasicMatrix<T> add(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  require_same_shape(a, b, "add");
  BasicMatrix<T> out = a;
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = static_cast<T>(static_cast<double>(o[i]) + static_cast<double>(bd[i]));
  return out;
}

template <class T>
void add_inplace(BasicMatrix<T>& a, const BasicMatrix<T>& b, double scale = 1.0) {
  require_same_shape(a, b, "add_inplace");
  auto o = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i)
    o[i] = static_cast<T>(static_cast<double>(o[i]) + scale * static_cast<double>(bd[i]));
}

// Adds a 1 x c row vector to every row.
template <class T>
void add_row_inplace(BasicMatrix<T>& a, const BasicMatrix<T>& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw DimensionError("add_row: shape mismatch " + a.shape() + " + " + row.shape());
  }
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto r = a.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] = static_cast<T>(static_cast<double>(r[j]) + static_cast<double>(row(0, j)));
  }
}

// Column sums as a 1 x c row.
template <class T>
BasicMatrix<T> column_sums(const BasicMatrix<T>& a) {
  std::vector<double> acc(a.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto r = a.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) acc[j] += static_cast<double>(r[j]);
  }
  BasicMatrix<T> out(1, a.cols());
  for (std::size_t j = 0; j < a.cols(); ++j) out(0, j) = static_cast<T>(acc[j]);
  return out;
}

// Horizontal concatenation [a | b].
template <class T>
BasicMatrix<T> hconcat(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  if (a.rows() != b.rows()) throw DimensionError("hconcat: row mismatch " + a.shape() + " | " + b.shape());
  BasicMatrix<T> out(a.rows(), a.cols() + b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto o = out.row(i);
    std::copy(a.row(i).begin(), a.row(i).end(), o.begin());
    std::copy(b.row(i).begin(), b.row(i).end(), o.begin() + static_cast<std::ptrdiff_t>(a.cols()));
  }
  return out;
}

// Columns [begin, begin + count).
template <class T>
BasicMatrix<T> slice_cols(const BasicMatrix<T>& a, std::size_t begin, std::size_t count) {
  if (begin + count > a.cols()) throw DimensionError("column slice out of range");
  BasicMatrix<T> out(a.rows(), count);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto src = a.row(i).subspan(begin, count);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

// Row-wise softmax of x / temperature, max-subtracted.
template <class T>
BasicMatrix<T> softmax_rows(const BasicMatrix<T>& x, double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ParameterError("softmax_rows: temperature must be positive, got " + std::to_string(temperature));
  }
  BasicMatrix<T> out(x.rows(), x.cols());
  std::vector<double> e(x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = x.row(i);
    double mx = -std::numeric_limits<double>::infinity();
    for (auto v : r) mx = std::max(mx, static_cast<double>(v) / temperature);
    double sum = 0.0;
    for (std::size_t j = 0; j < r.size(); ++j) {
      e[j] = std::exp(static_cast<double>(r[j]) / temperature - mx);
      sum += e[j];
    }
    for (std::size_t j = 0; j < r.size(); ++j) out(i, j) = static_cast<T>(e[j] / sum);
  }
  return out;
}

// Numerically stable log(sum(exp(v))).
inline double log_sum_exp(std::span<const double> v) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : v) mx = std::max(mx, x);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

// Normalizes one row to zero mean / unit variance, then applies gain and bias.
template <class T>
std::vector<T> layer_norm_row(std::span<const T> x, std::span<const T> gain, std::span<const T> bias, double eps) {
  if (gain.size() != x.size() || bias.size() != x.size()) {
    throw DimensionError("layer_norm_row: length mismatch " + std::to_string(x.size()) + " vs gain " +
                         std::to_string(gain.size()) + ", bias " + std::to_string(bias.size()));
  }
  if (!(eps > 0.0)) throw ParameterError("layer_norm_row: eps must be positive");
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (auto v : x) mean += static_cast<double>(v);
  mean /= n;
  double var = 0.0;
  for (auto v : x) var += (static_cast<double>(v) - mean) * (static_cast<double>(v) - mean);
  var /= n;
  const double inv_std = 1.0 / std::sqrt(var + eps);
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = static_cast<T>(static_cast<double>(gain[i]) * (static_cast<double>(x[i]) - mean) * inv_std +
                            static_cast<double>(bias[i]));
  }
  return out;
}

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// log(1 + e^z) without overflow.
inline double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

template <class T>
BasicMatrix<T> sigmoid(const BasicMatrix<T>& logits) {
  BasicMatrix<T> out(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.size(); ++i) out.data()[i] = static_cast<T>(sigmoid(static_cast<double>(logits.data()[i])));
  return out;
}

template <class T>
struct LossAndGrad {
  double loss = 0.0;
  BasicMatrix<T> grad;
};

inline constexpr double kProbabilityClamp = 1e-7;

// Mean element-wise binary cross-entropy on probabilities clamped to
// [1e-7, 1 - 1e-7]; grad is dL/dp.
template <class T>
LossAndGrad<T> binary_cross_entropy(const BasicMatrix<T>& probabilities, const BasicMatrix<T>& targets) {
  require_same_shape(probabilities, targets, "binary_cross_entropy");
  if (probabilities.empty()) throw DimensionError("binary_cross_entropy: empty input");
  const double n = static_cast<double>(probabilities.size());
  LossAndGrad<T> r{0.0, BasicMatrix<T>(probabilities.rows(), probabilities.cols())};
  double sum = 0.0;
  for (std::size_t i = 0; i < probabilities.size(); ++i) {
    const double raw = static_cast<double>(probabilities.data()[i]);
    const double p = std::clamp(raw, kProbabilityClamp, 1.0 - kProbabilityClamp);
    const double y = static_cast<double>(targets.data()[i]);
    sum += -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
    const bool clamped = raw < kProbabilityClamp || raw > 1.0 - kProbabilityClamp;
    r.grad.data()[i] = clamped ? T(0) : static_cast<T>((p - y) / (p * (1.0 - p)) / n);
  }
  r.loss = sum / n;
  return r;
}

// Same loss taken on logits: mean of y*softplus(-z) + (1-y)*softplus(z).
// grad is dL/dz = (sigmoid(z) - y) / n.
template <class T>
LossAndGrad<T> bce_with_logits(const BasicMatrix<T>& logits, const BasicMatrix<T>& targets) {
  require_same_shape(logits, targets, "bce_with_logits");
  if (logits.empty()) throw DimensionError("bce_with_logits: empty input");
  const double n = static_cast<double>(logits.size());
  LossAndGrad<T> r{0.0, BasicMatrix<T>(logits.rows(), logits.cols())};
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = static_cast<double>(logits.data()[i]);
    const double y = static_cast<double>(targets.data()[i]);
    sum += y * softplus(-z) + (1.0 - y) * softplus(z);
    r.grad.data()[i] = static_cast<T>((sigmoid(z) - y) / n);
  }
  r.loss = sum / n;
  return r;
}

template <class T>
BasicMatrix<T> relu(const BasicMatrix<T>& x) {
  BasicMatrix<T> out = x;
  for (auto& v : out.data()) v = v > T(0) ? v : T(0);
  return out;
}

// dL/dx given dL/dy and the pre-activation x.
template <class T>
BasicMatrix<T> relu_backward(const BasicMatrix<T>& pre, const BasicMatrix<T>& grad_out) {
  require_same_shape(pre, grad_out, "relu_backward");
  BasicMatrix<T> out = grad_out;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (!(pre.data()[i] > T(0))) out.data()[i] = T(0);
  return out;
}

// Row-wise L2 normalization. norms receives each row's original norm.
template <class T>
BasicMatrix<T> l2_normalize_rows(const BasicMatrix<T>& x, std::vector<double>* norms = nullptr) {
  BasicMatrix<T> out(x.rows(), x.cols());
  if (norms) norms->assign(x.rows(), 0.0);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double nrm = std::sqrt(dot(x.row(i), x.row(i)));
    if (!(nrm > 0.0)) throw NumericError("l2_normalize_rows: zero-norm row " + std::to_string(i));
    if (norms) (*norms)[i] = nrm;
    for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = static_cast<T>(static_cast<double>(x(i, j)) / nrm);
  }
  return out;
}

// Backward of y = x / |x| per row: dx = (dy - y (y . dy)) / |x|.
template <class T>
BasicMatrix<T> l2_normalize_rows_backward(const BasicMatrix<T>& y, const std::vector<double>& norms,
                                          const BasicMatrix<T>& grad_out) {
  require_same_shape(y, grad_out, "l2_normalize_rows_backward");
  BasicMatrix<T> out(y.rows(), y.cols());
  for (std::size_t i = 0; i < y.rows(); ++i) {
    const double proj = dot(y.row(i), grad_out.row(i));
    for (std::size_t j = 0; j < y.cols(); ++j) {
      out(i, j) = static_cast<T>((static_cast<double>(grad_out(i, j)) - static_cast<double>(y(i, j)) * proj) / norms[i]);
    }
  }
  return out;
}

inline double l2_norm(std::span<const float> v) { return std::sqrt(dot(v, v)); }

}  // namespace xtra

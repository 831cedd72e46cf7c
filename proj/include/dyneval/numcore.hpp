#pragma once

// Dense row-major linear algebra, nonlinearities and a counter-based RNG.
// Everything here is deterministic: no threads, no global state.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "dyneval/error.hpp"

namespace dyneval {

template <typename T>
class Tensor2 {
 public:
  Tensor2() = default;
  Tensor2(std::size_t rows, std::size_t cols, T fill = T(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Tensor2(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("Tensor2: data length " + std::to_string(data_.size()) +
                       " != " + std::to_string(rows_) + "x" +
                       std::to_string(cols_));
    }
  }
  Tensor2(std::initializer_list<std::initializer_list<T>> rows) {
    rows_ = rows.size();
    cols_ = rows_ ? rows.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeError("Tensor2: ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool operator==(const Tensor2&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

template <typename T>
bool all_finite(std::span<const T> v) {
  for (T x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

namespace kernels {

// Eight independent partial sums so the compiler can keep the loop in vector
// registers without reassociating a single accumulator.
template <typename T>
T reduce8(const T* acc) {
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) +
         ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
  }
  T s = reduce8(acc);
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

// The kernels below process four output rows at a time so that each row of
// the shared operand is loaded once per block. Every output element sees the
// same sequence of operations whether or not its row falls in a full block.

// C(m x n) += A(m x k) * B(k x n)
template <typename T>
void gemm_acc(std::size_t m, std::size_t k, std::size_t n, const T* __restrict a,
              const T* __restrict b, T* __restrict c) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    T* c0 = c + i * n;
    T* c1 = c0 + n;
    T* c2 = c1 + n;
    T* c3 = c2 + n;
    for (std::size_t p = 0; p < k; ++p) {
      const T a0 = a[i * k + p];
      const T a1 = a[(i + 1) * k + p];
      const T a2 = a[(i + 2) * k + p];
      const T a3 = a[(i + 3) * k + p];
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const T bv = bp[j];
        c0[j] += a0 * bv;
        c1[j] += a1 * bv;
        c2[j] += a2 * bv;
        c3[j] += a3 * bv;
      }
    }
  }
  for (; i < m; ++i) {
    T* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C(m x n) += A(k x m)^T * B(k x n)
template <typename T>
void gemm_tn_acc(std::size_t k, std::size_t m, std::size_t n, const T* __restrict a,
                 const T* __restrict b, T* __restrict c) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    T* c0 = c + i * n;
    T* c1 = c0 + n;
    T* c2 = c1 + n;
    T* c3 = c2 + n;
    for (std::size_t p = 0; p < k; ++p) {
      const T* ap = a + p * m + i;
      const T a0 = ap[0], a1 = ap[1], a2 = ap[2], a3 = ap[3];
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const T bv = bp[j];
        c0[j] += a0 * bv;
        c1[j] += a1 * bv;
        c2[j] += a2 * bv;
        c3[j] += a3 * bv;
      }
    }
  }
  for (; i < m; ++i) {
    T* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[p * m + i];
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C(m x n) = A(m x k) * B(n x k)^T. For several rows of A, B is transposed once
// into scratch space so the product runs through the streaming gemm_acc loop.
template <typename T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* __restrict a,
             const T* __restrict b, T* __restrict c) {
  if (m < 4) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) c[i * n + j] = dot(a + i * k, b + j * k, k);
    }
    return;
  }
  thread_local std::vector<T> bt;
  bt.resize(k * n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  }
  std::fill(c, c + m * n, T(0));
  gemm_acc(m, k, n, a, bt.data(), c);
}

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

// Numerically stable softmax of one row. The normalizer is accumulated in
// double so float rows still sum to one within a few ulps.
template <typename T>
void softmax_inplace(T* row, std::size_t n) {
  T mx = row[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
  double sum = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    row[j] = std::exp(row[j] - mx);
    sum += static_cast<double>(row[j]);
  }
  for (std::size_t j = 0; j < n; ++j) {
    row[j] = static_cast<T>(static_cast<double>(row[j]) / sum);
  }
}

}  // namespace kernels

template <typename T>
Tensor2<T> matmul(const Tensor2<T>& a, const Tensor2<T>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " * " +
                     std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  Tensor2<T> c(a.rows(), b.cols());
  kernels::gemm_acc(a.rows(), a.cols(), b.cols(), a.data(), b.data(), c.data());
  return c;
}

template <typename T>
Tensor2<T> softmax_rows(const Tensor2<T>& m) {
  Tensor2<T> out = m;
  if (m.cols() == 0) return out;
  for (std::size_t r = 0; r < m.rows(); ++r) {
    kernels::softmax_inplace(out.row(r).data(), m.cols());
  }
  return out;
}

// Counter-based generator: draw i is a pure function of (seed, i), so two
// generators with the same seed agree on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64() {
    ++counter_;
    return mix(seed_ + counter_ * 0x9E3779B97F4A7C15ULL);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::size_t below(std::size_t n) {
    return static_cast<std::size_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Independent stream derived from this generator's seed.
  Rng split(std::uint64_t stream) const {
    return Rng(mix(seed_ ^ mix(stream + 0x632BE59BD9B4E019ULL)));
  }

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

template <typename T>
std::size_t categorical_sample(std::span<const T> p, Rng& rng) {
  if (p.empty()) throw ValidationError("categorical_sample: empty distribution");
  double sum = 0.0;
  for (T v : p) {
    if (!(v >= T(0))) {
      throw ValidationError("categorical_sample: negative or NaN probability");
    }
    sum += static_cast<double>(v);
  }
  if (std::abs(sum - 1.0) > 1e-6) {
    throw ValidationError("categorical_sample: probabilities sum to " +
                          std::to_string(sum));
  }
  const double u = rng.uniform() * sum;
  double cum = 0.0;
  std::size_t last_nonzero = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > T(0)) last_nonzero = i;
    cum += static_cast<double>(p[i]);
    if (u < cum && p[i] > T(0)) return i;
  }
  return last_nonzero;
}

}  // namespace dyneval

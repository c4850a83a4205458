/* Copyright 2026 The qzlm Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#pragma once

// Dense row-major matrices with the handful of kernels the model needs, plus
// an operation-count instrumentation mode that serves as the ground-truth
// FLOPs oracle. No sparse formats: the whole point of structured pruning is
// that matrices stay dense, only smaller.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <sstream>
#include <vector>

#include "qzlm/common.hpp"

namespace qzlm {

// Multiplications and additions attributed to dense kernels. Subtractions
// count as additions; activation-function evaluations and embedding lookups
// are not counted. flops = multiplications + additions.
struct OpCounter {
  std::uint64_t multiplications = 0;
  std::uint64_t additions = 0;

  std::uint64_t flops() const { return multiplications + additions; }

  // The conventional dense product count for (rows x inner) * (inner x cols).
  void count_matmul(std::size_t rows, std::size_t cols, std::size_t inner) {
    multiplications += static_cast<std::uint64_t>(rows) * cols * inner;
    if (inner > 0) {
      additions += static_cast<std::uint64_t>(rows) * cols * (inner - 1);
    }
  }
};

template <typename T>
class Matrix {
 public:
  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), data_(rows * cols, T{0}) {}

  Matrix(std::size_t rows, std::size_t cols, std::initializer_list<T> values)
      : rows_(rows), cols_(cols), data_(values) {
    if (data_.size() != rows * cols) {
      throw shape_error("Matrix initializer has " + std::to_string(data_.size()) +
                        " entries for a " + shape_string() + " matrix");
    }
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  const T& operator()(std::size_t i, std::size_t j) const {
    return data_[i * cols_ + j];
  }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  std::span<T> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const T> row(std::size_t i) const {
    return {data_.data() + i * cols_, cols_};
  }

  std::span<T> flat() { return {data_.data(), data_.size()}; }
  std::span<const T> flat() const { return {data_.data(), data_.size()}; }

  std::vector<T> col_vector(std::size_t j) const {
    std::vector<T> out(rows_);
    for (std::size_t i = 0; i < rows_; ++i) out[i] = (*this)(i, j);
    return out;
  }

  void set_col(std::size_t j, std::span<const T> v) {
    for (std::size_t i = 0; i < rows_; ++i) (*this)(i, j) = v[i];
  }

  bool same_shape(const Matrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  std::string shape_string() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

  template <typename U>
  Matrix<U> cast() const {
    Matrix<U> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) {
      out.data()[i] = static_cast<U>(data_[i]);
    }
    return out;
  }

  bool operator==(const Matrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_ && data_ == other.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

namespace detail {

template <typename T>
void require_same_shape(const Matrix<T>& a, const Matrix<T>& b, const char* op) {
  if (!a.same_shape(b)) {
    throw shape_error(std::string(op) + ": shape mismatch " + a.shape_string() +
                      " vs " + b.shape_string());
  }
}

}  // namespace detail

// C = A * B. The counter, when given, records the conventional count for the
// product's shape; results are bit-identical with or without it.
template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b, OpCounter* counter = nullptr) {
  if (a.cols() != b.rows()) {
    throw shape_error("matmul: inner dimensions disagree, " + a.shape_string() +
                      " times " + b.shape_string());
  }
  Matrix<T> out(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    T* out_row = out.data() + i * n;
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const T aik = a(i, k);
      const T* b_row = b.data() + k * n;
      for (std::size_t j = 0; j < n; ++j) {
        out_row[j] += aik * b_row[j];
      }
    }
  }
  if (counter != nullptr) {
    counter->count_matmul(a.rows(), b.cols(), a.cols());
  }
  return out;
}

// A^T * B without materializing the transpose (backward-pass helper).
template <typename T>
Matrix<T> matmul_tn(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.rows() != b.rows()) {
    throw shape_error("matmul_tn: leading dimensions disagree, " +
                      a.shape_string() + " vs " + b.shape_string());
  }
  Matrix<T> out(a.cols(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const T* a_row = a.data() + k * a.cols();
    const T* b_row = b.data() + k * n;
    for (std::size_t i = 0; i < a.cols(); ++i) {
      T* out_row = out.data() + i * n;
      const T aki = a_row[i];
      for (std::size_t j = 0; j < n; ++j) {
        out_row[j] += aki * b_row[j];
      }
    }
  }
  return out;
}

// A * B^T without materializing the transpose (backward-pass helper).
template <typename T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.cols()) {
    throw shape_error("matmul_nt: trailing dimensions disagree, " +
                      a.shape_string() + " vs " + b.shape_string());
  }
  Matrix<T> out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const T* a_row = a.data() + i * a.cols();
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const T* b_row = b.data() + j * b.cols();
      T acc{0};
      for (std::size_t k = 0; k < a.cols(); ++k) {
        acc += a_row[k] * b_row[k];
      }
      out(i, j) = acc;
    }
  }
  return out;
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= T{0}) {
    return T{1} / (T{1} + std::exp(-x));
  }
  T e = std::exp(x);
  return e / (T{1} + e);
}

template <typename T>
Matrix<T> sigmoid(const Matrix<T>& m) {
  Matrix<T> out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.size(); ++i) {
    out.data()[i] = sigmoid_scalar(m.data()[i]);
  }
  return out;
}

template <typename T>
Matrix<T> tanh(const Matrix<T>& m) {
  Matrix<T> out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.size(); ++i) {
    out.data()[i] = std::tanh(m.data()[i]);
  }
  return out;
}

template <typename T>
Matrix<T> hadamard(const Matrix<T>& a, const Matrix<T>& b, OpCounter* counter = nullptr) {
  detail::require_same_shape(a, b, "hadamard");
  Matrix<T> out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) {
    out.data()[i] = a.data()[i] * b.data()[i];
  }
  if (counter != nullptr) counter->multiplications += a.size();
  return out;
}

template <typename T>
Matrix<T> add(const Matrix<T>& a, const Matrix<T>& b, OpCounter* counter = nullptr) {
  detail::require_same_shape(a, b, "add");
  Matrix<T> out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) {
    out.data()[i] = a.data()[i] + b.data()[i];
  }
  if (counter != nullptr) counter->additions += a.size();
  return out;
}

template <typename T>
Matrix<T> sub(const Matrix<T>& a, const Matrix<T>& b, OpCounter* counter = nullptr) {
  detail::require_same_shape(a, b, "sub");
  Matrix<T> out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) {
    out.data()[i] = a.data()[i] - b.data()[i];
  }
  if (counter != nullptr) counter->additions += a.size();
  return out;
}

// Max-subtracted log-softmax; exp of the result sums to 1.
template <typename T>
std::vector<T> log_softmax(std::span<const T> logits) {
  if (logits.empty()) {
    throw shape_error("log_softmax: empty input");
  }
  T mx = *std::max_element(logits.begin(), logits.end());
  T sum{0};
  for (T v : logits) sum += std::exp(v - mx);
  T lse = mx + std::log(sum);
  std::vector<T> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

template <typename T>
std::vector<T> softmax(std::span<const T> logits) {
  std::vector<T> out = log_softmax(logits);
  for (T& v : out) v = std::exp(v);
  return out;
}

template <typename T>
T cross_entropy(std::span<const T> logits, std::size_t target) {
  if (logits.empty()) {
    throw shape_error("cross_entropy: empty logits");
  }
  if (target >= logits.size()) {
    throw shape_error("cross_entropy: target " + std::to_string(target) +
                      " out of range for " + std::to_string(logits.size()) +
                      " logits");
  }
  // -log_softmax[target] without materializing the whole vector.
  T mx = *std::max_element(logits.begin(), logits.end());
  T sum{0};
  for (T v : logits) sum += std::exp(v - mx);
  return mx + std::log(sum) - logits[target];
}

template <typename T>
bool all_finite(const Matrix<T>& m) {
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (!std::isfinite(m.data()[i])) return false;
  }
  return true;
}

}  // namespace qzlm

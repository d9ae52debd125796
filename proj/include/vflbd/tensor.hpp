#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <vector>

#include "vflbd/error.hpp"

namespace vflbd {

// Dense row-major matrix. Batches are stored one sample per row.
template <typename T>
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    require(data_.size() == rows * cols, ErrorKind::Contract, "matrix storage size mismatch");
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool operator==(const Matrix& o) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

// Gathers the listed rows into a new matrix (in the given order).
template <typename T>
Matrix<T> gather_rows(const Matrix<T>& m, std::span<const std::size_t> idx) {
  Matrix<T> out(idx.size(), m.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    auto src = m.row(idx[r]);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return out;
}

template <typename To, typename From>
Matrix<To> cast_matrix(const Matrix<From>& m) {
  Matrix<To> out(m.rows(), m.cols());
  std::transform(m.storage().begin(), m.storage().end(), out.storage().begin(),
                 [](From v) { return static_cast<To>(v); });
  return out;
}

}  // namespace vflbd

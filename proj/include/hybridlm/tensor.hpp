#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include "hybridlm/error.hpp"

namespace hybridlm {

// Dense row-major tensor. Only 1-D and 2-D shapes are used by the model.
template <typename T>
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s)
      : shape(std::move(s)),
        data(std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>()), T(0)) {}
  Tensor(std::size_t rows, std::size_t cols) : Tensor(std::vector<std::size_t>{rows, cols}) {}

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }
  T& operator()(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  T* row(std::size_t r) { return data.data() + r * cols(); }
  const T* row(std::size_t r) const { return data.data() + r * cols(); }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
Eigen::Map<RowMatrix<T>> mat(Tensor<T>& t) {
  return {t.data.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

template <typename T>
Eigen::Map<const RowMatrix<T>> mat(const Tensor<T>& t) {
  return {t.data.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

// out = a * b
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.rows()) throw InputError("matmul shape mismatch");
  Tensor<T> out(a.rows(), b.cols());
  mat(out).noalias() = mat(a) * mat(b);
  return out;
}

// out = a * b^T
template <typename T>
Tensor<T> matmul_bt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.cols()) throw InputError("matmul_bt shape mismatch");
  Tensor<T> out(a.rows(), b.rows());
  mat(out).noalias() = mat(a) * mat(b).transpose();
  return out;
}

// acc += a^T * b
template <typename T>
void accumulate_at_b(Tensor<T>& acc, const Tensor<T>& a, const Tensor<T>& b) {
  mat(acc).noalias() += mat(a).transpose() * mat(b);
}

template <typename T>
double squared_norm(const Tensor<T>& t) {
  double s = 0.0;
  for (T v : t.data) s += static_cast<double>(v) * static_cast<double>(v);
  return s;
}

}  // namespace hybridlm

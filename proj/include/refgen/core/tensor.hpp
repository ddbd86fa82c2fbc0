#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/StdVector>

#include "refgen/core/error.hpp"
#include "refgen/core/rng.hpp"

namespace refgen {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << ')';
  return os.str();
}

/// Storage aligned to the widest SIMD packet. Vectorized reductions peel a
/// scalar prologue up to the first aligned element, so without this the
/// rounding of a sum would depend on where the allocator placed the buffer.
template <class T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

/// Dense row-major tensor with value semantics.
template <class T>
struct Tensor {
  Shape shape;
  AlignedVector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(shape_numel(shape), fill) {}
  Tensor(Shape s, AlignedVector<T> values) : shape(std::move(s)), data(std::move(values)) {
    REFGEN_CHECK(data.size() == shape_numel(shape), "tensor data size does not match shape " + shape_str(shape));
  }
  Tensor(Shape s, const std::vector<T>& values) : shape(std::move(s)), data(values.begin(), values.end()) {
    REFGEN_CHECK(data.size() == shape_numel(shape), "tensor data size does not match shape " + shape_str(shape));
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor randn(Shape s, Rng& rng, T scale = T(1)) {
    Tensor t(std::move(s));
    for (auto& v : t.data) v = static_cast<T>(rng.normal()) * scale;
    return t;
  }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape.at(i < 0 ? shape.size() + i : i); }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }
  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  // 4-D accessor (N, C, H, W).
  T& at(int n, int c, int h, int w) {
    return data[((static_cast<std::size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
  const T& at(int n, int c, int h, int w) const {
    return data[((static_cast<std::size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }

  Tensor reshaped(Shape s) const {
    REFGEN_CHECK(shape_numel(s) == size(), "reshape " + shape_str(shape) + " -> " + shape_str(s));
    return Tensor(std::move(s), data);
  }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape);
    std::transform(data.begin(), data.end(), out.data.begin(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](T v) { return std::isfinite(v); });
  }

  double sum() const { return std::accumulate(data.begin(), data.end(), 0.0); }
  double sum_sq() const {
    double s = 0;
    for (T v : data) s += static_cast<double>(v) * v;
    return s;
  }
  double max_abs() const {
    double m = 0;
    for (T v : data) m = std::max(m, std::abs(static_cast<double>(v)));
    return m;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape == b.shape && a.data == b.data; }
};

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapM = Eigen::Map<MatRM<T>>;
template <class T>
using CMapM = Eigen::Map<const MatRM<T>>;

template <class T>
MapM<T> as_mat(T* p, int rows, int cols) {
  return MapM<T>(p, rows, cols);
}
template <class T>
CMapM<T> as_mat(const T* p, int rows, int cols) {
  return CMapM<T>(p, rows, cols);
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b) throw ValidationError(std::string(what) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace refgen

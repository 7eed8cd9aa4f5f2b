#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qrobust/errors.hpp"

namespace qrobust {

using Shape = std::vector<int64_t>;

inline int64_t shape_size(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

inline bool shape_eq(const Shape& a, const Shape& b) { return a == b; }

// Dense n-dimensional array, row-major, templated on scalar. float is the
// production scalar; double instantiations back the finite-difference
// oracles in the test suite.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)) {
    validate_shape();
    data.assign(static_cast<size_t>(shape_size(shape)), T(0));
  }
  Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    validate_shape();
    if (static_cast<int64_t>(data.size()) != shape_size(shape))
      throw ShapeError("tensor: data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, T v) {
    Tensor t(std::move(s));
    for (auto& x : t.data) x = v;
    return t;
  }
  static Tensor scalar(T v) { return Tensor({1}, {v}); }
  static Tensor from(Shape s, std::initializer_list<T> vals) {
    return Tensor(std::move(s), std::vector<T>(vals));
  }

  int64_t size() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

  T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  // 4-d NHWC accessor.
  T& at4(int64_t n, int64_t h, int64_t w, int64_t c) {
    return data[static_cast<size_t>(((n * shape[1] + h) * shape[2] + w) * shape[3] + c)];
  }
  const T& at4(int64_t n, int64_t h, int64_t w, int64_t c) const {
    return data[static_cast<size_t>(((n * shape[1] + h) * shape[2] + w) * shape[3] + c)];
  }
  // 2-d accessor.
  T& at2(int64_t r, int64_t c) { return data[static_cast<size_t>(r * shape[1] + c)]; }
  const T& at2(int64_t r, int64_t c) const {
    return data[static_cast<size_t>(r * shape[1] + c)];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (const T& v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  Tensor reshaped(Shape s) const {
    if (shape_size(s) != size())
      throw ShapeError("reshape: cannot view " + shape_str(shape) + " as " + shape_str(s));
    Tensor t = *this;
    t.shape = std::move(s);
    return t;
  }

 private:
  void validate_shape() const {
    for (int64_t e : shape)
      if (e <= 0) throw ShapeError("tensor: non-positive extent in shape " + shape_str(shape));
  }
};

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Matrix views over the flat buffer. rows*cols must equal the element count.
template <typename T>
Eigen::Map<MatRM<T>> as_matrix(Tensor<T>& t, int64_t rows, int64_t cols) {
  return Eigen::Map<MatRM<T>>(t.data.data(), rows, cols);
}
template <typename T>
Eigen::Map<const MatRM<T>> as_matrix(const Tensor<T>& t, int64_t rows, int64_t cols) {
  return Eigen::Map<const MatRM<T>>(t.data.data(), rows, cols);
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace qrobust

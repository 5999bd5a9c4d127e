#pragma once

// Dense row-major tensors plus the pure math kernels the rest of the
// project is built on. Reductions always run in a fixed serial order per
// output element, so results are reproducible for any thread count.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace scale {

using i64 = std::int64_t;

void set_num_threads(int n);  // 1 = serial deterministic mode
int num_threads();

namespace detail {
// C (m x n) = or += op(A) * op(B); row-major; op = optional transpose.
void gemm(bool trans_a, bool trans_b, i64 m, i64 n, i64 k, const float* a,
          const float* b, float* c, bool accumulate);
void gemm(bool trans_a, bool trans_b, i64 m, i64 n, i64 k, const double* a,
          const double* b, double* c, bool accumulate);
}  // namespace detail

template <class T>
struct Tensor {
  std::vector<i64> shape;
  std::vector<T> data;

  Tensor() = default;
  Tensor(std::vector<i64> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (numel_of(shape) != static_cast<i64>(data.size()))
      throw std::invalid_argument("tensor: shape/data size mismatch");
  }

  static i64 numel_of(const std::vector<i64>& s) {
    i64 n = 1;
    for (i64 e : s) {
      if (e <= 0) throw std::invalid_argument("tensor: extents must be positive");
      n *= e;
    }
    return n;
  }

  static Tensor zeros(std::vector<i64> s) {
    i64 n = numel_of(s);
    return Tensor(std::move(s), std::vector<T>(static_cast<size_t>(n), T(0)));
  }
  static Tensor full(std::vector<i64> s, T v) {
    i64 n = numel_of(s);
    return Tensor(std::move(s), std::vector<T>(static_cast<size_t>(n), v));
  }

  i64 numel() const { return static_cast<i64>(data.size()); }
  i64 rank() const { return static_cast<i64>(shape.size()); }
  // Row/column view: rank-1 tensors are a single row, rank-2 are rows x cols.
  i64 rows() const {
    if (rank() == 1) return 1;
    if (rank() == 2) return shape[0];
    throw std::invalid_argument("tensor: rows() needs rank 1 or 2");
  }
  i64 cols() const {
    if (rank() == 1) return shape[0];
    if (rank() == 2) return shape[1];
    throw std::invalid_argument("tensor: cols() needs rank 1 or 2");
  }
  T& at(i64 r, i64 c) { return data[static_cast<size_t>(r * cols() + c)]; }
  const T& at(i64 r, i64 c) const { return data[static_cast<size_t>(r * cols() + c)]; }
  T* row_ptr(i64 r) { return data.data() + r * cols(); }
  const T* row_ptr(i64 r) const { return data.data() + r * cols(); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

// c = a * b (or a * b^T); 2-d row-major.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_b = false) {
  i64 m = a.rows(), k = a.cols();
  i64 bk = trans_b ? b.cols() : b.rows();
  i64 n = trans_b ? b.rows() : b.cols();
  if (k != bk)
    throw std::invalid_argument("matmul: inner dims mismatch " + a.shape_str() + " vs " + b.shape_str());
  Tensor<T> c = Tensor<T>::zeros({m, n});
  detail::gemm(false, trans_b, m, n, k, a.data.data(), b.data.data(), c.data.data(), false);
  return c;
}

// out = x / ||x||; throws on zero norm.
template <class T>
Tensor<T> l2_normalize(const Tensor<T>& x) {
  double sq = 0;
  for (T v : x.data) sq += static_cast<double>(v) * static_cast<double>(v);
  double norm = std::sqrt(sq);
  if (norm == 0.0) throw std::domain_error("l2_normalize: zero-norm input");
  Tensor<T> out = x;
  for (T& v : out.data) v = static_cast<T>(static_cast<double>(v) / norm);
  return out;
}

// softmax(x / temperature) with max-subtraction, applied per row.
template <class T>
Tensor<T> row_softmax(const Tensor<T>& x, T temperature) {
  if (!(temperature > T(0))) throw std::invalid_argument("row_softmax: temperature must be > 0");
  Tensor<T> out = x;
  i64 r = x.rows(), c = x.cols();
  for (i64 i = 0; i < r; ++i) {
    const T* in = x.row_ptr(i);
    T* o = out.row_ptr(i);
    T mx = in[0];
    for (i64 j = 1; j < c; ++j) mx = std::max(mx, in[j]);
    T sum = T(0);
    for (i64 j = 0; j < c; ++j) {
      o[j] = std::exp((in[j] - mx) / temperature);
      sum += o[j];
    }
    for (i64 j = 0; j < c; ++j) o[j] /= sum;
  }
  return out;
}

// Per-row normalization with population variance, then gain/bias.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  i64 r = x.rows(), c = x.cols();
  if (gain.numel() != c || bias.numel() != c)
    throw std::invalid_argument("layer_norm: gain/bias length must match row width");
  Tensor<T> out = x;
  for (i64 i = 0; i < r; ++i) {
    const T* in = x.row_ptr(i);
    T* o = out.row_ptr(i);
    T mean = T(0);
    for (i64 j = 0; j < c; ++j) mean += in[j];
    mean /= static_cast<T>(c);
    T var = T(0);
    for (i64 j = 0; j < c; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<T>(c);
    T inv = T(1) / std::sqrt(var + eps);
    for (i64 j = 0; j < c; ++j) o[j] = gain.data[j] * ((in[j] - mean) * inv) + bias.data[j];
  }
  return out;
}

// 0.5 * x * (1 + erf(x / sqrt(2)))
template <class T>
T gelu_scalar(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(0.7071067811865475)));
}

}  // namespace scale

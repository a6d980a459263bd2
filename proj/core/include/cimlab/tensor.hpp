#pragma once

// Dense row-major tensor, the universal value carrier. Deliberately minimal:
// desk-scale models never need views, strides or broadcasting machinery.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "cimlab/common.hpp"
#include "cimlab/rng.hpp"

namespace cimlab {

template <typename T>
class Tensor {
public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape, T fill = T(0)) : shape_(std::move(shape)) {
    data_.assign(static_cast<size_t>(compute_numel(shape_)), fill);
  }

  Tensor(std::vector<int> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    require(static_cast<std::int64_t>(data_.size()) == compute_numel(shape_),
            "tensor: data length does not match shape");
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, T v) { return Tensor(std::move(shape), v); }
  static Tensor ones(std::vector<int> shape) { return full(std::move(shape), T(1)); }

  static Tensor randn(std::vector<int> shape, Rng& rng, T sigma = T(1)) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = static_cast<T>(rng.normal()) * sigma;
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::int64_t i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data_[static_cast<size_t>(i)]; }

  /// 2-d accessor; rows*cols layout checked by caller.
  T& at2(int r, int c) { return data_[static_cast<size_t>(r) * shape_[1] + c]; }
  const T& at2(int r, int c) const { return data_[static_cast<size_t>(r) * shape_[1] + c]; }

  Tensor reshaped(std::vector<int> shape) const {
    require(compute_numel(shape) == numel(), "tensor: reshape changes element count");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    for (const T& v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
    os << "]";
    return os.str();
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> t;
    std::vector<U> d(data_.size());
    for (size_t i = 0; i < data_.size(); ++i) d[i] = static_cast<U>(data_[i]);
    t = Tensor<U>(shape_, std::move(d));
    return t;
  }

private:
  static std::int64_t compute_numel(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
      require(d > 0, "tensor: shape entries must be positive");
      n *= d;
    }
    return n;
  }

  std::vector<int> shape_;
  std::vector<T> data_;
};

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.same_shape(b), "tensor: shape mismatch in +");
  Tensor<T> r = a;
  for (std::int64_t i = 0; i < r.numel(); ++i) r[i] += b[i];
  return r;
}

template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.same_shape(b), "tensor: shape mismatch in -");
  Tensor<T> r = a;
  for (std::int64_t i = 0; i < r.numel(); ++i) r[i] -= b[i];
  return r;
}

template <typename T>
T max_abs(const Tensor<T>& t) {
  T m = T(0);
  for (std::int64_t i = 0; i < t.numel(); ++i) m = std::max(m, static_cast<T>(std::abs(t[i])));
  return m;
}

/// Gathers rows (leading-dim slices) of a [N, ...] tensor.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& t, const std::vector<int>& idx) {
  require(t.rank() >= 1, "gather_rows: rank-0 tensor");
  std::int64_t row = t.numel() / t.dim(0);
  std::vector<int> shape = t.shape();
  shape[0] = static_cast<int>(idx.size());
  Tensor<T> out(shape);
  for (size_t r = 0; r < idx.size(); ++r) {
    require(idx[r] >= 0 && idx[r] < t.dim(0), "gather_rows: index out of range");
    for (std::int64_t c = 0; c < row; ++c) out[static_cast<std::int64_t>(r) * row + c] = t[idx[r] * row + c];
  }
  return out;
}

} // namespace cimlab

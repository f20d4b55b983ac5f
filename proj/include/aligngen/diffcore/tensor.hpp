#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "aligngen/errors.hpp"

namespace aligngen::ad {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) os << 'x';
    os << dims[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                         std::multiplies<>());
}

// Dense row-major tensor. Rank 2 is the common case (tokens x features);
// rows()/cols() treat any tensor as [dims[0], numel / dims[0]].
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape dims, T fill = T{0})
      : dims_(std::move(dims)), data_(shape_numel(dims_), fill) {
    check_dims();
  }

  Tensor(Shape dims, std::vector<T> data)
      : dims_(std::move(dims)), data_(std::move(data)) {
    check_dims();
    if (data_.size() != shape_numel(dims_)) {
      throw ShapeError("Tensor: data length " + std::to_string(data_.size()) +
                       " does not match dims " + shape_str(dims_));
    }
  }

  static Tensor zeros(std::size_t rows, std::size_t cols) {
    return Tensor({rows, cols});
  }

  static Tensor scalar(T v) { return Tensor({1, 1}, std::vector<T>{v}); }

  static Tensor from_rows(std::size_t rows, std::size_t cols,
                          std::vector<T> data) {
    return Tensor({rows, cols}, std::move(data));
  }

  template <typename Rng>
  static Tensor randn(Shape dims, Rng& rng, T stddev = T{1}) {
    Tensor out(std::move(dims));
    std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
    for (auto& v : out.data_) v = static_cast<T>(dist(rng));
    return out;
  }

  template <typename Rng>
  static Tensor uniform(Shape dims, Rng& rng, T lo, T hi) {
    Tensor out(std::move(dims));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& v : out.data_) v = static_cast<T>(dist(rng));
    return out;
  }

  const Shape& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t rows() const { return dims_.empty() ? 0 : dims_[0]; }
  std::size_t cols() const { return dims_.empty() ? 0 : data_.size() / dims_[0]; }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* raw() { return data_.data(); }
  const T* raw() const { return data_.data(); }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols() + c];
  }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const T> row(std::size_t r) const {
    return {data_.data() + r * cols(), cols()};
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape dims) const {
    if (shape_numel(dims) != data_.size()) {
      throw ShapeError("reshape: " + shape_str(dims_) + " -> " + shape_str(dims));
    }
    return Tensor(std::move(dims), data_);
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(),
                   [](T v) { return static_cast<U>(v); });
    return Tensor<U>(dims_, std::move(out));
  }

  // Non-finite values are exactly those with an all-ones exponent; an
  // integer max over the exponent bits vectorizes.
  bool all_finite() const {
    if constexpr (sizeof(T) == 4) {
      return max_exponent<std::uint32_t>(0x7f800000u) != 0x7f800000u;
    } else {
      return max_exponent<std::uint64_t>(0x7ff0000000000000ull) != 0x7ff0000000000000ull;
    }
  }

  // Exact value equality including shape.
  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.dims_ == b.dims_ && a.data_ == b.data_;
  }

 private:
  template <typename U>
  U max_exponent(U mask) const {
    static_assert(sizeof(U) == sizeof(T));
    U acc = 0;
    for (T v : data_) acc = std::max(acc, static_cast<U>(std::bit_cast<U>(v) & mask));
    return acc;
  }

  void check_dims() const {
    for (auto d : dims_) {
      if (d == 0) throw ShapeError("Tensor: zero-sized dim in " + shape_str(dims_));
    }
  }

  Shape dims_;
  std::vector<T> data_;
};

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.dims() != b.dims()) {
    throw ShapeError("max_abs_diff: " + shape_str(a.dims()) + " vs " +
                     shape_str(b.dims()));
  }
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace aligngen::ad

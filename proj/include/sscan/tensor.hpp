#pragma once

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "sscan/common.hpp"
#include "sscan/rng.hpp"

namespace sscan {

using Shape = std::vector<index_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

inline index_t shape_numel(const Shape& s) {
  index_t n = 1;
  for (index_t e : s) n *= e;
  return n;
}

// Dense row-major tensor. Strides are always the canonical row-major strides
// of the shape; there are no non-contiguous views.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    init_strides();
    data_.assign(static_cast<size_t>(shape_numel(shape_)), T(0));
  }

  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    init_strides();
    if (shape_numel(shape_) != static_cast<index_t>(data_.size()))
      throw ShapeError("tensor data size " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  static Tensor normal(Shape shape, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = static_cast<T>(rng.normal() * stddev);
    return t;
  }

  const Shape& shape() const { return shape_; }
  const Shape& strides() const { return strides_; }
  index_t rank() const { return static_cast<index_t>(shape_.size()); }
  index_t dim(index_t i) const { return shape_[static_cast<size_t>(i)]; }
  index_t numel() const { return static_cast<index_t>(data_.size()); }
  index_t bytes() const { return numel() * static_cast<index_t>(sizeof(T)); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator[](index_t i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](index_t i) const { return data_[static_cast<size_t>(i)]; }

  template <typename... Ix>
  T& operator()(Ix... ix) {
    return data_[static_cast<size_t>(offset(ix...))];
  }
  template <typename... Ix>
  const T& operator()(Ix... ix) const {
    return data_[static_cast<size_t>(offset(ix...))];
  }

  Tensor reshaped(Shape new_shape) const {
    if (shape_numel(new_shape) != numel())
      throw ShapeError("reshape " + shape_str(shape_) + " -> " +
                       shape_str(new_shape) + " changes element count");
    Tensor t;
    t.shape_ = std::move(new_shape);
    t.data_ = data_;
    t.init_strides();
    return t;
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  bool all_finite() const {
    for (const T& v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  // Debug-mode finiteness assertion helper.
  void check_finite(const char* what) const {
#ifndef NDEBUG
    if (!all_finite()) throw DataError(std::string("non-finite values in ") + what);
#else
    (void)what;
#endif
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (index_t i = 0; i < numel(); ++i)
      out[i] = static_cast<U>(data_[static_cast<size_t>(i)]);
    return out;
  }

 private:
  template <typename... Ix>
  index_t offset(Ix... ix) const {
    const index_t idx[] = {static_cast<index_t>(ix)...};
    index_t off = 0;
    for (size_t k = 0; k < sizeof...(Ix); ++k) off += idx[k] * strides_[k];
    return off;
  }

  void init_strides() {
    strides_.assign(shape_.size(), 1);
    for (index_t i = static_cast<index_t>(shape_.size()) - 2; i >= 0; --i)
      strides_[static_cast<size_t>(i)] =
          strides_[static_cast<size_t>(i + 1)] * shape_[static_cast<size_t>(i + 1)];
  }

  Shape shape_;
  Shape strides_;
  std::vector<T> data_;
};

}  // namespace sscan

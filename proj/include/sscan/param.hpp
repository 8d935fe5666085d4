#pragma once

#include "sscan/tensor.hpp"

namespace sscan {

// A learnable tensor with its gradient accumulator.
template <typename T>
struct Param {
  Tensor<T> value;
  Tensor<T> grad;

  void init(Tensor<T> v) {
    grad = Tensor<T>(v.shape());
    value = std::move(v);
  }

  void zero_grad() { grad.fill(T(0)); }
  index_t numel() const { return value.numel(); }
};

}  // namespace sscan

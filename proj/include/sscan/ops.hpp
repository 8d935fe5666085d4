#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

#include "sscan/tensor.hpp"

namespace sscan {

// ---------------------------------------------------------------------------
// Scalar kernels
// ---------------------------------------------------------------------------

template <typename T>
inline T sigmoid_scalar(T x) {
  if (x >= T(0)) {
    const T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  const T e = std::exp(x);
  return e / (T(1) + e);
}

// Numerically stable softplus: max(x,0) + log1p(exp(-|x|)).
template <typename T>
inline T softplus_scalar(T x) {
  return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

// Inverse of softplus: log(expm1(y)) for y > 0.
template <typename T>
inline T softplus_inverse_scalar(T y) {
  return static_cast<T>(std::log(std::expm1(static_cast<double>(y))));
}

template <typename T>
inline T silu_scalar(T x) {
  return x * sigmoid_scalar(x);
}

template <typename T>
inline T silu_grad_scalar(T x) {
  const T s = sigmoid_scalar(x);
  return s * (T(1) + x * (T(1) - s));
}

// ---------------------------------------------------------------------------
// Elementwise tensor ops
// ---------------------------------------------------------------------------

template <typename T, typename F>
Tensor<T> map(const Tensor<T>& x, F f) {
  Tensor<T> y(x.shape());
  for (index_t i = 0; i < x.numel(); ++i) y[i] = f(x[i]);
  return y;
}

template <typename T, typename F>
Tensor<T> zip(const Tensor<T>& a, const Tensor<T>& b, F f, const char* name) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(name) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> y(a.shape());
  for (index_t i = 0; i < a.numel(); ++i) y[i] = f(a[i], b[i]);
  return y;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return zip(a, b, std::plus<T>(), "add");
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return zip(a, b, std::minus<T>(), "sub");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return zip(a, b, std::multiplies<T>(), "mul");
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return map(x, [](T v) { return std::exp(v); });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  return map(x, [](T v) { return std::log(v); });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  return map(x, [](T v) { return softplus_scalar(v); });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  return map(x, [](T v) { return silu_scalar(v); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return map(x, [s](T v) { return v * s; });
}

// Broadcast x against target_shape. x's shape must match the trailing
// dimensions of target_shape (leading extents of x may also be 1).
template <typename T>
Tensor<T> broadcast(const Tensor<T>& x, const Shape& target) {
  Shape xs = x.shape();
  if (xs.size() > target.size())
    throw ShapeError("broadcast: rank " + shape_str(xs) + " exceeds target " +
                     shape_str(target));
  while (xs.size() < target.size()) xs.insert(xs.begin(), 1);
  index_t inner = 1;
  for (size_t i = 0; i < xs.size(); ++i) {
    if (xs[i] != target[i] && xs[i] != 1)
      throw ShapeError("broadcast: " + shape_str(x.shape()) +
                       " incompatible with " + shape_str(target));
  }
  (void)inner;
  Tensor<T> out(target);
  const size_t r = target.size();
  Shape xstrides(r, 0);
  {
    index_t stride = 1;
    for (index_t i = static_cast<index_t>(r) - 1; i >= 0; --i) {
      const size_t iu = static_cast<size_t>(i);
      xstrides[iu] = (xs[iu] == 1) ? 0 : stride;
      stride *= xs[iu];
    }
  }
  Shape idx(r, 0);
  for (index_t flat = 0; flat < out.numel(); ++flat) {
    index_t xoff = 0;
    for (size_t i = 0; i < r; ++i) xoff += idx[i] * xstrides[i];
    out[flat] = x[xoff];
    for (index_t i = static_cast<index_t>(r) - 1; i >= 0; --i) {
      const size_t iu = static_cast<size_t>(i);
      if (++idx[iu] < target[iu]) break;
      idx[iu] = 0;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matmul
// ---------------------------------------------------------------------------

// Batched matrix product a[.., M, K] x b[.., K, P] -> [.., M, P]. Batch
// extents are broadcast (an extent of 1 repeats). The inner loops run in
// m-k-p order so the p axis vectorizes.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw ShapeError("matmul: operands must have rank >= 2, got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const index_t M = a.dim(a.rank() - 2), K = a.dim(a.rank() - 1);
  const index_t Kb = b.dim(b.rank() - 2), P = b.dim(b.rank() - 1);
  if (K != Kb)
    throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));

  Shape abatch(a.shape().begin(), a.shape().end() - 2);
  Shape bbatch(b.shape().begin(), b.shape().end() - 2);
  const size_t br = std::max(abatch.size(), bbatch.size());
  Shape batch(br, 1);
  while (abatch.size() < br) abatch.insert(abatch.begin(), 1);
  while (bbatch.size() < br) bbatch.insert(bbatch.begin(), 1);
  for (size_t i = 0; i < br; ++i) {
    if (abatch[i] != bbatch[i] && abatch[i] != 1 && bbatch[i] != 1)
      throw ShapeError("matmul: batch extents not broadcastable, " +
                       shape_str(a.shape()) + " x " + shape_str(b.shape()));
    batch[i] = std::max(abatch[i], bbatch[i]);
  }
  const index_t nbatch = shape_numel(batch);

  Shape out_shape = batch;
  out_shape.push_back(M);
  out_shape.push_back(P);
  Tensor<T> c(out_shape);

  // Flat batch strides (0 where broadcast).
  auto batch_offset = [&](const Shape& dims, index_t flat) {
    index_t off = 0, mul = 1;
    for (index_t i = static_cast<index_t>(br) - 1; i >= 0; --i) {
      const size_t iu = static_cast<size_t>(i);
      const index_t coord = (flat / mul) % batch[iu];
      mul *= batch[iu];
      index_t stride = 1;
      for (size_t j = iu + 1; j < br; ++j) stride *= dims[j];
      if (dims[iu] != 1) off += coord * stride;
    }
    return off;
  };

  for (index_t n = 0; n < nbatch; ++n) {
    const T* pa = a.data() + batch_offset(abatch, n) * M * K;
    const T* pb = b.data() + batch_offset(bbatch, n) * K * P;
    T* pc = c.data() + n * M * P;
    for (index_t m = 0; m < M; ++m) {
      T* crow = pc + m * P;
      for (index_t k = 0; k < K; ++k) {
        const T av = pa[m * K + k];
        const T* brow = pb + k * P;
        for (index_t p = 0; p < P; ++p) crow[p] += av * brow[p];
      }
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Transpose / reductions / softmax / indexing
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, const std::vector<index_t>& perm) {
  if (static_cast<index_t>(perm.size()) != x.rank())
    throw ShapeError("transpose: permutation rank mismatch");
  const size_t r = perm.size();
  Shape out_shape(r);
  for (size_t i = 0; i < r; ++i) out_shape[i] = x.dim(perm[i]);
  Tensor<T> out(out_shape);
  Shape idx(r, 0);
  for (index_t flat = 0; flat < out.numel(); ++flat) {
    index_t xoff = 0;
    for (size_t i = 0; i < r; ++i)
      xoff += idx[i] * x.strides()[static_cast<size_t>(perm[i])];
    out[flat] = x[xoff];
    for (index_t i = static_cast<index_t>(r) - 1; i >= 0; --i) {
      const size_t iu = static_cast<size_t>(i);
      if (++idx[iu] < out_shape[iu]) break;
      idx[iu] = 0;
    }
  }
  return out;
}

// 2-D transpose convenience.
template <typename T>
Tensor<T> transpose2d(const Tensor<T>& x) {
  return transpose(x, {1, 0});
}

namespace detail {
template <typename T, typename F>
Tensor<T> reduce_axis(const Tensor<T>& x, index_t axis, T init, F f) {
  if (axis < 0 || axis >= x.rank()) throw ShapeError("reduce: axis out of range");
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<size_t>(axis));
  if (out_shape.empty()) out_shape = {1};
  index_t outer = 1, inner = 1;
  for (index_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (index_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const index_t n = x.dim(axis);
  Tensor<T> out = Tensor<T>::full(out_shape, init);
  for (index_t o = 0; o < outer; ++o)
    for (index_t k = 0; k < n; ++k) {
      const T* src = x.data() + (o * n + k) * inner;
      T* dst = out.data() + o * inner;
      for (index_t i = 0; i < inner; ++i) dst[i] = f(dst[i], src[i]);
    }
  return out;
}
}  // namespace detail

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x, index_t axis) {
  return detail::reduce_axis(x, axis, T(0), std::plus<T>());
}

template <typename T>
Tensor<T> reduce_max(const Tensor<T>& x, index_t axis) {
  return detail::reduce_axis(x, axis, std::numeric_limits<T>::lowest(),
                             [](T a, T b) { return std::max(a, b); });
}

template <typename T>
T sum_all(const Tensor<T>& x) {
  T s = 0;
  for (index_t i = 0; i < x.numel(); ++i) s += x[i];
  return s;
}

// Max-subtracted softmax over the last axis.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  const index_t n = x.dim(x.rank() - 1);
  const index_t rows = x.numel() / n;
  Tensor<T> y(x.shape());
  for (index_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * n;
    T* out = y.data() + r * n;
    T m = in[0];
    for (index_t i = 1; i < n; ++i) m = std::max(m, in[i]);
    T z = 0;
    for (index_t i = 0; i < n; ++i) {
      out[i] = std::exp(in[i] - m);
      z += out[i];
    }
    const T inv = T(1) / z;
    for (index_t i = 0; i < n; ++i) out[i] *= inv;
  }
  return y;
}

// Row gather: out[i, :] = table[index[i], :].
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<index_t>& index) {
  if (table.rank() != 2) throw ShapeError("gather_rows: table must be 2-D");
  const index_t rows = table.dim(0), cols = table.dim(1);
  Tensor<T> out({static_cast<index_t>(index.size()), cols});
  for (size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= rows)
      throw DataError("gather_rows: index " + std::to_string(index[i]) +
                      " out of range [0," + std::to_string(rows) + ")");
    std::copy(table.data() + index[i] * cols, table.data() + (index[i] + 1) * cols,
              out.data() + static_cast<index_t>(i) * cols);
  }
  return out;
}

template <typename T>
Tensor<T> one_hot(const std::vector<index_t>& index, index_t depth) {
  Tensor<T> out({static_cast<index_t>(index.size()), depth});
  for (size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= depth)
      throw DataError("one_hot: index out of range");
    out(static_cast<index_t>(i), index[i]) = T(1);
  }
  return out;
}

}  // namespace sscan

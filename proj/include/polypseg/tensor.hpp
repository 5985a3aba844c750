// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "polypseg/errors.hpp"

namespace polypseg {

/// NCHW dimensions of a rank-4 tensor. All four extents are >= 1.
struct Dims {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  std::int64_t count() const {
    return static_cast<std::int64_t>(n) * c * h * w;
  }

  bool operator==(const Dims& o) const = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + ")";
  }
};

/// Dense row-major NCHW tensor. Element (n,c,h,w) lives at flat index
/// ((n*C + c)*H + h)*W + w. Treated as an immutable value once built;
/// kernels allocate fresh outputs instead of writing in place.
template <typename T>
struct TensorT {
  Dims dims;
  std::vector<T> data;

  TensorT() = default;

  explicit TensorT(Dims d) : dims(d) {
    check_dims(d);
    data.assign(static_cast<std::size_t>(d.count()), T(0));
  }

  TensorT(Dims d, std::vector<T> values) : dims(d), data(std::move(values)) {
    check_dims(d);
    if (static_cast<std::int64_t>(data.size()) != d.count()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match dims " + d.str());
    }
  }

  static TensorT zeros(Dims d) { return TensorT(d); }

  static TensorT full(Dims d, T value) {
    TensorT t(d);
    std::fill(t.data.begin(), t.data.end(), value);
    return t;
  }

  std::int64_t size() const { return dims.count(); }

  std::int64_t index(int n, int c, int h, int w) const {
    return ((static_cast<std::int64_t>(n) * dims.c + c) * dims.h + h) * dims.w + w;
  }

  T& at(int n, int c, int h, int w) { return data[index(n, c, h, w)]; }
  T at(int n, int c, int h, int w) const { return data[index(n, c, h, w)]; }

  /// Pointer to the start of one (n,c) image plane.
  T* plane(int n, int c) { return data.data() + index(n, c, 0, 0); }
  const T* plane(int n, int c) const { return data.data() + index(n, c, 0, 0); }

  bool same_shape(const TensorT& o) const { return dims == o.dims; }

  template <typename U>
  TensorT<U> cast() const {
    TensorT<U> out;
    out.dims = dims;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }

private:
  static void check_dims(Dims d) {
    if (d.n < 1 || d.c < 1 || d.h < 1 || d.w < 1) {
      throw ShapeError("tensor dims must all be >= 1, got " + d.str());
    }
  }
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

}  // namespace polypseg

#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "tqs/common.hpp"

namespace tqs {

// Dense row-major tensor. Shapes are explicit; no views, no broadcasting
// magic. All layout conventions (patch order, channel order) live in the
// code that builds the indices.
template <typename T>
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<T> v;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)), v(count(shape)) {}
  Tensor(std::vector<int64_t> s, T fill) : shape(std::move(s)), v(count(shape), fill) {}

  static int64_t count(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) {
      TQS_REQUIRE(d >= 0, "negative tensor dim");
      n *= d;
    }
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(v.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int64_t dim(int i) const { return shape[i]; }

  T* data() { return v.data(); }
  const T* data() const { return v.data(); }

  T& operator[](int64_t i) { return v[i]; }
  const T& operator[](int64_t i) const { return v[i]; }

  T& at2(int64_t i, int64_t j) { return v[i * shape[1] + j]; }
  T at2(int64_t i, int64_t j) const { return v[i * shape[1] + j]; }
  T& at3(int64_t i, int64_t j, int64_t k) {
    return v[(i * shape[1] + j) * shape[2] + k];
  }
  T at3(int64_t i, int64_t j, int64_t k) const {
    return v[(i * shape[1] + j) * shape[2] + k];
  }
  T& at4(int64_t i, int64_t j, int64_t k, int64_t l) {
    return v[((i * shape[1] + j) * shape[2] + k) * shape[3] + l];
  }
  T at4(int64_t i, int64_t j, int64_t k, int64_t l) const {
    return v[((i * shape[1] + j) * shape[2] + k) * shape[3] + l];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  void fill(T x) {
    for (auto& e : v) e = x;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape);
    for (int64_t i = 0; i < numel(); ++i) out[i] = static_cast<U>(v[i]);
    return out;
  }
};

}  // namespace tqs

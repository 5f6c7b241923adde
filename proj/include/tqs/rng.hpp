#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "tqs/common.hpp"
#include "tqs/tensor.hpp"

namespace tqs {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t a) { return splitmix64(a); }
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  return splitmix64(splitmix64(a) + 0x9e3779b97f4a7c15ull * b + 1);
}
template <typename... Rest>
uint64_t mix_seed(uint64_t a, uint64_t b, Rest... rest) {
  return mix_seed(mix_seed(a, b), rest...);
}

// Deterministic stream with hand-rolled transforms. std::mt19937_64 output is
// pinned by the standard; the distribution transforms below are spelled out
// here so results are identical across standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t bits() { return eng_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  int64_t uniform_int(int64_t n) {
    TQS_REQUIRE(n > 0, "uniform_int needs n > 0");
    int64_t i = static_cast<int64_t>(uniform() * static_cast<double>(n));
    return i < n ? i : n - 1;
  }

  // Box-Muller, pair-cached.
  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * kPi * u2;
    cached_ = r * std::sin(a);
    have_cached_ = true;
    return r * std::cos(a);
  }

  template <typename T>
  void fill_normal(Tensor<T>& t, double scale = 1.0) {
    for (auto& x : t.v) x = static_cast<T>(normal() * scale);
  }

  template <typename T>
  void fill_uniform(Tensor<T>& t, double lo, double hi) {
    for (auto& x : t.v) x = static_cast<T>(uniform(lo, hi));
  }

 private:
  std::mt19937_64 eng_;
  bool have_cached_ = false;
  double cached_ = 0.0;
};

}  // namespace tqs

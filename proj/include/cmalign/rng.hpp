#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "cmalign/tensor.hpp"

namespace cmalign {

// Deterministic RNG. Distributions are hand-rolled on top of mt19937_64
// because the std distribution algorithms are implementation-defined and
// seeded replay must produce the same streams everywhere.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  uint64_t uniform_int(uint64_t n) {
    if (n == 0) return 0;
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = eng_();
    } while (x >= limit);
    return x % n;
  }

  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(a);
    have_cached_ = true;
    return r * std::cos(a);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  Tensor uniform_tensor(Shape s, double lo, double hi) {
    Tensor t(std::move(s));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = uniform(lo, hi);
    return t;
  }

  Tensor normal_tensor(Shape s, double mean = 0.0, double stddev = 1.0) {
    Tensor t(std::move(s));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = mean + stddev * normal();
    return t;
  }

  // Reproducible sub-generator keyed by (this generator's seed, stream id);
  // independent of how much of this generator's stream has been consumed.
  Rng derive(uint64_t stream) const {
    return Rng(mix(mix(seed_) ^ (stream + 0x9e3779b97f4a7c15ull)));
  }

 private:
  // splitmix64 finalizer
  static uint64_t mix(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  uint64_t seed_;
  std::mt19937_64 eng_;
  bool have_cached_ = false;
  double cached_ = 0.0;
};

}  // namespace cmalign

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace ot {

// Deterministic RNG. mt19937_64 is bit-exact across standard libraries; the
// distributions below are written out by hand because the std distribution
// algorithms are implementation-defined.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53 bits of entropy.
  double next_double() { return (gen_() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). Modulo bias is < 2^-53 for the sizes used here.
  uint64_t next_below(uint64_t n) { return gen_() % n; }

  // Standard normal via Box-Muller (fully specified, no cached spare).
  double next_normal() {
    double u1 = next_double();
    double u2 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  template <class S>
  void fill_normal(std::span<S> v, double mean, double stddev) {
    for (auto& x : v) x = static_cast<S>(mean + stddev * next_normal());
  }
  template <class S>
  void fill_normal(std::vector<S>& v, double mean, double stddev) {
    fill_normal(std::span<S>(v), mean, stddev);
  }

  // In-place Fisher-Yates shuffle.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace ot

#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <random>
#include <vector>

#include "admkd/tensor.hpp"

namespace admkd {

/// splitmix64 finaliser; used to derive independent stream seeds.
constexpr std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> keys) {
  std::uint64_t h = mix_seed(seed);
  for (auto k : keys) h = mix_seed(h ^ mix_seed(k + 0x632be59bd9b4e019ULL));
  return h;
}

/// Seeded generator whose draws do not depend on the standard library's
/// distribution implementations, so streams are reproducible everywhere.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n) by rejection.
  std::uint64_t uniform_int(std::uint64_t n) {
    const std::uint64_t limit = n ? UINT64_MAX - UINT64_MAX % n : 0;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  /// Standard normal via Box–Muller (one draw per call, the pair is not cached).
  double normal() {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[uniform_int(i)]);
  }

 private:
  std::mt19937_64 engine_;
};

template <typename S>
TensorT<S> randn(Shape shape, Rng& rng, double scale = 1.0) {
  std::vector<S> v(numel(shape));
  for (auto& x : v) x = static_cast<S>(scale * rng.normal());
  return TensorT<S>(std::move(shape), std::move(v));
}

template <typename S>
TensorT<S> rand_uniform(Shape shape, Rng& rng, double lo, double hi) {
  std::vector<S> v(numel(shape));
  for (auto& x : v) x = static_cast<S>(rng.uniform(lo, hi));
  return TensorT<S>(std::move(shape), std::move(v));
}

}  // namespace admkd

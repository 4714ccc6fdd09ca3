#pragma once

#include <cstdint>
#include <random>

#include "rbnn/tensor.hpp"

namespace rbnn {

/// splitmix64 finalizer; used to derive independent substream seeds.
constexpr std::uint64_t mix_seed(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed for substream `stream` of `seed`, e.g. (seed, draw-index) or (seed, image-index).
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) noexcept {
  return mix_seed(mix_seed(seed) ^ mix_seed(stream + 0x632be59bd9b4e019ULL));
}

/// Explicit random stream. Nothing in the library keeps hidden RNG state; every
/// stochastic call takes one of these.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return std::generate_canonical<double, 64>(engine_); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi].
  std::size_t uniform_index(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(engine_);
  }

  double normal() { return normal_(engine_); }

  /// +1 or -1 with equal probability.
  double rademacher() { return (engine_() >> 63) ? 1.0 : -1.0; }

  Tensor normal_tensor(const Shape& shape) {
    Tensor t(shape);
    for (auto& v : t.values()) v = normal();
    return t;
  }

  Tensor uniform_tensor(const Shape& shape, double lo, double hi) {
    Tensor t(shape);
    for (auto& v : t.values()) v = uniform(lo, hi);
    return t;
  }

  Tensor rademacher_tensor(const Shape& shape) {
    Tensor t(shape);
    for (auto& v : t.values()) v = rademacher();
    return t;
  }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace rbnn

// Seedable, splittable random streams.
//
// Every consumer derives its own stream from a key tuple, e.g.
// (global_seed, epoch, sample_index), so results never depend on the order in
// which samples are processed.
#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace iidnet {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

class Rng {
 public:
  using engine_type = std::mt19937_64;

  explicit Rng(std::uint64_t seed = 0) : engine_(splitmix64(seed)) {}

  /// Independent stream for a key path such as {seed, epoch, index}.
  static Rng stream(std::initializer_list<std::uint64_t> keys) {
    std::uint64_t h = 0x243F6A8885A308D3ull;
    for (std::uint64_t k : keys) h = splitmix64(h ^ splitmix64(k));
    return Rng(h);
  }

  /// Child stream; does not advance this generator.
  Rng split(std::uint64_t tag) const { return stream({state_hash(), tag}); }

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double uniform01() { return uniform(0.0, 1.0); }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  bool bernoulli(double p) { return uniform01() < p; }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_);
  }

  engine_type& engine() noexcept { return engine_; }

 private:
  std::uint64_t state_hash() const {
    engine_type copy = engine_;
    return copy();
  }

  engine_type engine_;
};

}  // namespace iidnet

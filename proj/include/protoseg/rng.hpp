#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

namespace protoseg {

// Deterministic PRNG with a single u64 state word. std::normal_distribution and
// std::shuffle are not bit-stable across standard library implementations;
// checkpointed RNG state and golden tests need exact reproducibility, so all
// sampling here is hand-rolled on splitmix64.
inline std::uint64_t splitmix64_next(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Stateless fan-out: one master seed plus up to two stream indices give an
// independent sub-seed. Used for per-iteration episode/augmentation streams so
// any iteration is reproducible in isolation.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b = 0) {
  std::uint64_t s = master;
  std::uint64_t h = splitmix64_next(s);
  s ^= a + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  h = splitmix64_next(s);
  s ^= b + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  return splitmix64_next(s);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() { return splitmix64_next(state_); }

  // [0, 1) with 53-bit resolution
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // inclusive [lo, hi]
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(next_u64() % span);
  }

  // Box-Muller, cosine branch only: two uniforms per sample, no carried state.
  double normal() {
    double u1 = next_double();
    const double u2 = next_double();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::uint64_t state() const { return state_; }

 private:
  static constexpr double kTwoPi = 6.28318530717958647692;
  std::uint64_t state_;
};

}  // namespace protoseg

#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <random>

namespace vamsl {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Counter-based seed derivation: the same (base, path) always yields the same
/// seed, independent of call order or thread scheduling.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = splitmix64(base);
  for (auto p : path) s = splitmix64(s ^ splitmix64(p + 0x632be59bd9b4e019ULL));
  return s;
}

/// SplitMix64 generator. Tiny state, so streams can be created per particle and
/// per step from derived seeds.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  double normal() { return std::normal_distribution<double>{0.0, 1.0}(*this); }

  bool bernoulli(double p) { return uniform() < p; }

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
};

inline Rng make_stream(std::uint64_t base, std::initializer_list<std::uint64_t> path) {
  return Rng(derive_seed(base, path));
}

/// log of a Gamma(shape, 1) draw. Shapes below one use Gamma(a) = Gamma(a + 1) * U^(1/a)
/// in log space so the draw does not underflow to zero.
inline double sample_log_gamma(double shape, Rng& rng) {
  if (shape >= 1.0) return std::log(std::gamma_distribution<double>{shape, 1.0}(rng));
  const double g = std::gamma_distribution<double>{shape + 1.0, 1.0}(rng);
  double u = rng.uniform();
  while (u <= 0.0) u = rng.uniform();
  return std::log(g) + std::log(u) / shape;
}

inline double sample_beta(double a, double b, Rng& rng) {
  const double la = sample_log_gamma(a, rng);
  const double lb = sample_log_gamma(b, rng);
  // a / (a + b) evaluated in log space
  return 1.0 / (1.0 + std::exp(lb - la));
}

inline double log_beta_density(double x, double a, double b) {
  if (x <= 0.0 || x >= 1.0) {
    if (x == 0.0 && a == 1.0) return std::log(b);
    if (x == 1.0 && b == 1.0) return std::log(a);
    return -std::numeric_limits<double>::infinity();
  }
  return (a - 1.0) * std::log(x) + (b - 1.0) * std::log1p(-x) + std::lgamma(a + b) - std::lgamma(a) -
         std::lgamma(b);
}

}  // namespace vamsl

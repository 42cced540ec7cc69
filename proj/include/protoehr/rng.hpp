#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace protoehr {

/// SplitMix64 step, used to derive independent seeds from a base seed.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Mixes a seed with a stream id into a fresh seed. Distinct ids give
/// statistically independent streams.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream_id) {
  std::uint64_t s = seed ^ (0x6a09e667f3bcc909ULL + stream_id * 0x9e3779b97f4a7c15ULL);
  splitmix64(s);
  return splitmix64(s);
}

/// Deterministic random source. The engine is mt19937_64 (sequence fully
/// specified by the standard) and every distribution below is implemented
/// explicitly, so a seed produces the same values on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Unbiased integer in [lo, hi] via rejection sampling.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t range = static_cast<std::uint64_t>(hi - lo) + 1ULL;
    if (range == 0) return static_cast<std::int64_t>(engine_());  // full 64-bit range
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % range;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return lo + static_cast<std::int64_t>(x % range);
  }

  /// Standard normal via Box-Muller (pairs cached).
  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    cached_ = r * std::sin(theta);
    have_cached_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  bool bernoulli(double p) { return uniform() < p; }

  /// Fisher-Yates shuffle.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::int64_t i = static_cast<std::int64_t>(v.size()) - 1; i > 0; --i) {
      const std::int64_t j = uniform_int(0, i);
      std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
    }
  }

  /// Samples an index from unnormalized nonnegative weights.
  std::size_t categorical(const std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    double x = uniform() * total;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      x -= weights[i];
      if (x < 0.0) return i;
    }
    return weights.size() - 1;
  }

  /// Textual engine state, round-trippable with restore_state. The cached
  /// Box-Muller value is written as hexfloat so restore is bit-exact.
  std::string save_state() const {
    std::ostringstream os;
    os << engine_ << ' ' << (have_cached_ ? 1 : 0) << ' ' << std::hexfloat << cached_;
    return os.str();
  }

  void restore_state(const std::string& s) {
    std::istringstream is(s);
    int flag = 0;
    std::string hex;
    is >> engine_ >> flag >> hex;
    have_cached_ = flag != 0;
    cached_ = hex.empty() ? 0.0 : std::strtod(hex.c_str(), nullptr);
  }

 private:
  std::mt19937_64 engine_;
  bool have_cached_ = false;
  double cached_ = 0.0;
};

}  // namespace protoehr

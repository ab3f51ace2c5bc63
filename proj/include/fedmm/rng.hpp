#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace fedmm {

// splitmix64 step; used to derive well-separated seeds from (base, tag) pairs.
inline uint64_t mix_seed(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t base, uint64_t a) { return mix_seed(base ^ mix_seed(a)); }

inline uint64_t mix_seed(uint64_t base, uint64_t a, uint64_t b) {
  return mix_seed(mix_seed(base, a) ^ mix_seed(b + 0x517cc1b727220a95ULL));
}

// Deterministic RNG. std::mt19937_64 output is specified bit-exactly by the
// standard; the distribution mappings below are our own so results do not
// depend on the standard library implementation.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // uniform in [0, 1) with 53 random bits
  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Box-Muller; caches the second variate
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform01();
    double u2 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // integer in [0, n)
  uint64_t below(uint64_t n) {
    // rejection-free modulo is fine here: n is tiny relative to 2^64 so the
    // bias is far below anything observable in these experiments, and the
    // mapping is reproducible everywhere.
    return engine_() % n;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    // Fisher-Yates with our own index draws, deterministic across platforms
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace fedmm

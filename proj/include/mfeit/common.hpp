#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace mfeit {

inline constexpr const char* kVersion = "0.1.0";

inline constexpr double two_pi = 2.0 * std::numbers::pi;

/// Invalid configuration or violated precondition, detected before numerics run.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Numerical failure: singular systems, rank deficiency, non-finite values.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Formats a double with 17 significant digits (round-trip exact).
inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return std::string(buf);
}

inline uint64_t mix64(uint64_t z) {
  z ^= z >> 33;
  z *= 0xFF51AFD7ED558CCDull;
  z ^= z >> 33;
  z *= 0xC4CEB9FE1A85EC53ull;
  z ^= z >> 33;
  return z;
}

/// Independent substream seed for index pair (a, b) under a base seed.
/// Used to split the noise generator per (frequency, pattern) so that
/// parallel and serial sweep evaluation orders agree.
inline uint64_t derive_stream(uint64_t seed, uint64_t a, uint64_t b) {
  uint64_t h = mix64(seed ^ 0x9E3779B97F4A7C15ull);
  h = mix64(h ^ (a * 0xBF58476D1CE4E5B9ull));
  h = mix64(h ^ (b * 0x94D049BB133111EBull));
  return h;
}

/// Seedable standard-normal sampler: mt19937_64 + Box-Muller. The engine is
/// standard-specified, so streams are reproducible across platforms.
class NormalSampler {
 public:
  explicit NormalSampler(uint64_t seed) : eng_(seed) {}

  double next() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform01();  // (0, 1]
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(two_pi * u2);
    have_spare_ = true;
    return r * std::cos(two_pi * u2);
  }

 private:
  double uniform01() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

}  // namespace mfeit

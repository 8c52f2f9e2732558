#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace cfpanel {

/// Counter-based generator: output k is splitmix64(seed + k * golden_gamma).
///
/// Every draw is a pure function of (seed, counter), so streams are reproducible
/// across platforms and threads. Normal deviates use Box-Muller with our own
/// transform rather than std::normal_distribution, whose algorithm is unspecified.
class CounterRng {
public:
  static constexpr const char* name = "splitmix64-counter";

  explicit CounterRng(std::uint64_t seed) noexcept : seed_(seed) {}

  std::uint64_t next_u64() noexcept {
    ++counter_;
    return mix(seed_ + counter_ * kGamma);
  }

  /// Uniform on the open interval (0, 1).
  double uniform() noexcept { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double r = std::sqrt(-2.0 * std::log(uniform()));
    const double theta = 2.0 * std::numbers::pi * uniform();
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double sd) noexcept { return mean + sd * normal(); }

  /// Uniform integer in [0, bound) by rejection, unbiased.
  std::uint64_t below(std::uint64_t bound) noexcept {
    if (bound <= 1) return 0;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % bound;
  }

  std::uint64_t seed() const noexcept { return seed_; }

  /// Seed of the stream assigned to job `index` under master seed `master`.
  static std::uint64_t derive(std::uint64_t master, std::uint64_t index) noexcept {
    return master ^ index;
  }

  static std::uint64_t mix(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

private:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

} // namespace cfpanel

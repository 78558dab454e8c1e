#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace quasicausal {

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Purposes for keyed streams. Values are part of the reproducibility contract.
enum class Stream : std::uint64_t {
  parish = 1,
  national = 2,
  family = 3,
  individual = 4,
  vaccination = 5,
  mortality = 6,
  selection = 7,
  outcome = 8,
  offspring = 9,
  bootstrap = 10,
  mediation = 11,
  pairing = 12,
};

/// Counter-based generator keyed by (seed, entity, purpose). Each key owns an
/// independent stream, so draws do not depend on generation order.
///
/// Transforms are written out here instead of using <random> distributions,
/// whose output is implementation-defined.
class KeyedRng {
 public:
  KeyedRng(std::uint64_t seed, std::uint64_t entity, Stream purpose) noexcept
      : key_(mix64(mix64(seed ^ 0x5bd1e995ULL) ^ mix64(entity + 0x632be59bd9b4e019ULL) ^
                   (static_cast<std::uint64_t>(purpose) << 56))) {}

  std::uint64_t next_u64() noexcept { return mix64(key_ + 0x9e3779b97f4a7c15ULL * ++counter_); }

  /// Uniform on the open interval (0, 1).
  double uniform() noexcept {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Integer uniform on [lo, hi].
  int uniform_int(int lo, int hi) noexcept {
    const auto span = static_cast<std::uint64_t>(hi - lo + 1);
    return lo + static_cast<int>(next_u64() % span);
  }

  bool bernoulli(double p) noexcept { return uniform() < p; }

  /// Box-Muller; the second variate is discarded so each call consumes two draws.
  double normal() noexcept {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double sd) noexcept { return mean + sd * normal(); }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace quasicausal

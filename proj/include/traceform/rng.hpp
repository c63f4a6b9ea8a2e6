#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

namespace traceform {

/// Version tag mixed into every stream key. Bump when sampling semantics change.
inline constexpr std::string_view kRngVersion = "traceform-rng-v1";

std::uint64_t splitmix64(std::uint64_t& state);

/// xoshiro256** with portable sampling helpers (std distributions are implementation-defined).
///
/// Streams are keyed rather than shared: `Rng::stream(seed, "traces", app_index)` always yields
/// the same sequence regardless of which thread or in which order it is requested.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  static Rng stream(std::uint64_t seed, std::string_view name, std::uint64_t id = 0);
  static Rng stream(std::uint64_t seed, std::string_view name, std::uint64_t id_a, std::uint64_t id_b);

  std::uint64_t next();

  /// Uniform in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n);
  /// Uniform integer in [lo, hi] inclusive.
  std::int64_t between(std::int64_t lo, std::int64_t hi);
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  template <typename T>
  const T& pick(std::span<const T> items) {
    return items[static_cast<std::size_t>(below(items.size()))];
  }
  template <typename T>
  const T& pick(const std::vector<T>& items) {
    return items[static_cast<std::size_t>(below(items.size()))];
  }

 private:
  std::uint64_t s_[4];
};

}  // namespace traceform

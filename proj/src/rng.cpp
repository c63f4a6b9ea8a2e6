#include "traceform/rng.hpp"

#include <stdexcept>

#include "traceform/hash.hpp"

namespace traceform {

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Rng::Rng(std::uint64_t seed) {
  std::uint64_t sm = seed;
  for (auto& s : s_) s = splitmix64(sm);
}

Rng Rng::stream(std::uint64_t seed, std::string_view name, std::uint64_t id) {
  std::uint64_t h = fnv1a64(kRngVersion);
  h = fnv1a64(name, h);
  std::uint64_t mix = seed ^ h;
  std::uint64_t a = splitmix64(mix);
  std::uint64_t key = a ^ (id * 0xd6e8feb86659fd93ULL);
  std::uint64_t b = splitmix64(key);
  return Rng(a ^ b);
}

Rng Rng::stream(std::uint64_t seed, std::string_view name, std::uint64_t id_a, std::uint64_t id_b) {
  Rng inner = stream(seed, name, id_a);
  std::uint64_t mix = inner.next() ^ (id_b * 0x9e3779b97f4a7c15ULL);
  return Rng(splitmix64(mix));
}

static inline std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

std::uint64_t Rng::next() {
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("Rng::below(0)");
  // Rejection sampling keeps the result unbiased and portable.
  const std::uint64_t limit = (~std::uint64_t{0}) - ((~std::uint64_t{0}) % n);
  std::uint64_t x;
  do {
    x = next();
  } while (x >= limit);
  return x % n;
}

std::int64_t Rng::between(std::int64_t lo, std::int64_t hi) {
  if (hi < lo) throw std::invalid_argument("Rng::between: empty range");
  return lo + static_cast<std::int64_t>(below(static_cast<std::uint64_t>(hi - lo) + 1));
}

double Rng::uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

}  // namespace traceform

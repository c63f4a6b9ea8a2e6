#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace traceform {

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

/// FNV-1a 64-bit. Used for text buckets and checksums; the constants are part of the file formats.
constexpr std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = kFnvOffset) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= kFnvPrime;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t h = kFnvOffset) {
  for (std::uint8_t c : bytes) {
    h ^= c;
    h *= kFnvPrime;
  }
  return h;
}

std::string hex64(std::uint64_t v);

/// Checksum of a whole file as 16 hex digits.
std::string file_checksum(const std::string& path);

}  // namespace traceform

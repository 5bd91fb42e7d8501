// FNV-1a hashing used for config digests, checkpoint integrity, and the
// hashing tokenizer.
#pragma once

#include <cstdint>
#include <string_view>

namespace nextloc {

inline constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;
inline constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

inline std::uint64_t fnv1a_bytes(const void* data, std::size_t n,
                                 std::uint64_t h = kFnvOffset) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
  return h;
}

inline std::uint64_t fnv1a(std::string_view s,
                           std::uint64_t h = kFnvOffset) {
  return fnv1a_bytes(s.data(), s.size(), h);
}

}  // namespace nextloc

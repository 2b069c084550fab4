#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>

namespace dygrasp {

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

constexpr std::uint64_t fnv1a64(std::string_view bytes,
                                std::uint64_t h = kFnvOffset) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= kFnvPrime;
  }
  return h;
}

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
  return splitmix64(a ^ (splitmix64(b) + 0x9e3779b97f4a7c15ULL + (a << 6) +
                         (a >> 2)));
}

// Counter-based stream of uniform doubles in [-1, 1) derived from a key.
class HashStream {
 public:
  explicit HashStream(std::uint64_t key) : state_(key) {}

  std::uint64_t next_u64() { return splitmix64(state_++); }

  double next_signed() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-52 - 1.0;
  }

 private:
  std::uint64_t state_;
};

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace dygrasp

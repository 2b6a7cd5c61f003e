#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace dar {

/// SplitMix64 finalizer; used to derive independent per-sample / per-epoch
/// seeds from a run seed so results do not depend on iteration order.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> parts) noexcept {
  std::uint64_t h = mix64(base);
  for (auto p : parts) h = mix64(h ^ mix64(p));
  return h;
}

inline std::mt19937_64 make_rng(std::uint64_t base, std::initializer_list<std::uint64_t> parts) {
  return std::mt19937_64(derive_seed(base, parts));
}

// Stream tags keep derived seeds for different purposes apart.
enum class Stream : std::uint64_t {
  volume = 1,
  annotators = 2,
  shuffle = 3,
  augment = 4,
  init = 5,
  split = 6,
  folds = 7,
  subsample = 8,
};

/// 64-bit FNV-1a; stable across platforms, unlike std::hash.
constexpr std::uint64_t fnv1a(std::string_view text) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

constexpr std::uint64_t tag(Stream s) noexcept { return static_cast<std::uint64_t>(s); }

}  // namespace dar

#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace uoe {

namespace detail {

// SplitMix64 finalizer. Pure integer mixing, so streams are bit-identical
// across platforms and independent of call order history.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

// Counter-based generator: value i of a stream is mix64(seed + f(i)), so a
// stream can be re-created from (seed, counter) alone and derived streams
// (one per parameter name) do not disturb each other.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t counter = 0)
      : seed_(seed), counter_(counter) {}

  std::uint64_t next_u64() {
    return detail::mix64(seed_ ^ (0x9e3779b97f4a7c15ULL * ++counter_));
  }

  // Uniform in [0, 1) with 53 random mantissa bits.
  double next_uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double next_uniform(double lo, double hi) {
    return lo + (hi - lo) * next_uniform();
  }

  // Box-Muller, cosine branch only: two counter increments per draw.
  double next_normal() {
    double u1 = next_uniform();
    double u2 = next_uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(6.283185307179586476925286766559 * u2);
  }

  std::size_t next_index(std::size_t bound) {
    return static_cast<std::size_t>(next_u64() % bound);
  }

  // Independent stream derived from a label; used so each parameter's
  // initialization does not depend on how many parameters precede it.
  Rng stream(std::string_view name) const {
    return Rng(detail::mix64(seed_ ^ detail::fnv1a(name)));
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }
  void set_counter(std::uint64_t c) { counter_ = c; }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_;
};

}  // namespace uoe

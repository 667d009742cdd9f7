#pragma once

// Counter-based random numbers. Every draw is a pure function of
// (key, counter), where the key is derived from a seed plus a path of
// purpose tags (dataset / split / example index / ...). The mixing function
// is the SplitMix64 finalizer (Steele, Lea & Flood 2014), applied to
// key + counter * golden-gamma, so any substream can be regenerated without
// replaying the ones before it.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <string_view>

#include "tensor.hpp"

namespace ihalab {

inline constexpr std::uint64_t splitmix64_mix(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline constexpr std::uint64_t kGoldenGamma = 0x9e3779b97f4a7c15ULL;

// FNV-1a; used to turn purpose labels into stream tags.
inline constexpr std::uint64_t tag_of(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

class CounterRng {
 public:
  explicit constexpr CounterRng(std::uint64_t key) noexcept : key_(splitmix64_mix(key)) {}

  // Child stream keyed by this stream's key and a tag; independent of how
  // many values were already drawn from the parent.
  constexpr CounterRng substream(std::uint64_t tag) const noexcept {
    return CounterRng(splitmix64_mix(key_ ^ splitmix64_mix(tag + kGoldenGamma)));
  }
  constexpr CounterRng substream(std::string_view label) const noexcept {
    return substream(tag_of(label));
  }

  constexpr std::uint64_t at(std::uint64_t counter) const noexcept {
    return splitmix64_mix(key_ + (counter + 1) * kGoldenGamma);
  }

  constexpr std::uint64_t next_u64() noexcept { return at(counter_++); }

  // Uniform in [0, 1) with 53 bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi] (Lemire rejection).
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) noexcept {
    const std::uint64_t range = static_cast<std::uint64_t>(hi - lo) + 1;
    if (range == 0) return static_cast<std::int64_t>(next_u64());
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % range;
    std::uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return lo + static_cast<std::int64_t>(v % range);
  }

  bool bernoulli(double p) noexcept { return uniform() < p; }

  // Box-Muller; consumes two counters per draw so the stream stays aligned.
  double normal() noexcept {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t counter() const noexcept { return counter_; }
  std::uint64_t key() const noexcept { return key_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

inline Tensor random_normal(Shape shape, CounterRng& rng, double stddev = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = stddev * rng.normal();
  return t;
}

inline Tensor random_uniform(Shape shape, CounterRng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace ihalab

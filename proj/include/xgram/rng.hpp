#pragma once

#include <cstdint>

namespace xgram {

// SplitMix64 constants. Every random draw in the project (synthetic streams,
// parameter init, hash multipliers) goes through these so that runs are
// reproducible across platforms and language bindings.
inline constexpr std::uint64_t kSplitMixGamma = 0x9E3779B97F4A7C15ULL;
inline constexpr std::uint64_t kSplitMixMul1 = 0xBF58476D1CE4E5B9ULL;
inline constexpr std::uint64_t kSplitMixMul2 = 0x94D049BB133111EBULL;

// Stateless avalanche finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * kSplitMixMul1;
  z = (z ^ (z >> 27)) * kSplitMixMul2;
  return z ^ (z >> 31);
}

// Combine several integers into one well-mixed 64-bit key.
constexpr std::uint64_t mix_combine(std::uint64_t a, std::uint64_t b) noexcept {
  return mix64(a ^ (mix64(b) + kSplitMixGamma + (a << 6) + (a >> 2)));
}

class SplitMix64 {
 public:
  explicit constexpr SplitMix64(std::uint64_t seed) noexcept : state_(seed) {}

  constexpr std::uint64_t next() noexcept {
    state_ += kSplitMixGamma;
    return mix64(state_);
  }

  // Uniform in [0, 1) with 53 bits of resolution.
  constexpr double uniform() noexcept {
    return static_cast<double>(next() >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller; the second variate is cached.
  double normal() noexcept;

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace xgram

#pragma once

#include <array>
#include <cstdint>

namespace helix {

/// SplitMix64 step. Used to expand a 64-bit seed into generator state and to
/// derive independent child seeds.
std::uint64_t splitmix64(std::uint64_t& state);

/// xoshiro256** seeded through SplitMix64.
///
/// Stream definition (so other implementations can reproduce it):
///   - state s[0..3] = four successive splitmix64 outputs from `seed`
///   - next_u64: xoshiro256** (rotl(s1 * 5, 7) * 9, then the standard update)
///   - uniform(): (next_u64() >> 11) * 2^-53, in [0, 1)
///   - normal(): Box-Muller on u1 = ((next_u64() >> 11) + 1) * 2^-53 and
///     u2 = uniform(); returns sqrt(-2 ln u1) * cos(2 pi u2). The sine branch
///     is discarded, so every normal consumes exactly two words.
///   - uniform_int(n): rejection sampling, draws x until x < 2^64 - (2^64 mod n),
///     returns x mod n.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  std::uint64_t uniform_int(std::uint64_t n);

  /// Child seed for stream `index`, independent of how far this generator has advanced.
  static std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

  const std::array<std::uint64_t, 4>& state() const { return s_; }

 private:
  std::array<std::uint64_t, 4> s_{};
};

}  // namespace helix

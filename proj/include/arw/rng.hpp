#pragma once

// Random number plumbing.
//
// Two generator families cover the two instruction-source modes:
//  - Philox4x32-10, a counter-based block function keyed per stabilization.
//    Instruction k at site v is a pure function of (run_seed, epoch, v, k),
//    which is what makes stabilization results scheduler-independent bit for
//    bit in literal mode.
//  - xoshiro256++ for sequential draws (collapsed mode, schedulers, drivers).
//
// Seed derivation walks a fixed finalizer chain so that replicas and named
// streams get decorrelated seeds from one master seed.

#include <array>
#include <cmath>
#include <cstdint>

namespace arw::rng {

/// 64-bit avalanche finalizer (the SplitMix64 output stage). Bijective.
inline constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// SplitMix64 step; used only for seeding other generators.
inline std::uint64_t splitmix_next(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  return mix64(state);
}

/// Named sub-streams of one run seed. Values are part of the reproducibility
/// contract: changing them changes every result.
enum class StreamTag : std::uint64_t {
  kReplica = 1,
  kInstructions = 2,
  kDriving = 3,
  kSprinkle = 4,
  kScheduler = 5,
  kInit = 6,
  kProbe = 7,
};

/// Derives an independent seed for (replica, stream) from a master seed.
/// Each argument passes through a full avalanche stage, so neighbouring
/// replica indices or tags share no structure.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t replica, StreamTag tag) {
  std::uint64_t h = mix64(master + 0x8f1bbcdc552a6d28ULL);
  h = mix64(h ^ (0xd1342543de82ef95ULL + replica));
  h = mix64(h ^ (0xaf251af3b0f025b5ULL + static_cast<std::uint64_t>(tag)));
  return h;
}

/// xoshiro256++ (Blackman/Vigna). Sequential generator for everything that
/// does not need counter addressing.
class Xoshiro256 {
 public:
  explicit Xoshiro256(std::uint64_t seed) {
    std::uint64_t sm = seed;
    for (auto& w : s_) w = splitmix_next(sm);
  }

  std::uint64_t next() {
    const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  /// Uniform in [0, n) without modulo bias (Lemire reduction, n <= 2^32).
  std::uint32_t next_below(std::uint32_t n) {
    return std::uint32_t((unsigned __int128)next() * n >> 64);
  }

  /// Uniform double in [0, 1).
  double next_unit() { return double(next() >> 11) * 0x1.0p-53; }

 private:
  static constexpr std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }
  std::array<std::uint64_t, 4> s_{};
};

/// Philox4x32-10 block function (Salmon et al. constants).
struct Philox4x32 {
  static constexpr std::uint32_t kMul0 = 0xD2511F53u;
  static constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
  static constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
  static constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

  static std::array<std::uint32_t, 4> block(std::array<std::uint32_t, 4> ctr,
                                            std::array<std::uint32_t, 2> key) {
    for (int round = 0; round < 10; ++round) {
      const std::uint64_t p0 = std::uint64_t(kMul0) * ctr[0];
      const std::uint64_t p1 = std::uint64_t(kMul1) * ctr[2];
      const std::array<std::uint32_t, 4> nxt = {
          std::uint32_t(p1 >> 32) ^ ctr[1] ^ key[0],
          std::uint32_t(p1),
          std::uint32_t(p0 >> 32) ^ ctr[3] ^ key[1],
          std::uint32_t(p0),
      };
      ctr = nxt;
      key[0] += kWeyl0;
      key[1] += kWeyl1;
    }
    return ctr;
  }

  /// Two independent 64-bit words for a 64-bit key and 128-bit counter.
  static std::array<std::uint64_t, 2> words(std::uint64_t key, std::uint64_t ctr_lo,
                                            std::uint64_t ctr_hi) {
    const auto r = block({std::uint32_t(ctr_lo), std::uint32_t(ctr_lo >> 32),
                          std::uint32_t(ctr_hi), std::uint32_t(ctr_hi >> 32)},
                         {std::uint32_t(key), std::uint32_t(key >> 32)});
    return {std::uint64_t(r[0]) | (std::uint64_t(r[1]) << 32),
            std::uint64_t(r[2]) | (std::uint64_t(r[3]) << 32)};
  }
};

/// Maps a uniform 64-bit word to [0, n).
inline std::uint32_t scale_below(std::uint64_t word, std::uint32_t n) {
  return std::uint32_t((unsigned __int128)word * n >> 64);
}

/// Threshold such that (word < threshold) has probability p, p in [0, 1).
/// p == 1 is not representable here; callers handle that case explicitly.
inline std::uint64_t probability_threshold(double p) {
  if (p <= 0.0) return 0;
  long double scaled = static_cast<long double>(p) * 18446744073709551616.0L;
  if (scaled >= 18446744073709551615.0L) return ~0ULL;
  return static_cast<std::uint64_t>(scaled);
}

/// Poisson sample by Knuth's product-of-uniforms method. Exact for the
/// per-site means used here (t well below 10^2); runtime grows with t.
inline std::uint64_t poisson_knuth(Xoshiro256& rng, double mean) {
  if (mean <= 0.0) return 0;
  const double limit = std::exp(-mean);
  std::uint64_t k = 0;
  double p = 1.0;
  do {
    ++k;
    p *= rng.next_unit();
  } while (p > limit);
  return k - 1;
}

}  // namespace arw::rng

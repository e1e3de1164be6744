#include <doctest.h>

#include <array>
#include <cmath>
#include <cstdint>
#include <set>
#include <unordered_set>

#include "arw/rng.hpp"

using namespace arw;

// Published Philox4x32-10 test vectors (Random123 known-answer set).
TEST_CASE("philox4x32-10 known answers") {
  using P = rng::Philox4x32;

  const auto zero = P::block({0, 0, 0, 0}, {0, 0});
  CHECK(zero == std::array<std::uint32_t, 4>{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u});

  const auto ones = P::block({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu},
                             {0xffffffffu, 0xffffffffu});
  CHECK(ones == std::array<std::uint32_t, 4>{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu});

  const auto pi = P::block({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u},
                           {0xa4093822u, 0x299f31d0u});
  CHECK(pi == std::array<std::uint32_t, 4>{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u});
}

TEST_CASE("philox words are a pure function and counter-sensitive") {
  const auto a = rng::Philox4x32::words(42, 7, 9);
  const auto b = rng::Philox4x32::words(42, 7, 9);
  CHECK(a == b);
  CHECK(rng::Philox4x32::words(42, 8, 9) != a);
  CHECK(rng::Philox4x32::words(42, 7, 10) != a);
  CHECK(rng::Philox4x32::words(43, 7, 9) != a);
}

TEST_CASE("derive_seed distinct across a million replica and tag pairs") {
  std::unordered_set<std::uint64_t> seen;
  seen.reserve(1 << 21);
  for (std::uint64_t r = 0; r < 143000; ++r) {
    for (std::uint64_t tag = 1; tag <= 7; ++tag) {
      seen.insert(rng::derive_seed(12345, r, static_cast<rng::StreamTag>(tag)));
    }
  }
  CHECK(seen.size() == 143000 * 7);
}

TEST_CASE("derive_seed avalanche on the master seed") {
  // Flipping one master bit should flip close to half the output bits.
  rng::Xoshiro256 gen(99);
  double total_flips = 0;
  const int trials = 10000;
  for (int t = 0; t < trials; ++t) {
    const std::uint64_t m = gen.next();
    const int bit = int(gen.next_below(64));
    const std::uint64_t a = rng::derive_seed(m, 3, rng::StreamTag::kDriving);
    const std::uint64_t b = rng::derive_seed(m ^ (1ULL << bit), 3, rng::StreamTag::kDriving);
    total_flips += __builtin_popcountll(a ^ b);
  }
  const double mean_flips = total_flips / trials;
  CHECK(mean_flips > 31.5);
  CHECK(mean_flips < 32.5);
}

TEST_CASE("probability threshold maps to sleep rates") {
  CHECK(rng::probability_threshold(0.5) == 0x8000000000000000ULL);
  CHECK(rng::probability_threshold(0.0) == 0);
  // lambda = 4 -> p = 0.8
  const double p = 4.0 / 5.0;
  const double realized = double(rng::probability_threshold(p)) / 18446744073709551616.0;
  CHECK(realized == doctest::Approx(p).epsilon(1e-12));
}

TEST_CASE("scale_below is unbiased over small ranges") {
  rng::Xoshiro256 gen(7);
  std::array<int, 4> counts{};
  const int n = 400000;
  for (int i = 0; i < n; ++i) counts[rng::scale_below(gen.next(), 4)]++;
  for (const int c : counts) {
    CHECK(std::abs(c - n / 4) < 5 * std::sqrt(double(n) * 0.25 * 0.75));
  }
}

TEST_CASE("poisson sampler matches mean and variance") {
  rng::Xoshiro256 gen(11);
  const double t = 0.7;
  const int n = 200000;
  double sum = 0, sum2 = 0;
  for (int i = 0; i < n; ++i) {
    const double k = double(rng::poisson_knuth(gen, t));
    sum += k;
    sum2 += k * k;
  }
  const double mean = sum / n;
  const double var = sum2 / n - mean * mean;
  CHECK(mean == doctest::Approx(t).epsilon(0.02));
  CHECK(var == doctest::Approx(t).epsilon(0.03));
}

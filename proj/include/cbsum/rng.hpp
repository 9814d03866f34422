#pragma once

#include <cstdint>
#include <random>

namespace cbsum {

// Seeded generator with platform-independent draws (std::mt19937_64 output
// words are pinned by the standard; the distributions below avoid the
// implementation-defined std::uniform_* adaptors).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  // Uniform in [0, 1) with 53-bit resolution.
  double unit() { return static_cast<double>(gen_() >> 11) * (1.0 / 9007199254740992.0); }

  float uniform(float lo, float hi) { return lo + static_cast<float>(unit()) * (hi - lo); }

  // Uniform integer in [0, n).
  int below(int n) { return static_cast<int>(unit() * n); }

  std::uint64_t word() { return gen_(); }

 private:
  std::mt19937_64 gen_;
};

}  // namespace cbsum

#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace layerlens {

// Seeded generator whose bounded draws do not depend on the standard
// library's distribution implementations, so sampled positions and anchors
// are identical across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  // Uniform integer in [0, bound), Lemire's nearly-divisionless method.
  std::uint64_t below(std::uint64_t bound);

  // Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller.
  double normal();

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Chooses `n` distinct elements of `population` uniformly without
// replacement (partial Fisher-Yates). Order of the result follows the draw.
std::vector<std::size_t> sample_without_replacement(std::size_t population,
                                                    std::size_t n, Rng& rng);

}  // namespace layerlens

#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace cseg {

// Seeded generator with platform-independent draws. The standard
// distributions are implementation-defined, so uniform/normal are computed
// here directly from the 64-bit engine output.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  // Uniform integer in [lo, hi].
  int between(int lo, int hi) { return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi - lo) + 1)); }
  bool bernoulli(double p) { return uniform() < p; }
  double normal();

  // Independent stream keyed by this generator's seed and the given keys.
  // Does not advance this generator.
  Rng fork(std::initializer_list<std::uint64_t> keys) const;

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t mix_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> keys);

}  // namespace cseg

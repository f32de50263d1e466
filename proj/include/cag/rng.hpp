#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace cag {

// Seeded 64-bit generator. Derived draws avoid the standard distributions,
// whose output is implementation-defined, so a seed means the same stream on
// every toolchain.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) { reseed({seed}); }
  Rng(std::initializer_list<std::uint64_t> keys) { reseed(keys); }

  void reseed(std::initializer_list<std::uint64_t> keys) {
    std::vector<std::uint32_t> words;
    words.reserve(keys.size() * 2);
    for (std::uint64_t k : keys) {
      words.push_back(static_cast<std::uint32_t>(k & 0xffffffffu));
      words.push_back(static_cast<std::uint32_t>(k >> 32));
    }
    std::seed_seq seq(words.begin(), words.end());
    engine_.seed(seq);
  }

  std::uint64_t next() { return engine_(); }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). n must be positive.
  std::size_t index(std::size_t n) {
    return static_cast<std::size_t>(engine_() % static_cast<std::uint64_t>(n));
  }

  bool bernoulli(double p) { return uniform() < p; }

  template <typename Vec>
  void shuffle(Vec& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = index(i);
      using std::swap;
      swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace cag

#pragma once

#include <cstdint>
#include <random>

namespace iwdd {

// Seeded random source. Independent sub-streams are derived from (seed, index)
// so per-row / per-batch work gives the same draws no matter how it is
// scheduled across threads.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(make_seq(seed, 0, 0)) {}
  Rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t substream = 0)
      : engine_(make_seq(seed, stream + 1, substream)) {}

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform_(engine_); }
  bool bernoulli(double p) { return uniform_(engine_) < p; }
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }
  std::mt19937_64& engine() { return engine_; }

 private:
  static std::mt19937_64 make_seq(std::uint64_t seed, std::uint64_t stream, std::uint64_t sub) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                      static_cast<std::uint32_t>(sub), static_cast<std::uint32_t>(sub >> 32)};
    return std::mt19937_64(seq);
  }

  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace iwdd

#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace dsaa {

/// Seeded generator. Independent components draw from labeled streams forked
/// off one run seed, so adding a stream never shifts the others.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);
  static Rng stream(std::uint64_t seed, std::string_view label);

  double normal(double mean = 0.0, double stddev = 1.0);
  double uniform(double lo = 0.0, double hi = 1.0);
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n);
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace dsaa

#pragma once

#include "avmoe/core/types.hpp"

#include <cstdint>
#include <random>
#include <string_view>

namespace avmoe {

/// Mixes a base seed with a stream name so that independently named streams
/// (data, corruption, model-init, ...) never share a sequence.
std::uint64_t derive_seed(std::uint64_t base, std::string_view stream);
std::uint64_t derive_seed(std::uint64_t base, std::string_view stream, std::uint64_t index);

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }
  /// Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }
  bool bernoulli(double p) { return uniform() < p; }

  Matrix normal_matrix(Index rows, Index cols, double stddev = 1.0);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

/// Random matrix whose rows (if rows <= cols) or columns are orthonormal.
Matrix random_orthonormal(Index rows, Index cols, Rng& rng);

}  // namespace avmoe

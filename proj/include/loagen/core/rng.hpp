#pragma once

#include <cstdint>
#include <random>

#include "loagen/core/tensor.hpp"

namespace loagen {

// All stochastic draws in the project go through a caller-owned Rng so every
// training step and sampling run is reproducible from a single seed.
class Rng {
public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::mt19937_64& engine() { return engine_; }

  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }

  // inclusive bounds
  std::int64_t randint(std::int64_t lo, std::int64_t hi) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
  }

  bool bernoulli(double p) {
    return std::bernoulli_distribution(p)(engine_);
  }

  Tensor randn(std::vector<std::size_t> shape, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = normal(0.0, stddev);
    return t;
  }

  // Derive an independent stream, e.g. one per parallel work item.
  Rng fork() { return Rng(engine_()); }

private:
  std::mt19937_64 engine_;
};

}  // namespace loagen

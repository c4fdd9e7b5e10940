#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "csavae/matrix.hpp"

namespace csavae {

// The single entry point for randomness. A zero source returns 0 for every
// continuous draw and keeps every unit under dropout, which turns the
// stochastic paths into their deterministic means.
class NoiseSource {
 public:
  explicit NoiseSource(std::uint64_t seed) : engine_(seed) {}
  static NoiseSource zero();

  bool is_zero() const { return zero_; }

  double uniform();            // [0, 1)
  double uniform(double lo, double hi);
  double normal();             // N(0, 1)
  double normal(double mean, double stddev);
  double gumbel();             // standard Gumbel
  bool bernoulli(double p);
  std::uint64_t poisson(double rate);
  std::uint64_t next_u64();

  std::mt19937_64& engine() { return engine_; }

  // Text round-trip of the engine state for resumable training.
  std::string state() const;
  void restore(const std::string& state);

 private:
  NoiseSource() = default;
  std::mt19937_64 engine_{0};
  bool zero_ = false;
};

// Two independent standard-Gumbel draws per adjacency entry.
struct GumbelNoise {
  Matrix first;
  Matrix second;

  static GumbelNoise draw(NoiseSource& noise, std::size_t k);
  static GumbelNoise zeros(std::size_t k);
};

}  // namespace csavae

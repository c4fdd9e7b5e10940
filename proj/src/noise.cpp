#include "csavae/noise.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace csavae {

NoiseSource NoiseSource::zero() {
  NoiseSource s;
  s.zero_ = true;
  return s;
}

double NoiseSource::uniform() {
  if (zero_) return 0.0;
  return std::uniform_real_distribution<double>(0.0, 1.0)(engine_);
}

double NoiseSource::uniform(double lo, double hi) {
  if (zero_) return 0.0;
  return std::uniform_real_distribution<double>(lo, hi)(engine_);
}

double NoiseSource::normal() {
  if (zero_) return 0.0;
  return std::normal_distribution<double>(0.0, 1.0)(engine_);
}

double NoiseSource::normal(double mean, double stddev) {
  if (zero_) return mean;
  return std::normal_distribution<double>(mean, stddev)(engine_);
}

double NoiseSource::gumbel() {
  if (zero_) return 0.0;
  // Keep u strictly inside (0, 1) so both logs are finite.
  const double u = std::clamp(uniform(), 1e-300, 1.0 - 1e-16);
  return -std::log(-std::log(u));
}

bool NoiseSource::bernoulli(double p) {
  if (zero_) return true;
  return uniform() < p;
}

std::uint64_t NoiseSource::poisson(double rate) {
  if (zero_) return 0;
  if (!(rate > 0.0)) throw std::domain_error("poisson rate must be positive");
  return std::poisson_distribution<std::uint64_t>(rate)(engine_);
}

std::uint64_t NoiseSource::next_u64() {
  if (zero_) return 0;
  return engine_();
}

std::string NoiseSource::state() const {
  std::ostringstream os;
  os << zero_ << ' ' << engine_;
  return os.str();
}

void NoiseSource::restore(const std::string& state) {
  std::istringstream is(state);
  is >> zero_ >> engine_;
  if (!is) throw std::runtime_error("NoiseSource::restore: malformed state");
}

GumbelNoise GumbelNoise::draw(NoiseSource& noise, std::size_t k) {
  GumbelNoise g{Matrix(k, k), Matrix(k, k)};
  for (std::size_t i = 0; i < k * k; ++i) {
    g.first.flat()[i] = noise.gumbel();
    g.second.flat()[i] = noise.gumbel();
  }
  return g;
}

GumbelNoise GumbelNoise::zeros(std::size_t k) { return {Matrix(k, k), Matrix(k, k)}; }

}  // namespace csavae

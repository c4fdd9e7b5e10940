#pragma once

#include <cstdint>
#include <vector>

#include "csavae/matrix.hpp"
#include "csavae/model.hpp"
#include "json.hpp"

namespace csavae {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-6;  // L2 term added to the gradient
};

// Adam over every model parameter, moments kept per parameter tensor.
class Adam {
 public:
  Adam(AdamConfig cfg, const std::vector<Param>& params);

  void step(std::vector<Param>& params);

  std::uint64_t steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

  // Moments and step count, for resumable checkpoints.
  const std::vector<Matrix>& first_moments() const { return m_; }
  const std::vector<Matrix>& second_moments() const { return v_; }
  void restore(std::uint64_t steps, std::vector<Matrix> m, std::vector<Matrix> v);

 private:
  AdamConfig cfg_;
  std::uint64_t t_ = 0;
  std::vector<Matrix> m_, v_;
};

}  // namespace csavae

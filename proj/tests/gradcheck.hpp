#pragma once

// Central finite differences of the batch objective against the analytic
// backward pass, aggregated per parameter group.

#include <cmath>
#include <string>
#include <vector>

#include "csavae/model.hpp"
#include "csavae/objective.hpp"

namespace testing {

struct GroupError {
  std::string group;
  double relative = 0.0;  // ||numeric - analytic|| / max(||numeric||, ||analytic||, floor)
  double analytic_norm = 0.0;
  std::size_t entries = 0;
};

inline std::vector<GroupError> gradient_check(const csavae::ModelConfig& cfg, std::uint64_t seed,
                                              const csavae::LossWeights& weights, double h = 1e-6) {
  using namespace csavae;
  CsaVae m(cfg, seed);
  // Nudge the graph logits off their uniform start so every branch of the
  // relaxed adjacency carries gradient.
  NoiseSource jitter(seed + 1);
  for (double& v : m.param(CsaVae::kLogits).value.flat()) v += jitter.uniform(-0.5, 0.5);

  std::vector<SparseRow> rows;
  NoiseSource pick(seed + 2);
  for (int u = 0; u < 3; ++u) {
    std::vector<std::uint32_t> items;
    for (std::uint32_t i = 0; i < cfg.n_items; ++i)
      if (pick.bernoulli(0.35)) items.push_back(i);
    if (items.empty()) items.push_back(static_cast<std::uint32_t>(u % cfg.n_items));
    rows.push_back(SparseRow::from_items(items));
  }
  // Gumbel, reparameterization and dropout draws are frozen for the check.
  NoiseSource ns(seed + 3);
  const ForwardNoise noise = ForwardNoise::draw(ns, rows, cfg, Mode::train);

  auto loss = [&] {
    const BatchTrace t = m.forward(rows, noise, Mode::train);
    return batch_loss(t, rows, weights, cfg).breakdown.total;
  };
  m.zero_grad();
  {
    const BatchTrace t = m.forward(rows, noise, Mode::train);
    m.backward(t, batch_loss(t, rows, weights, cfg).seeds);
  }

  std::vector<GroupError> out;
  for (const auto& [group, names] : parameter_groups(cfg)) {
    double diff2 = 0.0, num2 = 0.0, an2 = 0.0;
    std::size_t count = 0;
    for (const auto& name : names) {
      Param& p = m.param(name);
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double orig = p.value.flat()[i];
        p.value.flat()[i] = orig + h;
        const double up = loss();
        p.value.flat()[i] = orig - h;
        const double down = loss();
        p.value.flat()[i] = orig;
        const double numeric = (up - down) / (2 * h);
        const double analytic = p.grad.flat()[i];
        diff2 += (numeric - analytic) * (numeric - analytic);
        num2 += numeric * numeric;
        an2 += analytic * analytic;
        ++count;
      }
    }
    const double denom = std::max({std::sqrt(num2), std::sqrt(an2), 1e-6});
    out.push_back({group, std::sqrt(diff2) / denom, std::sqrt(an2), count});
  }
  return out;
}

}  // namespace testing

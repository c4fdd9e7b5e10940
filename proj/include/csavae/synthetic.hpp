#pragma once

// Four-confounder synthetic benchmark with a known causal graph
// c1 -> c2, c2 -> c3, c2 -> c4 blended into item observations by a random
// two-layer map.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "csavae/data.hpp"
#include "csavae/matrix.hpp"
#include "json.hpp"

namespace csavae {

inline constexpr std::uint64_t kDefaultSyntheticSeed = 7;

struct SyntheticParams {
  std::vector<double> noise_mean;      // 4, exogenous means ~ U[-3, 3]
  std::vector<double> noise_variance;  // 4, ~ U[0.01, 4]
  std::vector<double> u;               // per user, N(0, 1)
  std::vector<double> poisson_rate;    // per user, softplus(u) + 0.5
  Matrix weights;                      // users x 3: w2, w3, w4
  Matrix noise;                        // users x 4 exogenous draws
  Matrix mlp_w1;                       // 5 x hidden
  Matrix mlp_w2;                       // hidden x items
  std::size_t hidden = 64;
  double positive_quantile = 0.9;

  nlohmann::json to_json() const;
};

struct SyntheticDataset {
  Matrix observations;    // users x items, real valued
  Matrix binary;          // top 10% per user set to 1
  Matrix confounders;     // users x 4
  Matrix true_adjacency;  // 4 x 4
  SyntheticParams params;
  std::uint64_t seed = 0;
};

Matrix synthetic_true_adjacency();

SyntheticDataset synthetic_generate(std::uint64_t seed, std::size_t n_users = 300,
                                    std::size_t n_items = 500);

// Binary observations as rating records (user "u<i>", item "i<j>").
std::vector<RatingRecord> synthetic_records(const SyntheticDataset& ds);

// Writes observations, binary matrix, true graph, generator parameters and a
// processed split (split/ with its manifest) under dir.
void save_synthetic(const SyntheticDataset& ds, const std::filesystem::path& dir,
                    const SplitFractions& fractions = {});

}  // namespace csavae

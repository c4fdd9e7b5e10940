#include "csavae/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>

#include "csavae/errors.hpp"
#include "csavae/noise.hpp"

namespace csavae {

namespace fs = std::filesystem;

namespace {

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

nlohmann::json matrix_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t r = 0; r < m.rows(); ++r)
    rows.push_back(std::vector<double>(m.row(r).begin(), m.row(r).end()));
  return rows;
}

void write_dense(const fs::path& p, const Matrix& m) {
  std::ofstream out(p);
  if (!out) throw DataError("synth: cannot write " + p.string());
  out << std::setprecision(17);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) out << (c ? "\t" : "") << m(r, c);
    out << '\n';
  }
}

}  // namespace

nlohmann::json SyntheticParams::to_json() const {
  return {{"noise_mean", noise_mean},
          {"noise_variance", noise_variance},
          {"u", u},
          {"poisson_rate", poisson_rate},
          {"weights", matrix_json(weights)},
          {"noise", matrix_json(noise)},
          {"mlp_hidden", hidden},
          {"mlp_w1", matrix_json(mlp_w1)},
          {"mlp_w2", matrix_json(mlp_w2)},
          {"positive_quantile", positive_quantile}};
}

Matrix synthetic_true_adjacency() {
  Matrix a(4, 4);
  a(0, 1) = 1.0;
  a(1, 2) = 1.0;
  a(1, 3) = 1.0;
  return a;
}

SyntheticDataset synthetic_generate(std::uint64_t seed, std::size_t n_users, std::size_t n_items) {
  NoiseSource rng(seed);
  SyntheticDataset ds;
  ds.seed = seed;
  ds.true_adjacency = synthetic_true_adjacency();
  SyntheticParams& p = ds.params;

  for (int i = 0; i < 4; ++i) p.noise_mean.push_back(rng.uniform(-3.0, 3.0));
  for (int i = 0; i < 4; ++i) p.noise_variance.push_back(rng.uniform(0.01, 4.0));

  p.u.resize(n_users);
  p.poisson_rate.resize(n_users);
  p.weights = Matrix(n_users, 3);
  p.noise = Matrix(n_users, 4);
  ds.confounders = Matrix(n_users, 4);
  for (std::size_t s = 0; s < n_users; ++s) {
    p.u[s] = rng.normal();
    p.poisson_rate[s] = softplus(p.u[s]) + 0.5;
    for (int j = 0; j < 3; ++j) p.weights(s, j) = static_cast<double>(rng.poisson(p.poisson_rate[s]));
    for (int i = 0; i < 4; ++i)
      p.noise(s, i) = rng.normal(p.noise_mean[i], std::sqrt(p.noise_variance[i]));
    auto c = ds.confounders.row(s);
    c[0] = p.noise(s, 0);
    c[1] = p.weights(s, 0) * c[0] + p.noise(s, 1);
    c[2] = p.weights(s, 1) * c[1] + p.noise(s, 2);
    c[3] = p.weights(s, 2) * c[1] + p.noise(s, 3);
  }

  p.mlp_w1 = Matrix(5, p.hidden);
  for (double& v : p.mlp_w1.flat()) v = rng.normal();
  p.mlp_w2 = Matrix(p.hidden, n_items);
  for (double& v : p.mlp_w2.flat()) v = rng.normal();

  ds.observations = Matrix(n_users, n_items);
  ds.binary = Matrix(n_users, n_items);
  const auto n_pos = static_cast<std::size_t>(
      std::lround((1.0 - p.positive_quantile) * static_cast<double>(n_items)));
  std::vector<double> h(p.hidden);
  std::vector<std::size_t> order(n_items);
  for (std::size_t s = 0; s < n_users; ++s) {
    const double in[5] = {ds.confounders(s, 0), ds.confounders(s, 1), ds.confounders(s, 2),
                          ds.confounders(s, 3), p.u[s]};
    for (std::size_t j = 0; j < p.hidden; ++j) {
      double a = 0.0;
      for (int i = 0; i < 5; ++i) a += in[i] * p.mlp_w1(i, j);
      h[j] = std::tanh(a);
    }
    auto obs = ds.observations.row(s);
    for (std::size_t j = 0; j < p.hidden; ++j)
      for (std::size_t t = 0; t < n_items; ++t) obs[t] += h[j] * p.mlp_w2(j, t);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return obs[a] > obs[b]; });
    for (std::size_t r = 0; r < n_pos; ++r) ds.binary(s, order[r]) = 1.0;
  }
  return ds;
}

std::vector<RatingRecord> synthetic_records(const SyntheticDataset& ds) {
  std::vector<RatingRecord> out;
  const int wu = static_cast<int>(std::to_string(ds.binary.rows()).size());
  const int wi = static_cast<int>(std::to_string(ds.binary.cols()).size());
  auto pad = [](std::size_t v, int w) {
    std::string s = std::to_string(v);
    return std::string(static_cast<std::size_t>(w) - s.size(), '0') + s;
  };
  for (std::size_t s = 0; s < ds.binary.rows(); ++s)
    for (std::size_t t = 0; t < ds.binary.cols(); ++t)
      if (ds.binary(s, t) != 0.0) out.push_back({"u" + pad(s, wu), "i" + pad(t, wi), 1.0, {}});
  return out;
}

void save_synthetic(const SyntheticDataset& ds, const fs::path& dir,
                    const SplitFractions& fractions) {
  fs::create_directories(dir);
  write_dense(dir / "observations.tsv", ds.observations);
  write_dense(dir / "binary.tsv", ds.binary);
  write_dense(dir / "confounders.tsv", ds.confounders);
  {
    std::ofstream out(dir / "true_graph.json");
    nlohmann::json edges = nlohmann::json::array();
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j)
        if (ds.true_adjacency(i, j) != 0.0) edges.push_back({{"from", i}, {"to", j}});
    out << nlohmann::json{{"k", 4}, {"true_adjacency", matrix_json(ds.true_adjacency)},
                          {"edges", edges}}
               .dump(2)
        << '\n';
  }
  {
    std::ofstream out(dir / "generator_params.json");
    out << nlohmann::json{{"seed", ds.seed}, {"params", ds.params.to_json()}}.dump() << '\n';
  }
  SplitDataset split_ds = split(synthetic_records(ds), fractions, ds.seed);
  split_ds.provenance = {{"source", "synthetic"}, {"seed", ds.seed}};
  save_split(split_ds, dir / "split");
}

}  // namespace csavae

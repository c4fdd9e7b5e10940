#include "doctest.h"

#include "csavae/errors.hpp"
#include "csavae/noise.hpp"
#include "csavae/sem.hpp"
#include "support.hpp"

using namespace csavae;
using namespace csavae::sem;
using testing::Gen;

namespace {

// tr((I + (c/k) A.A)^k) - k by repeated naive multiplication.
double dag_oracle(const Matrix& a, double c) {
  const std::size_t k = a.rows();
  Matrix base = Matrix::identity(k);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) base(i, j) += c / k * a(i, j) * a(i, j);
  Matrix p = Matrix::identity(k);
  for (std::size_t s = 0; s < k; ++s) p = testing::matmul(p, base);
  double tr = 0.0;
  for (std::size_t i = 0; i < k; ++i) tr += p(i, i);
  return tr - static_cast<double>(k);
}

GumbelNoise fixed_noise(std::size_t k, double first, double second) {
  GumbelNoise n = GumbelNoise::zeros(k);
  n.first.fill(first);
  n.second.fill(second);
  return n;
}

ConfounderSet set_of(Matrix m) { return {std::move(m), ConfounderRole::structured}; }

Matrix synthetic_truth() {
  Matrix a(4, 4);
  a(0, 1) = a(1, 2) = a(1, 3) = 1.0;
  return a;
}

}  // namespace

TEST_SUITE("gumbel_sigmoid") {
  TEST_CASE("zero noise reduces to sigmoid(logit / tau)") {
    Matrix logits(2, 2, 0.2);
    const auto a = gumbel_sigmoid(logits, 0.2, GumbelNoise::zeros(2));
    CHECK(a.values(0, 1) == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-12));
    CHECK(a.values(0, 0) == 0.0);
    CHECK(a.values(1, 1) == 0.0);
  }

  TEST_CASE("large logits saturate") {
    Matrix logits(3, 3, 1e6);
    const auto a = gumbel_sigmoid(logits, 0.7, fixed_noise(3, -2.0, 5.0));
    CHECK(a.values(0, 2) == doctest::Approx(1.0));
  }

  TEST_CASE("zero logit, unit temperature averages to one half") {
    NoiseSource rng(11);
    Matrix logits(2, 2);
    double sum = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) sum += gumbel_sigmoid(logits, 1.0, GumbelNoise::draw(rng, 2)).values(0, 1);
    // Standard error of a [0,1] variable is at most 0.5/sqrt(n).
    CHECK(std::fabs(sum / n - 0.5) < 4 * 0.5 / std::sqrt(double(n)));
  }

  TEST_CASE("temperature must be positive") {
    CHECK_THROWS_AS(gumbel_sigmoid(Matrix(2, 2), 0.0, GumbelNoise::zeros(2)), DomainError);
    CHECK_THROWS_AS(gumbel_sigmoid(Matrix(2, 2), -1.0, GumbelNoise::zeros(2)), DomainError);
  }

  TEST_CASE("property: open interval, monotone in the logit, hard limit as tau shrinks") {
    Gen g(21);
    NoiseSource rng(22);
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t k = g.index(2, 6);
      const Matrix logits = g.matrix(k, k, -3, 3);
      const GumbelNoise noise = GumbelNoise::draw(rng, k);
      const double tau = g.real(0.3, 3.0);
      const auto a = gumbel_sigmoid(logits, tau, noise);
      Matrix bumped = logits;
      for (double& v : bumped.flat()) v += 0.25;
      const auto b = gumbel_sigmoid(bumped, tau, noise);
      const auto cold = gumbel_sigmoid(logits, 1e-4, noise);
      for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j) {
          if (i == j) continue;
          CHECK(a.values(i, j) > 0.0);
          CHECK(a.values(i, j) < 1.0);
          CHECK(b.values(i, j) > a.values(i, j));
          const double margin = logits(i, j) + noise.first(i, j) - noise.second(i, j);
          if (std::fabs(margin) > 1e-2) CHECK(cold.values(i, j) == doctest::Approx(margin > 0 ? 1.0 : 0.0));
        }
    }
  }

  TEST_CASE("hard mode thresholds at one half") {
    Matrix logits = Matrix::from_rows({{0, 0.3, -0.3}, {2, 0, -2}, {0.01, -0.01, 0}});
    const auto h = hard_adjacency(logits);
    CHECK(h.hard);
    CHECK(h.values == Matrix::from_rows({{0, 1, 0}, {1, 0, 0}, {1, 0, 0}}));
  }
}

TEST_SUITE("dag_penalty") {
  TEST_CASE("worked examples") {
    CHECK(dag_penalty(Matrix::from_rows({{0, 1}, {0, 0}}), 1.0) == 0.0);
    const Matrix cyc = Matrix::from_rows({{0, 1}, {1, 0}});
    CHECK(dag_penalty(cyc, 1.0) == doctest::Approx(dag_oracle(cyc, 1.0)).epsilon(1e-12));
    CHECK(dag_oracle(cyc, 1.0) == doctest::Approx(0.5));
    CHECK(dag_penalty(synthetic_truth(), 1.0) == 0.0);
  }

  TEST_CASE("domain errors") {
    CHECK_THROWS_AS(dag_penalty(Matrix::from_rows({{0, -0.1}, {0, 0}})), DomainError);
    CHECK_THROWS_AS(dag_penalty(Matrix(2, 2), 0.0), DomainError);
  }

  TEST_CASE("property: zero exactly on acyclic binary graphs") {
    Gen g(31);
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t k = g.index(3, 6);
      const Matrix a = g.binary_graph(k, g.real(0.05, 0.5));
      const double h = dag_penalty(a, 1.0);
      if (testing::has_cycle(a))
        CHECK(h > 1e-9);
      else
        CHECK(h == 0.0);
      CHECK(h == doctest::Approx(dag_oracle(a, 1.0)).epsilon(1e-9));
    }
  }

  TEST_CASE("gradient matches finite differences") {
    Gen g(32);
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t k = g.index(2, 5);
      const Matrix a = g.matrix(k, k, 0.0, 1.0);
      const double c = g.real(0.5, 2.0);
      const Matrix grad = dag_penalty_grad(a, c);
      for (std::size_t i = 0; i < k * k; ++i) {
        Matrix p = a, m = a;
        p.flat()[i] += 1e-6;
        m.flat()[i] -= 1e-6;
        const double fd = (dag_oracle(p, c) - dag_oracle(m, c)) / 2e-6;
        CHECK(grad.flat()[i] == doctest::Approx(fd).epsilon(1e-6).scale(1.0));
      }
    }
  }
}

TEST_SUITE("structural equations") {
  TEST_CASE("exogenous recovery and SCM solve, two-node chain") {
    RelaxedAdjacency adj{Matrix::from_rows({{0, 1}, {0, 0}}), true};
    const auto eps = recover_exogenous(set_of(Matrix::from_rows({{1}, {3}})), adj);
    CHECK(eps.role == ConfounderRole::exogenous);
    CHECK(eps.vectors == Matrix::from_rows({{1}, {2}}));
    const auto m = solve_scm(set_of(Matrix::from_rows({{1}, {2}})), adj);
    CHECK_FALSE(m.ridge_engaged);
    CHECK(testing::max_abs_diff(m.values, Matrix::from_rows({{1}, {3}})) < 1e-15);
  }

  TEST_CASE("empty graph is the identity") {
    Gen g(41);
    const Matrix c = g.matrix(3, 5);
    RelaxedAdjacency none{Matrix(3, 3), true};
    CHECK(recover_exogenous(set_of(c), none).vectors == c);
    CHECK(testing::max_abs_diff(solve_scm(set_of(c), none).values, c) < 1e-15);
  }

  TEST_CASE("cyclic all-ones adjacency takes the ridge path") {
    Matrix ones(3, 3, 1.0);
    for (std::size_t i = 0; i < 3; ++i) ones(i, i) = 0.0;
    // I - A^T for the all-ones 3-node graph has eigenvalue 1 - 2 = -1, which is
    // invertible; with two nodes the eigenvalue 1 - 1 = 0 makes it singular.
    RelaxedAdjacency two{Matrix::from_rows({{0, 1}, {1, 0}}), true};
    const auto m = solve_scm(set_of(Matrix::from_rows({{1, 2}, {3, 4}})), two);
    CHECK(m.ridge_engaged);
    for (double v : m.values.flat()) CHECK(std::isfinite(v));
    const auto m3 = solve_scm(set_of(Matrix(3, 2, 1.0)), {ones, true});
    for (double v : m3.values.flat()) CHECK(std::isfinite(v));
  }

  TEST_CASE("property: recover o solve is the identity on random DAGs") {
    Gen g(42);
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t k = g.index(1, 8), d = g.index(1, 16);
      RelaxedAdjacency adj{g.dag(k, 0.5, 0.0, 1.0), false};
      const Matrix eps = g.matrix(k, d, -3, 3);
      const auto m = solve_scm(set_of(eps), adj);
      REQUIRE_FALSE(m.ridge_engaged);
      CHECK(testing::max_abs_diff(recover_exogenous(set_of(m.values), adj).vectors, eps) < 1e-9);
    }
  }

  TEST_CASE("composition and masking") {
    RelaxedAdjacency global{Matrix::from_rows({{0, 1}, {0, 0}}), true};
    LocalGraph local{Matrix::from_rows({{0.3, 0.8}, {0.5, 0.1}})};
    CHECK(causal_compose(global, local) == Matrix::from_rows({{0, 0.8}, {0, 0}}));
    CHECK(causal_compose(global, {Matrix(2, 2, 1.0)}) == global.values);
    CHECK(causal_compose({Matrix(2, 2), true}, local) == Matrix(2, 2));

    const Matrix g4 = synthetic_truth();
    CHECK(apply_mask(g4, MaskGraph::all_ones(4)) == g4);
    CHECK(apply_mask(g4, MaskGraph::all_zeros(4)) == Matrix(4, 4));
    Matrix expect(4, 4);
    expect(0, 1) = 1.0;
    CHECK(apply_mask(g4, MaskGraph::without_parent(4, 1)) == expect);
    CHECK_THROWS_AS(MaskGraph::from_matrix(Matrix::from_rows({{0, 0.5}, {1, 0}})), DomainError);
  }

  TEST_CASE("property: masking is idempotent") {
    Gen g(43);
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t k = g.index(1, 6);
      const Matrix ug = g.matrix(k, k);
      const MaskGraph m = MaskGraph::from_matrix(g.binary_graph(k, 0.5));
      const Matrix once = apply_mask(ug, m);
      CHECK(apply_mask(once, m) == once);
      CHECK(apply_mask(ug, MaskGraph::all_ones(k)) == ug);
    }
  }

  TEST_CASE("reconstruction examples") {
    RelaxedAdjacency chain{Matrix::from_rows({{0, 1}, {0, 0}}), true};
    const ConfounderSet eps = set_of(Matrix::from_rows({{1}, {2}}));
    const auto lin = reconstruct_confounders(chain.values, eps, chain, Nonlinearity::identity);
    CHECK(lin.vectors == Matrix::from_rows({{1}, {3}}));

    Gen g(44);
    const Matrix e = g.matrix(3, 4);
    RelaxedAdjacency adj{g.dag(3, 1.0), false};
    const auto roots = reconstruct_confounders(Matrix(3, 3), set_of(e), adj, Nonlinearity::sigmoid);
    for (std::size_t i = 0; i < e.size(); ++i)
      CHECK(roots.vectors.flat()[i] == sigmoid(e.flat()[i]));

    const auto half = reconstruct_confounders(Matrix(2, 2), set_of(Matrix(2, 3)), chain,
                                              Nonlinearity::sigmoid);
    for (double v : half.vectors.flat()) CHECK(v == 0.5);
  }

  TEST_CASE("property: entries outside the adjacency support are ignored") {
    Gen g(45);
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t k = g.index(2, 6), d = g.index(1, 5);
      RelaxedAdjacency adj{g.dag(k, 0.5), false};
      const Matrix eps = g.matrix(k, d);
      Matrix masked = g.matrix(k, k);
      const auto base = reconstruct_confounders(masked, set_of(eps), adj, Nonlinearity::sigmoid);
      for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j)
          if (adj.values(i, j) == 0.0) masked(i, j) = g.real(-5, 5);
      const auto other = reconstruct_confounders(masked, set_of(eps), adj, Nonlinearity::sigmoid);
      CHECK(other.vectors == base.vectors);
    }
  }

  TEST_CASE("repeated calls are bit-identical") {
    Gen g(46);
    const Matrix logits = g.matrix(4, 4, -2, 2);
    NoiseSource a(5), b(5);
    CHECK(gumbel_sigmoid(logits, 0.2, GumbelNoise::draw(a, 4)).values ==
          gumbel_sigmoid(logits, 0.2, GumbelNoise::draw(b, 4)).values);
    RelaxedAdjacency adj{g.dag(4, 0.6), false};
    const Matrix eps = g.matrix(4, 3);
    CHECK(solve_scm(set_of(eps), adj).values == solve_scm(set_of(eps), adj).values);
  }
}

TEST_SUITE("graph export") {
  TEST_CASE("document shape and round trip") {
    Matrix logits(4, 4, -5.0);
    logits(0, 1) = logits(1, 2) = logits(1, 3) = 5.0;
    const auto doc = export_graph({logits});
    CHECK(doc["k"] == 4);
    CHECK(doc["threshold"] == 0.5);
    CHECK(doc["edges"].size() == 12);
    CHECK(graph_from_document(doc) == synthetic_truth());

    const auto single = export_graph(GlobalGraphParams::all_ones(1));
    CHECK(single["edges"].empty());
  }
}

#include "csavae/sem.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "csavae/errors.hpp"
#include "csavae/kernels.hpp"

namespace csavae::sem {
namespace {

void require_square(const Matrix& m, const char* what) {
  if (m.rows() != m.cols() || m.rows() == 0) {
    throw std::invalid_argument(std::string(what) + ": expected a non-empty square matrix, got " +
                                shape_string(m));
  }
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.cols());
  kernels::gemm(kernels::Trans::no, kernels::Trans::no, a.rows(), b.cols(), a.cols(), a.data(),
                a.cols(), b.data(), b.cols(), out.data(), out.cols());
  return out;
}

double norm1(const Matrix& m) {
  double best = 0.0;
  for (std::size_t c = 0; c < m.cols(); ++c) {
    double s = 0.0;
    for (std::size_t r = 0; r < m.rows(); ++r) s += std::abs(m(r, c));
    best = std::max(best, s);
  }
  return best;
}

}  // namespace

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

GlobalGraphParams GlobalGraphParams::all_ones(std::size_t k) {
  if (k == 0) throw std::invalid_argument("GlobalGraphParams: k must be >= 1");
  return {Matrix(k, k, 1.0)};
}

MaskGraph MaskGraph::all_ones(std::size_t k) { return MaskGraph(Matrix(k, k, 1.0)); }
MaskGraph MaskGraph::all_zeros(std::size_t k) { return MaskGraph(Matrix(k, k, 0.0)); }

MaskGraph MaskGraph::from_matrix(Matrix mask) {
  require_square(mask, "MaskGraph");
  for (double v : mask.flat()) {
    if (v != 0.0 && v != 1.0) throw DomainError("mask entries must be 0 or 1");
  }
  return MaskGraph(std::move(mask));
}

MaskGraph MaskGraph::without_parent(std::size_t k, std::size_t node) {
  if (node >= k) throw std::out_of_range("MaskGraph::without_parent: node out of range");
  Matrix m(k, k, 1.0);
  for (std::size_t j = 0; j < k; ++j) m(node, j) = 0.0;
  return MaskGraph(std::move(m));
}

bool MaskGraph::is_all_ones() const {
  return std::all_of(mask_.flat().begin(), mask_.flat().end(), [](double v) { return v == 1.0; });
}

RelaxedAdjacency gumbel_sigmoid(const Matrix& logits, double tau, const GumbelNoise& noise,
                                bool hard) {
  if (!(tau > 0.0)) throw DomainError("gumbel_sigmoid: temperature must be positive");
  require_square(logits, "gumbel_sigmoid");
  require_same_shape(logits, noise.first, "gumbel_sigmoid noise");
  require_same_shape(logits, noise.second, "gumbel_sigmoid noise");
  const std::size_t k = logits.rows();
  RelaxedAdjacency out{Matrix(k, k), hard};
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      if (i == j) continue;
      const double s = sigmoid((logits(i, j) + noise.first(i, j) - noise.second(i, j)) / tau);
      out.values(i, j) = hard ? (s > kEdgeThreshold ? 1.0 : 0.0) : s;
    }
  }
  return out;
}

Matrix gumbel_sigmoid_backward(const RelaxedAdjacency& sample, double tau, const Matrix& grad) {
  require_same_shape(sample.values, grad, "gumbel_sigmoid_backward");
  const std::size_t k = sample.k();
  Matrix out(k, k);
  if (sample.hard) return out;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      if (i == j) continue;
      const double s = sample.values(i, j);
      out(i, j) = grad(i, j) * s * (1.0 - s) / tau;
    }
  }
  return out;
}

Matrix edge_probabilities(const Matrix& logits) {
  require_square(logits, "edge_probabilities");
  const std::size_t k = logits.rows();
  Matrix p(k, k);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j)
      if (i != j) p(i, j) = sigmoid(logits(i, j));
  return p;
}

RelaxedAdjacency hard_adjacency(const Matrix& logits) {
  Matrix p = edge_probabilities(logits);
  for (double& v : p.flat()) v = v > kEdgeThreshold ? 1.0 : 0.0;
  return {std::move(p), true};
}

namespace {

Matrix dag_base(const Matrix& adj, double c) {
  require_square(adj, "dag_penalty");
  if (!(c > 0.0)) throw DomainError("dag_penalty: c must be positive");
  for (double v : adj.flat()) {
    if (v < 0.0) throw DomainError("dag_penalty: adjacency must be nonnegative");
  }
  const std::size_t k = adj.rows();
  Matrix b = Matrix::identity(k);
  const double scale = c / static_cast<double>(k);
  for (std::size_t i = 0; i < k * k; ++i) b.flat()[i] += scale * adj.flat()[i] * adj.flat()[i];
  return b;
}

Matrix power(const Matrix& b, std::size_t p) {
  Matrix out = Matrix::identity(b.rows());
  for (std::size_t i = 0; i < p; ++i) out = matmul(out, b);
  return out;
}

}  // namespace

double dag_penalty(const Matrix& adj, double c) {
  const Matrix b = dag_base(adj, c);
  const std::size_t k = adj.rows();
  const Matrix bk = power(b, k);
  double trace = 0.0;
  for (std::size_t i = 0; i < k; ++i) trace += bk(i, i);
  return trace - static_cast<double>(k);
}

Matrix dag_penalty_grad(const Matrix& adj, double c) {
  const Matrix b = dag_base(adj, c);
  const std::size_t k = adj.rows();
  // d tr(B^k)/dB = k (B^{k-1})^T, dB/dA = (2c/k) A
  const Matrix bk1 = power(b, k - 1);
  Matrix g(k, k);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) g(i, j) = 2.0 * c * bk1(j, i) * adj(i, j);
  return g;
}

ScmSolver::ScmSolver(const Matrix& adj) : k_(adj.rows()) {
  require_square(adj, "ScmSolver");
  Matrix s = Matrix::identity(k_);
  for (std::size_t i = 0; i < k_; ++i)
    for (std::size_t j = 0; j < k_; ++j) s(i, j) -= adj(j, i);

  const double scale = std::max(1.0, norm1(s));
  const Matrix original = s;
  factor(s);
  bool bad = false;
  for (std::size_t i = 0; i < k_; ++i) {
    if (!(std::abs(lu_(i, i)) > 1e-12 * scale)) bad = true;
  }
  if (!bad) {
    const Matrix inv = lu_solve(Matrix::identity(k_), false);
    const double cond = norm1(original) * norm1(inv);
    if (!std::isfinite(cond) || cond > 1e12) bad = true;
  }
  if (bad) {
    ridge_ = true;
    Matrix shifted = original;
    for (std::size_t i = 0; i < k_; ++i) shifted(i, i) += kRidge;
    factor(shifted);
  }
}

void ScmSolver::factor(Matrix s) {
  perm_.resize(k_);
  for (std::size_t i = 0; i < k_; ++i) perm_[i] = i;
  for (std::size_t col = 0; col < k_; ++col) {
    std::size_t pivot = col;
    for (std::size_t r = col + 1; r < k_; ++r)
      if (std::abs(s(r, col)) > std::abs(s(pivot, col))) pivot = r;
    if (pivot != col) {
      for (std::size_t c = 0; c < k_; ++c) std::swap(s(col, c), s(pivot, c));
      std::swap(perm_[col], perm_[pivot]);
    }
    const double d = s(col, col);
    if (d == 0.0) continue;
    for (std::size_t r = col + 1; r < k_; ++r) {
      const double f = s(r, col) / d;
      s(r, col) = f;
      for (std::size_t c = col + 1; c < k_; ++c) s(r, c) -= f * s(col, c);
    }
  }
  lu_ = std::move(s);
}

Matrix ScmSolver::lu_solve(const Matrix& rhs, bool transposed) const {
  if (rhs.rows() != k_) throw std::invalid_argument("ScmSolver: right-hand side has wrong rows");
  const std::size_t d = rhs.cols();
  Matrix x(k_, d);
  if (!transposed) {
    // P S = L U  =>  S x = b  <=>  L U x = P b
    for (std::size_t i = 0; i < k_; ++i) {
      auto row = x.row(i);
      const auto src = rhs.row(perm_[i]);
      std::copy(src.begin(), src.end(), row.begin());
      for (std::size_t j = 0; j < i; ++j) kernels::axpy(-lu_(i, j), x.row(j), row);
    }
    for (std::size_t ii = k_; ii-- > 0;) {
      auto row = x.row(ii);
      for (std::size_t j = ii + 1; j < k_; ++j) kernels::axpy(-lu_(ii, j), x.row(j), row);
      kernels::scale(1.0 / lu_(ii, ii), row);
    }
    return x;
  }
  // S^T x = b  <=>  U^T L^T P x = b
  Matrix y(k_, d);
  for (std::size_t i = 0; i < k_; ++i) {
    auto row = y.row(i);
    const auto src = rhs.row(i);
    std::copy(src.begin(), src.end(), row.begin());
    for (std::size_t j = 0; j < i; ++j) kernels::axpy(-lu_(j, i), y.row(j), row);
    kernels::scale(1.0 / lu_(i, i), row);
  }
  for (std::size_t ii = k_; ii-- > 0;) {
    auto row = y.row(ii);
    for (std::size_t j = ii + 1; j < k_; ++j) kernels::axpy(-lu_(j, ii), y.row(j), row);
  }
  for (std::size_t i = 0; i < k_; ++i) {
    const auto src = y.row(i);
    std::copy(src.begin(), src.end(), x.row(perm_[i]).begin());
  }
  return x;
}

Matrix ScmSolver::solve(const Matrix& rhs) const { return lu_solve(rhs, false); }
Matrix ScmSolver::solve_transposed(const Matrix& rhs) const { return lu_solve(rhs, true); }

ConfounderSet recover_exogenous(const ConfounderSet& confounders, const RelaxedAdjacency& adj) {
  const std::size_t k = confounders.k();
  if (adj.k() != k) throw std::invalid_argument("recover_exogenous: k mismatch");
  ConfounderSet eps{confounders.vectors, ConfounderRole::exogenous};
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const double a = adj.values(j, i);
      if (a != 0.0) kernels::axpy(-a, confounders.vectors.row(j), eps.vectors.row(i));
    }
  }
  return eps;
}

ScmSolution solve_scm(const ConfounderSet& exogenous, const RelaxedAdjacency& adj) {
  if (adj.k() != exogenous.k()) throw std::invalid_argument("solve_scm: k mismatch");
  ScmSolver solver(adj.values);
  return {solver.solve(exogenous.vectors), solver.ridge_engaged()};
}

Matrix causal_compose(const RelaxedAdjacency& global, const LocalGraph& local) {
  return hadamard(global.values, local.weights);
}

Matrix apply_mask(const Matrix& user_graph, const MaskGraph& mask) {
  return hadamard(user_graph, mask.matrix());
}

ConfounderSet reconstruct_from_solution(const Matrix& masked_graph,
                                        const ConfounderSet& exogenous,
                                        const Matrix& scm_solution, const Matrix& adj,
                                        Nonlinearity g) {
  const std::size_t k = exogenous.k();
  const std::size_t d = exogenous.d();
  if (masked_graph.rows() != k || adj.rows() != k || scm_solution.rows() != k ||
      scm_solution.cols() != d) {
    throw std::invalid_argument("reconstruct_confounders: shape mismatch");
  }
  ConfounderSet out{Matrix(k, d), ConfounderRole::reconstructed};
  for (std::size_t i = 0; i < k; ++i) {
    auto pre = out.vectors.row(i);
    const auto e = exogenous.vectors.row(i);
    std::copy(e.begin(), e.end(), pre.begin());
    for (std::size_t j = 0; j < k; ++j) {
      if (j == i || adj(j, i) == 0.0) continue;
      const double w = masked_graph(j, i);
      if (w != 0.0) kernels::axpy(w, scm_solution.row(j), pre);
    }
    if (g == Nonlinearity::sigmoid) {
      for (double& v : pre) v = sigmoid(v);
    }
  }
  return out;
}

ConfounderSet reconstruct_confounders(const Matrix& masked_graph, const ConfounderSet& exogenous,
                                      const RelaxedAdjacency& adj, Nonlinearity g) {
  const ScmSolution m = solve_scm(exogenous, adj);
  return reconstruct_from_solution(masked_graph, exogenous, m.values, adj.values, g);
}

nlohmann::json export_graph(const GlobalGraphParams& params) {
  const std::size_t k = params.k();
  const Matrix prob = edge_probabilities(params.logits);
  nlohmann::json edges = nlohmann::json::array();
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      if (i == j) continue;
      edges.push_back({{"from", i},
                       {"to", j},
                       {"global", prob(i, j) > kEdgeThreshold ? 1 : 0},
                       {"global_prob", prob(i, j)}});
    }
  }
  return {{"k", k}, {"threshold", kEdgeThreshold}, {"edges", std::move(edges)}};
}

Matrix graph_from_document(const nlohmann::json& doc) {
  const std::size_t k = doc.at("k").get<std::size_t>();
  Matrix g(k, k);
  for (const auto& e : doc.at("edges")) {
    const auto from = e.at("from").get<std::size_t>();
    const auto to = e.at("to").get<std::size_t>();
    if (from >= k || to >= k) throw std::out_of_range("graph document: edge index out of range");
    // Edge lists without a "global" flag (e.g. the synthetic truth) list present edges only.
    g(from, to) = e.value("global", 1) != 0 ? 1.0 : 0.0;
  }
  return g;
}

}  // namespace csavae::sem

#pragma once

// Structural causal model primitives over k latent confounders: the relaxed
// Bernoulli adjacency sample, the linear SCM and its inverse, per-user graph
// composition, masking, confounder reconstruction and the acyclicity
// penalty. Everything here is a pure function of its arguments.

#include <cstddef>
#include <vector>

#include "csavae/matrix.hpp"
#include "csavae/noise.hpp"
#include "json.hpp"

namespace csavae::sem {

// Threshold applied to edge probabilities wherever a binary graph is needed.
inline constexpr double kEdgeThreshold = 0.5;
// Diagonal shift used when I - A^T cannot be inverted reliably.
inline constexpr double kRidge = 1e-6;

struct GlobalGraphParams {
  Matrix logits;  // k x k, diagonal ignored

  static GlobalGraphParams all_ones(std::size_t k);
  std::size_t k() const { return logits.rows(); }
};

struct RelaxedAdjacency {
  Matrix values;  // k x k in [0, 1], zero diagonal
  bool hard = false;

  std::size_t k() const { return values.rows(); }
};

struct LocalGraph {
  Matrix weights;  // k x k attention strengths, zero diagonal
};

class MaskGraph {
 public:
  static MaskGraph all_ones(std::size_t k);
  static MaskGraph all_zeros(std::size_t k);
  // Throws DomainError if any entry is not exactly 0 or 1.
  static MaskGraph from_matrix(Matrix mask);
  // Mask that removes every outgoing edge of `node`.
  static MaskGraph without_parent(std::size_t k, std::size_t node);

  const Matrix& matrix() const { return mask_; }
  std::size_t k() const { return mask_.rows(); }
  bool is_all_ones() const;

 private:
  explicit MaskGraph(Matrix m) : mask_(std::move(m)) {}
  Matrix mask_;
};

enum class ConfounderRole { structured, exogenous, reconstructed };

struct ConfounderSet {
  Matrix vectors;  // k x d
  ConfounderRole role = ConfounderRole::structured;

  std::size_t k() const { return vectors.rows(); }
  std::size_t d() const { return vectors.cols(); }
};

enum class Nonlinearity { sigmoid, identity };

double sigmoid(double x);

// entry_ij = sigmoid((logit_ij + g1_ij - g2_ij) / tau), zero diagonal. With
// hard = true the relaxed sample is thresholded at kEdgeThreshold.
RelaxedAdjacency gumbel_sigmoid(const Matrix& logits, double tau, const GumbelNoise& noise,
                                bool hard = false);

// d(loss)/d(logits) given d(loss)/d(sample) for a soft sample produced by
// gumbel_sigmoid with the same tau.
Matrix gumbel_sigmoid_backward(const RelaxedAdjacency& sample, double tau, const Matrix& grad);

// Noise-free evaluation graph: 1 where sigmoid(logit) > 0.5, zero diagonal.
RelaxedAdjacency hard_adjacency(const Matrix& logits);

// Noise-free edge probabilities sigmoid(logit), zero diagonal.
Matrix edge_probabilities(const Matrix& logits);

// tr((I + (c/k) A.A)^k) - k. Zero exactly when the support of A is acyclic.
double dag_penalty(const Matrix& adj, double c = 1.0);
Matrix dag_penalty_grad(const Matrix& adj, double c = 1.0);

// Factorization of I - A^T, shared by every user in a batch.
class ScmSolver {
 public:
  explicit ScmSolver(const Matrix& adj);

  // Solves (I - A^T [+ ridge]) X = rhs for a k x d right-hand side.
  Matrix solve(const Matrix& rhs) const;
  // Solves (I - A^T [+ ridge])^T X = rhs.
  Matrix solve_transposed(const Matrix& rhs) const;

  bool ridge_engaged() const { return ridge_; }
  std::size_t k() const { return k_; }

 private:
  void factor(Matrix s);
  Matrix lu_solve(const Matrix& rhs, bool transposed) const;

  std::size_t k_ = 0;
  Matrix lu_;
  std::vector<std::size_t> perm_;
  bool ridge_ = false;
};

struct ScmSolution {
  Matrix values;          // k x d
  bool ridge_engaged = false;
};

// epsilon = (I - A^T) C
ConfounderSet recover_exogenous(const ConfounderSet& confounders, const RelaxedAdjacency& adj);

// C = (I - A^T)^{-1} epsilon, ridge-stabilized when singular or ill-conditioned.
ScmSolution solve_scm(const ConfounderSet& exogenous, const RelaxedAdjacency& adj);

// G_u = global (.) local
Matrix causal_compose(const RelaxedAdjacency& global, const LocalGraph& local);

// G_u (.) mask
Matrix apply_mask(const Matrix& user_graph, const MaskGraph& mask);

// c_hat_i = g(sum_j masked[j, i] * M_j + eps_i) with M = solve_scm(eps, adj).
// Column i of `masked` holds the parents of confounder i; entries outside the
// support of `adj` are ignored.
ConfounderSet reconstruct_confounders(const Matrix& masked_graph, const ConfounderSet& exogenous,
                                      const RelaxedAdjacency& adj, Nonlinearity g);

// Same as above with the SCM solution precomputed.
ConfounderSet reconstruct_from_solution(const Matrix& masked_graph,
                                        const ConfounderSet& exogenous,
                                        const Matrix& scm_solution, const Matrix& adj,
                                        Nonlinearity g);

// Graph export document:
// {"k", "threshold", "edges": [{"from", "to", "global", "global_prob"}]}
// with one entry per ordered off-diagonal pair, zero-based indices.
nlohmann::json export_graph(const GlobalGraphParams& params);

// Binary adjacency read back from an export document ("global" fields; a
// missing field means the listed edge is present).
Matrix graph_from_document(const nlohmann::json& doc);

}  // namespace csavae::sem

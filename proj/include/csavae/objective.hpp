#pragma once

// Training objective: multinomial negative ELBO, acyclicity penalties on the
// global and local graphs, and the pairwise-cosine diversity penalty on the
// exogenous confounders.

#include <span>
#include <stdexcept>
#include <vector>

#include "csavae/matrix.hpp"
#include "csavae/model.hpp"
#include "csavae/sem.hpp"
#include "json.hpp"

namespace csavae {

struct LossWeights {
  double beta_kl = 1.0;
  double lambda_dag = 1.0;
  double lambda_div = 1.0;
  double dag_c = 1.0;
};

struct LossBreakdown {
  double neg_elbo = 0.0;
  double recon = 0.0;  // -E[log p(x | .)]
  double kl = 0.0;
  double dag_global = 0.0;
  double dag_local = 0.0;
  double diversity = 0.0;
  double total = 0.0;
  LossWeights weights;
  bool zero_norm_exogenous = false;  // a zero-norm row was excluded from diversity

  bool finite() const;
  nlohmann::json to_json() const;
};

class TrainingFault : public std::runtime_error {
 public:
  TrainingFault(const std::string& what, LossBreakdown b)
      : std::runtime_error(what), breakdown(b) {}
  LossBreakdown breakdown;
};

// sum_i x_i log softmax(scores)_i
double reconstruction_loglik(std::span<const double> scores, const SparseRow& x);
// d(-loglik)/d(scores) = -x + (sum x) softmax(scores)
std::vector<double> reconstruction_grad(std::span<const double> scores, const SparseRow& x);

// 1/2 sum_j (exp(lv_j) + mu_j^2 - 1 - lv_j)
double kl_divergence(std::span<const double> mu, std::span<const double> log_var);

struct DiversityResult {
  double value = 0.0;
  bool zero_norm = false;
};

// sum over ordered pairs i != j of cos(eps_i, eps_j). Zero-norm rows
// contribute 0 and are flagged.
DiversityResult diversity_penalty(const sem::ConfounderSet& epsilon);
Matrix diversity_grad(const Matrix& epsilon);

// Single-user objective. `adjacency` is the relaxed global sample the forward
// pass used; `local` is the user's local graph.
LossBreakdown total_loss(const LatentBundle& bundle, std::span<const double> scores,
                         const SparseRow& x, const Matrix& adjacency, const sem::LocalGraph& local,
                         const LossWeights& weights);

struct BatchLoss {
  LossBreakdown breakdown;
  BackwardSeeds seeds;
};

// Batch objective over a forward trace: per-user terms are averaged, the
// global penalty is taken on the shared sample and the local penalty on the
// batch mean of |local|. Throws TrainingFault on a non-finite component.
BatchLoss batch_loss(const BatchTrace& trace, std::span<const SparseRow> targets,
                     const LossWeights& weights, const ModelConfig& cfg);

}  // namespace csavae

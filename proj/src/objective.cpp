#include "csavae/objective.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace csavae {

namespace {

double log_sum_exp(std::span<const double> s) {
  const double m = *std::max_element(s.begin(), s.end());
  if (std::isinf(m)) return m;
  double acc = 0.0;
  for (double v : s) acc += std::exp(v - m);
  return m + std::log(acc);
}

double row_norm(std::span<const double> r) {
  double s = 0.0;
  for (double v : r) s += v * v;
  return std::sqrt(s);
}

}  // namespace

bool LossBreakdown::finite() const {
  for (double v : {recon, kl, dag_global, dag_local, diversity, total})
    if (!std::isfinite(v)) return false;
  return true;
}

nlohmann::json LossBreakdown::to_json() const {
  return {{"total", total},       {"neg_elbo", neg_elbo},     {"recon", recon},
          {"kl", kl},             {"dag_global", dag_global}, {"dag_local", dag_local},
          {"diversity", diversity},
          {"weights",
           {{"beta_kl", weights.beta_kl},
            {"lambda_dag", weights.lambda_dag},
            {"lambda_div", weights.lambda_div}}}};
}

double reconstruction_loglik(std::span<const double> scores, const SparseRow& x) {
  const double lse = log_sum_exp(scores);
  double ll = 0.0;
  for (std::size_t e = 0; e < x.nnz(); ++e) {
    const double s = scores[x.index[e]];
    // A saturated target (+inf against a +inf normalizer) has probability 1.
    const double lp = (std::isinf(s) && s > 0 && std::isinf(lse)) ? 0.0 : s - lse;
    ll += x.value[e] * lp;
  }
  return ll;
}

std::vector<double> reconstruction_grad(std::span<const double> scores, const SparseRow& x) {
  const double lse = log_sum_exp(scores);
  double total = 0.0;
  for (double v : x.value) total += v;
  std::vector<double> g(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) g[i] = total * std::exp(scores[i] - lse);
  for (std::size_t e = 0; e < x.nnz(); ++e) g[x.index[e]] -= x.value[e];
  return g;
}

double kl_divergence(std::span<const double> mu, std::span<const double> log_var) {
  double kl = 0.0;
  for (std::size_t j = 0; j < mu.size(); ++j)
    kl += std::exp(log_var[j]) + mu[j] * mu[j] - 1.0 - log_var[j];
  return std::max(0.0, 0.5 * kl);
}

DiversityResult diversity_penalty(const sem::ConfounderSet& epsilon) {
  const Matrix& e = epsilon.vectors;
  const std::size_t k = e.rows();
  std::vector<double> norms(k);
  DiversityResult out;
  for (std::size_t i = 0; i < k; ++i) {
    norms[i] = row_norm(e.row(i));
    if (norms[i] == 0.0) out.zero_norm = true;
  }
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = i + 1; j < k; ++j) {
      if (norms[i] == 0.0 || norms[j] == 0.0) continue;
      double dp = 0.0;
      for (std::size_t c = 0; c < e.cols(); ++c) dp += e(i, c) * e(j, c);
      out.value += 2.0 * dp / (norms[i] * norms[j]);
    }
  return out;
}

Matrix diversity_grad(const Matrix& e) {
  const std::size_t k = e.rows(), d = e.cols();
  std::vector<double> norms(k);
  for (std::size_t i = 0; i < k; ++i) norms[i] = row_norm(e.row(i));
  Matrix g(k, d);
  for (std::size_t i = 0; i < k; ++i) {
    if (norms[i] == 0.0) continue;
    for (std::size_t j = 0; j < k; ++j) {
      if (j == i || norms[j] == 0.0) continue;
      double dp = 0.0;
      for (std::size_t c = 0; c < d; ++c) dp += e(i, c) * e(j, c);
      const double cos = dp / (norms[i] * norms[j]);
      for (std::size_t c = 0; c < d; ++c)
        g(i, c) += 2.0 * (e(j, c) / (norms[i] * norms[j]) - cos * e(i, c) / (norms[i] * norms[i]));
    }
  }
  return g;
}

namespace {

void finish(LossBreakdown& b) {
  b.neg_elbo = b.recon + b.kl;
  b.total = b.recon + b.weights.beta_kl * b.kl +
            b.weights.lambda_dag * (b.dag_global + b.dag_local) + b.weights.lambda_div * b.diversity;
  if (!b.finite()) throw TrainingFault("non-finite loss: " + b.to_json().dump(), b);
}

Matrix abs_matrix(const Matrix& m) {
  Matrix a = m;
  for (double& v : a.flat()) v = std::fabs(v);
  return a;
}

}  // namespace

LossBreakdown total_loss(const LatentBundle& bundle, std::span<const double> scores,
                         const SparseRow& x, const Matrix& adjacency, const sem::LocalGraph& local,
                         const LossWeights& weights) {
  LossBreakdown b;
  b.weights = weights;
  b.recon = -reconstruction_loglik(scores, x);
  b.kl = kl_divergence(bundle.encoder_out.mu, bundle.encoder_out.log_var);
  b.dag_global = sem::dag_penalty(adjacency, weights.dag_c);
  b.dag_local = sem::dag_penalty(abs_matrix(local.weights), weights.dag_c);
  const auto div = diversity_penalty(bundle.epsilon);
  b.diversity = div.value;
  b.zero_norm_exogenous = div.zero_norm;
  finish(b);
  return b;
}

BatchLoss batch_loss(const BatchTrace& t, std::span<const SparseRow> targets,
                     const LossWeights& weights, const ModelConfig& cfg) {
  const std::size_t B = t.batch(), d = cfg.d, k = cfg.k;
  if (targets.size() != B) throw std::invalid_argument("batch_loss: target count mismatch");
  const double inv_b = 1.0 / static_cast<double>(B);
  BatchLoss out;
  LossBreakdown& b = out.breakdown;
  BackwardSeeds& s = out.seeds;
  b.weights = weights;

  s.scores = Matrix(B, cfg.n_items);
  s.mu = Matrix(B, d);
  s.log_var = Matrix(B, d);
  for (std::size_t u = 0; u < B; ++u) {
    const auto sc = t.scores.row(u);
    b.recon += -reconstruction_loglik(sc, targets[u]) * inv_b;
    const auto g = reconstruction_grad(sc, targets[u]);
    for (std::size_t i = 0; i < g.size(); ++i) s.scores(u, i) = g[i] * inv_b;

    const auto mu = t.mu(u);
    const auto lv = t.log_var(u);
    b.kl += kl_divergence(mu, lv) * inv_b;
    for (std::size_t j = 0; j < d; ++j) {
      s.mu(u, j) = weights.beta_kl * mu[j] * inv_b;
      s.log_var(u, j) = weights.beta_kl * 0.5 * (std::exp(lv[j]) - 1.0) * inv_b;
    }
  }

  if (t.with_confounders) {
    if (t.adj_learned) {
      b.dag_global = sem::dag_penalty(t.adj.values, weights.dag_c);
      s.adjacency = sem::dag_penalty_grad(t.adj.values, weights.dag_c);
      for (double& v : s.adjacency.flat()) v *= weights.lambda_dag;
    }
    if (cfg.use_local) {
      Matrix mean_abs(k, k);
      for (const auto& u : t.users)
        for (std::size_t i = 0; i < k * k; ++i) mean_abs.flat()[i] += std::fabs(u.local.flat()[i]) * inv_b;
      b.dag_local = sem::dag_penalty(mean_abs, weights.dag_c);
      const Matrix gm = sem::dag_penalty_grad(mean_abs, weights.dag_c);
      s.local.resize(B);
      for (std::size_t u = 0; u < B; ++u) {
        s.local[u] = Matrix(k, k);
        for (std::size_t i = 0; i < k * k; ++i) {
          const double v = t.users[u].local.flat()[i];
          const double sign = v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0);
          s.local[u].flat()[i] = weights.lambda_dag * gm.flat()[i] * sign * inv_b;
        }
      }
    }
    s.epsilon.resize(B);
    for (std::size_t u = 0; u < B; ++u) {
      const auto div = diversity_penalty({t.users[u].eps, sem::ConfounderRole::exogenous});
      b.diversity += div.value * inv_b;
      b.zero_norm_exogenous = b.zero_norm_exogenous || div.zero_norm;
      s.epsilon[u] = diversity_grad(t.users[u].eps);
      for (double& v : s.epsilon[u].flat()) v *= weights.lambda_div * inv_b;
    }
  }
  finish(b);
  return out;
}

}  // namespace csavae

#include "csavae/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "csavae/errors.hpp"
#include "csavae/kernels.hpp"

namespace csavae {

namespace {

constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
constexpr double kLayerNormEps = 1e-5;
constexpr double kMinNorm = 1e-12;

using kernels::axpy;
using kernels::dot;

// y += x . W[r0 : r0 + |x|, :]
void vecmat(std::span<const double> x, const Matrix& W, std::size_t r0, std::span<double> y) {
  for (std::size_t r = 0; r < x.size(); ++r) axpy(x[r], W.row(r0 + r), y);
}

// gx += W[r0 : r0 + |gx|, :] . gy
void matvec_t(const Matrix& W, std::size_t r0, std::span<const double> gy, std::span<double> gx) {
  for (std::size_t r = 0; r < gx.size(); ++r) gx[r] += dot(W.row(r0 + r), gy);
}

// gW[r0 + r, :] += x[r] * gy
void outer_acc(Matrix& gW, std::size_t r0, std::span<const double> x, std::span<const double> gy) {
  for (std::size_t r = 0; r < x.size(); ++r)
    if (x[r] != 0.0) axpy(x[r], gy, gW.row(r0 + r));
}

void add_to(std::span<double> y, std::span<const double> x) { axpy(1.0, x, y); }

void tanh_inplace(std::span<double> x) {
  for (double& v : x) v = std::tanh(v);
}

// g *= 1 - h^2
void tanh_backward(std::span<const double> h, std::span<double> g) {
  for (std::size_t i = 0; i < h.size(); ++i) g[i] *= 1.0 - h[i] * h[i];
}

void softmax_inplace(std::span<double> x) {
  if (x.empty()) return;
  const double m = *std::max_element(x.begin(), x.end());
  double s = 0.0;
  for (double& v : x) {
    v = std::exp(v - m);
    s += v;
  }
  for (double& v : x) v /= s;
}

// Returns the divisor used (sigma or norm).
double norm_forward(MixNorm kind, std::span<const double> x, std::span<double> y) {
  const std::size_t n = x.size();
  if (kind == MixNorm::layer) {
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const double s = std::sqrt(var + kLayerNormEps);
    for (std::size_t i = 0; i < n; ++i) y[i] = (x[i] - mean) / s;
    return s;
  }
  const double s = std::max(std::sqrt(dot(x, x)), kMinNorm);
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] / s;
  return s;
}

void norm_backward(MixNorm kind, std::span<const double> y, double s, std::span<const double> gy,
                   std::span<double> gx) {
  const std::size_t n = y.size();
  if (kind == MixNorm::layer) {
    double mg = 0.0, mgy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      mg += gy[i];
      mgy += gy[i] * y[i];
    }
    mg /= static_cast<double>(n);
    mgy /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) gx[i] += (gy[i] - mg - y[i] * mgy) / s;
    return;
  }
  const double yg = dot(y, gy);
  for (std::size_t i = 0; i < n; ++i) gx[i] += (gy[i] - y[i] * yg) / s;
}

void broadcast_rows(Matrix& m, const Matrix& bias) {
  for (std::size_t r = 0; r < m.rows(); ++r)
    std::copy(bias.flat().begin(), bias.flat().end(), m.row(r).begin());
}

void colsum_acc(const Matrix& m, Matrix& out) {
  for (std::size_t r = 0; r < m.rows(); ++r) add_to(out.flat(), m.row(r));
}

}  // namespace

void ModelConfig::validate() const {
  if (n_items == 0) throw std::invalid_argument("model: n_items must be positive");
  if (k == 0) throw std::invalid_argument("model: k must be positive");
  if (d == 0 || hidden == 0) throw std::invalid_argument("model: widths must be positive");
  if (!(tau > 0.0)) throw DomainError("model: tau must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("model: dropout in [0, 1)");
}

SparseRow SparseRow::from_items(std::span<const std::uint32_t> items) {
  SparseRow r;
  r.index.assign(items.begin(), items.end());
  std::sort(r.index.begin(), r.index.end());
  r.index.erase(std::unique(r.index.begin(), r.index.end()), r.index.end());
  r.value.assign(r.index.size(), 1.0);
  return r;
}

SparseRow SparseRow::from_dense(std::span<const double> dense) {
  SparseRow r;
  for (std::size_t i = 0; i < dense.size(); ++i)
    if (dense[i] != 0.0) {
      r.index.push_back(static_cast<std::uint32_t>(i));
      r.value.push_back(dense[i]);
    }
  return r;
}

bool InterventionSpec::empty() const {
  return (!mask || mask->is_all_ones()) && assignments.empty() && offsets.empty();
}

void InterventionSpec::validate(std::size_t k, std::size_t d) const {
  if (mask && mask->k() != k)
    throw std::invalid_argument("intervention: mask is " + std::to_string(mask->k()) +
                                "x" + std::to_string(mask->k()) + ", model has k=" +
                                std::to_string(k));
  auto check = [&](const std::map<std::size_t, std::vector<double>>& m, const char* what) {
    for (const auto& [i, v] : m) {
      if (i >= k)
        throw std::invalid_argument(std::string("intervention: ") + what + " index " +
                                    std::to_string(i) + " out of range [0, " +
                                    std::to_string(k) + ")");
      if (v.size() != d)
        throw std::invalid_argument(std::string("intervention: ") + what + " vector has length " +
                                    std::to_string(v.size()) + ", expected " + std::to_string(d));
      for (double x : v)
        if (!std::isfinite(x)) throw DomainError(std::string("intervention: non-finite ") + what);
    }
  };
  check(assignments, "assignment");
  check(offsets, "offset");
}

std::span<const double> BatchTrace::mu(std::size_t b) const {
  return enc_out.row(b).first(enc_out.cols() / 2);
}

std::span<const double> BatchTrace::log_var(std::size_t b) const {
  return enc_out.row(b).last(enc_out.cols() / 2);
}

ForwardNoise ForwardNoise::draw(NoiseSource& noise, std::span<const SparseRow> rows,
                                const ModelConfig& cfg, Mode mode) {
  if (mode == Mode::eval) return zeros(rows, cfg);
  ForwardNoise f;
  f.gumbel = GumbelNoise::draw(noise, cfg.k);
  f.eta = Matrix(rows.size(), cfg.d);
  for (double& v : f.eta.flat()) v = noise.normal();
  f.dropout = cfg.dropout > 0.0;
  f.keep.resize(rows.size());
  for (std::size_t b = 0; b < rows.size(); ++b) {
    f.keep[b].resize(rows[b].nnz());
    for (auto& k : f.keep[b]) k = f.dropout ? noise.bernoulli(1.0 - cfg.dropout) : 1;
  }
  return f;
}

ForwardNoise ForwardNoise::zeros(std::span<const SparseRow> rows, const ModelConfig& cfg) {
  ForwardNoise f;
  f.gumbel = GumbelNoise::zeros(cfg.k);
  f.eta = Matrix(rows.size(), cfg.d);
  f.keep.resize(rows.size());
  for (std::size_t b = 0; b < rows.size(); ++b) f.keep[b].assign(rows[b].nnz(), 1);
  return f;
}

CsaVae::CsaVae(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  init_params(seed);
}

void CsaVae::init_params(std::uint64_t seed) {
  const std::size_t n = cfg_.n_items, k = cfg_.k, d = cfg_.d, H = cfg_.hidden;
  NoiseSource rng(seed);

  // Xavier-uniform weights, zero biases.
  auto weight = [&](std::string name, std::size_t rows, std::size_t cols, std::size_t fan_in,
                    std::size_t fan_out, double gain = 1.0) {
    Matrix m(rows, cols);
    const double a = gain * std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (double& v : m.flat()) v = rng.uniform(-a, a);
    params_.push_back({std::move(name), std::move(m), Matrix(rows, cols)});
  };
  auto bias = [&](std::string name, std::size_t rows, std::size_t cols, double fill = 0.0) {
    params_.push_back({std::move(name), Matrix(rows, cols, fill), Matrix(rows, cols)});
  };

  weight("enc_w1", n, H, n, H);
  bias("enc_b1", 1, H);
  weight("enc_w2", H, 2 * d, H, 2 * d);
  bias("enc_b2", 1, 2 * d);
  weight("head_w1", k * d, d, d, d);
  bias("head_b1", k, d);
  weight("head_w2", k * d, d, d, d);
  bias("head_b2", k, d);
  weight("s_w1", d, d, d, d);
  bias("s_b1", 1, d);
  weight("s_w2", d, d, d, d);
  bias("s_b2", 1, d);
  bias(std::string(kLogits), k, k, 1.0);
  weight("att_wq", k * d, d, d, d);
  weight("att_wk", k * d, d, d, d);
  // Small value weights keep the initial head values near their unit bias.
  weight("att_wv", k, d, d, 1, 0.1);
  bias("att_bv", 1, k, 1.0);
  weight("mix_wf", d, d, d, d);
  bias("mix_bf", 1, d);
  weight("mix_wg", d, d, d, d);
  bias("mix_bg", 1, d);
  weight("mix_wh", d, d, d, d);
  bias("mix_bh", 1, d);
  if (cfg_.use_ffn) {
    weight("ffn_w1", d, d, d, d);
    bias("ffn_b1", 1, d);
    weight("ffn_w2", d, d, d, d);
    bias("ffn_b2", 1, d);
  }
  weight("dec_w1", d, H, d, H);
  bias("dec_b1", 1, H);
  weight("dec_w2", H, n, H, n);
  bias("dec_b2", 1, n);

  auto idx = [&](std::string_view name) {
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (params_[i].name == name) return i;
    return kNone;
  };
  enc_w1_ = idx("enc_w1"), enc_b1_ = idx("enc_b1"), enc_w2_ = idx("enc_w2"), enc_b2_ = idx("enc_b2");
  head_w1_ = idx("head_w1"), head_b1_ = idx("head_b1");
  head_w2_ = idx("head_w2"), head_b2_ = idx("head_b2");
  s_w1_ = idx("s_w1"), s_b1_ = idx("s_b1"), s_w2_ = idx("s_w2"), s_b2_ = idx("s_b2");
  logits_ = idx(kLogits);
  att_wq_ = idx("att_wq"), att_wk_ = idx("att_wk"), att_wv_ = idx("att_wv"), att_bv_ = idx("att_bv");
  mix_wf_ = idx("mix_wf"), mix_bf_ = idx("mix_bf"), mix_wg_ = idx("mix_wg");
  mix_bg_ = idx("mix_bg"), mix_wh_ = idx("mix_wh"), mix_bh_ = idx("mix_bh");
  ffn_w1_ = idx("ffn_w1"), ffn_b1_ = idx("ffn_b1"), ffn_w2_ = idx("ffn_w2"), ffn_b2_ = idx("ffn_b2");
  dec_w1_ = idx("dec_w1"), dec_b1_ = idx("dec_b1"), dec_w2_ = idx("dec_w2"), dec_b2_ = idx("dec_b2");
}

std::size_t CsaVae::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name == name) return i;
  throw std::out_of_range("model: no parameter named " + std::string(name));
}

Param& CsaVae::param(std::string_view name) { return params_[index_of(name)]; }
const Param& CsaVae::param(std::string_view name) const { return params_[index_of(name)]; }

void CsaVae::zero_grad() {
  for (auto& p : params_) p.grad.fill(0.0);
}

sem::RelaxedAdjacency CsaVae::adjacency(Mode mode, const GumbelNoise& gumbel) const {
  const std::size_t k = cfg_.k;
  if (!cfg_.use_global) {
    sem::RelaxedAdjacency a{Matrix(k, k, 1.0), true};
    for (std::size_t i = 0; i < k; ++i) a.values(i, i) = 0.0;
    return a;
  }
  if (mode == Mode::eval) return sem::hard_adjacency(global_logits());
  return sem::gumbel_sigmoid(global_logits(), cfg_.tau, gumbel, false);
}

// ---------------------------------------------------------------- forward

void CsaVae::encoder_forward(BatchTrace& t, std::span<const SparseRow> rows,
                             const ForwardNoise& noise, Mode mode) const {
  const std::size_t B = rows.size(), H = cfg_.hidden, d = cfg_.d;
  const bool drop = mode == Mode::train && noise.dropout;
  const double keep_scale = drop ? 1.0 / (1.0 - cfg_.dropout) : 1.0;
  t.input.resize(B);
  for (std::size_t b = 0; b < B; ++b) {
    const SparseRow& x = rows[b];
    for (std::uint32_t i : x.index)
      if (i >= cfg_.n_items)
        throw std::out_of_range("model: item index " + std::to_string(i) + " >= n_items " +
                                std::to_string(cfg_.n_items));
    const double norm = std::sqrt(dot(x.value, x.value));
    SparseRow& in = t.input[b];
    in.index.clear();
    in.value.clear();
    if (norm == 0.0) continue;
    for (std::size_t e = 0; e < x.nnz(); ++e) {
      if (drop && !noise.keep[b][e]) continue;
      in.index.push_back(x.index[e]);
      in.value.push_back(x.value[e] / norm * keep_scale);
    }
  }

  t.enc_h = Matrix(B, H);
  broadcast_rows(t.enc_h, w(enc_b1_));
  const Matrix& W1 = w(enc_w1_);
  for (std::size_t b = 0; b < B; ++b) {
    auto h = t.enc_h.row(b);
    for (std::size_t e = 0; e < t.input[b].nnz(); ++e)
      axpy(t.input[b].value[e], W1.row(t.input[b].index[e]), h);
  }
  tanh_inplace(t.enc_h.flat());

  t.enc_out = Matrix(B, 2 * d);
  broadcast_rows(t.enc_out, w(enc_b2_));
  kernels::gemm(kernels::Trans::no, kernels::Trans::no, B, 2 * d, H, t.enc_h.data(), H,
                w(enc_w2_).data(), 2 * d, t.enc_out.data(), 2 * d);

  t.z = Matrix(B, d);
  if (mode == Mode::train) t.eta = noise.eta;
  for (std::size_t b = 0; b < B; ++b) {
    auto mu = t.mu(b);
    auto lv = t.log_var(b);
    for (std::size_t j = 0; j < d; ++j)
      t.z(b, j) = mode == Mode::train ? mu[j] + std::exp(0.5 * lv[j]) * noise.eta(b, j) : mu[j];
  }
}

void CsaVae::heads_forward(UserTrace& u) const {
  const std::size_t k = cfg_.k, d = cfg_.d;
  u.head_h = Matrix(k, d);
  u.C = Matrix(k, d);
  for (std::size_t i = 0; i < k; ++i) {
    auto h = u.head_h.row(i);
    std::copy_n(w(head_b1_).row(i).begin(), d, h.begin());
    vecmat(u.z, w(head_w1_), i * d, h);
    tanh_inplace(h);
    auto c = u.C.row(i);
    std::copy_n(w(head_b2_).row(i).begin(), d, c.begin());
    vecmat(h, w(head_w2_), i * d, c);
  }
}

void CsaVae::sinfo_forward(UserTrace& u) const {
  const std::size_t d = cfg_.d;
  u.s_h.assign(w(s_b1_).flat().begin(), w(s_b1_).flat().end());
  vecmat(u.z, w(s_w1_), 0, u.s_h);
  tanh_inplace(u.s_h);
  u.s_info.assign(w(s_b2_).flat().begin(), w(s_b2_).flat().end());
  vecmat(u.s_h, w(s_w2_), 0, u.s_info);
  if (cfg_.sinfo_skip)
    for (std::size_t j = 0; j < d; ++j) u.s_info[j] += u.z[j];
}

void CsaVae::local_forward(UserTrace& u) const {
  const std::size_t k = cfg_.k, d = cfg_.d;
  u.local = Matrix(k, k);
  if (!cfg_.use_local) {
    u.local.fill(1.0);
    for (std::size_t i = 0; i < k; ++i) u.local(i, i) = 0.0;
    return;
  }
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  u.kin = Matrix(k, d);
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t c = 0; c < d; ++c) u.kin(j, c) = u.eps(j, c) * u.s_info[c];
  u.q.assign(k, Matrix(k, d));
  u.key.assign(k, Matrix(k, d));
  u.prob.assign(k, Matrix(k, k));
  u.v.assign(k, 0.0);
  for (std::size_t h = 0; h < k; ++h) {
    for (std::size_t i = 0; i < k; ++i) {
      vecmat(u.eps.row(i), w(att_wq_), h * d, u.q[h].row(i));
      vecmat(u.kin.row(i), w(att_wk_), h * d, u.key[h].row(i));
    }
    for (std::size_t i = 0; i < k; ++i) {
      auto p = u.prob[h].row(i);
      for (std::size_t j = 0; j < k; ++j) p[j] = dot(u.q[h].row(i), u.key[h].row(j)) * inv_sqrt_d;
      softmax_inplace(p);
    }
    u.v[h] = dot(w(att_wv_).row(h), u.s_info) + w(att_bv_)(0, h);
    axpy(u.v[h], u.prob[h].flat(), u.local.flat());
  }
  for (std::size_t i = 0; i < k; ++i) u.local(i, i) = 0.0;
}

void CsaVae::mix_forward(UserTrace& u) const {
  const std::size_t k = cfg_.k, d = cfg_.d;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  u.sn.assign(d, 0.0);
  u.sn_scale = norm_forward(cfg_.mix_norm, u.s_info, u.sn);
  u.Q.assign(w(mix_bf_).flat().begin(), w(mix_bf_).flat().end());
  vecmat(u.sn, w(mix_wf_), 0, u.Q);

  u.cn = Matrix(k, d);
  u.cn_scale.assign(k, 1.0);
  u.K = Matrix(k, d);
  u.V = Matrix(k, d);
  u.score.assign(k, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    u.cn_scale[i] = norm_forward(cfg_.mix_norm, u.c_hat.row(i), u.cn.row(i));
    auto K = u.K.row(i);
    std::copy_n(w(mix_bg_).flat().begin(), d, K.begin());
    vecmat(u.cn.row(i), w(mix_wg_), 0, K);
    auto V = u.V.row(i);
    std::copy_n(w(mix_bh_).flat().begin(), d, V.begin());
    vecmat(u.c_hat.row(i), w(mix_wh_), 0, V);
    u.score[i] = dot(u.Q, K) * inv_sqrt_d;
  }
  softmax_inplace(u.score);
  u.c_user.assign(d, 0.0);
  for (std::size_t i = 0; i < k; ++i) axpy(u.score[i], u.V.row(i), u.c_user);
  u.mixed = u.s_info;
  add_to(u.mixed, u.c_user);
}

// Optional FFN on top of the mixed representation.
void CsaVae::bypass_forward(UserTrace& u, std::span<const double> z) const {
  (void)z;
  if (!cfg_.use_ffn) {
    u.z_hat = u.mixed;
    return;
  }
  u.ffn_h.assign(w(ffn_b1_).flat().begin(), w(ffn_b1_).flat().end());
  vecmat(u.mixed, w(ffn_w1_), 0, u.ffn_h);
  tanh_inplace(u.ffn_h);
  u.z_hat.assign(w(ffn_b2_).flat().begin(), w(ffn_b2_).flat().end());
  vecmat(u.ffn_h, w(ffn_w2_), 0, u.z_hat);
}

void CsaVae::latent_forward(UserTrace& u, std::span<const double> z,
                            const sem::RelaxedAdjacency& adj, const sem::ScmSolver& solver,
                            const Matrix& mask, const InterventionSpec& spec) const {
  const std::size_t k = cfg_.k, d = cfg_.d;
  u.z.assign(z.begin(), z.end());
  heads_forward(u);

  // eps_i = C_i - sum_j A[j, i] C_j
  u.eps = u.C;
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j)
      if (j != i && adj.values(j, i) != 0.0) axpy(-adj.values(j, i), u.C.row(j), u.eps.row(i));

  sinfo_forward(u);
  local_forward(u);
  u.user_graph = hadamard(adj.values, u.local);
  u.masked = hadamard(u.user_graph, mask);
  u.M = solver.solve(u.eps);
  u.c_rec = sem::reconstruct_from_solution(u.masked, {u.eps}, u.M, adj.values,
                                           sem::Nonlinearity::sigmoid)
                .vectors;
  u.c_hat = u.c_rec;
  u.assigned.assign(k, 0);
  for (const auto& [i, v] : spec.assignments) {
    std::copy(v.begin(), v.end(), u.c_hat.row(i).begin());
    u.assigned[i] = 1;
  }
  for (const auto& [i, v] : spec.offsets) add_to(u.c_hat.row(i), v);
  (void)d;

  mix_forward(u);
  bypass_forward(u, z);
}

void CsaVae::decoder_forward(BatchTrace& t) const {
  const std::size_t B = t.z_hat.rows(), H = cfg_.hidden, d = cfg_.d, n = cfg_.n_items;
  t.dec_h = Matrix(B, H);
  broadcast_rows(t.dec_h, w(dec_b1_));
  kernels::gemm(kernels::Trans::no, kernels::Trans::no, B, H, d, t.z_hat.data(), d,
                w(dec_w1_).data(), H, t.dec_h.data(), H);
  tanh_inplace(t.dec_h.flat());
  t.scores = Matrix(B, n);
  broadcast_rows(t.scores, w(dec_b2_));
  kernels::gemm(kernels::Trans::no, kernels::Trans::no, B, n, H, t.dec_h.data(), H,
                w(dec_w2_).data(), n, t.scores.data(), n);
}

BatchTrace CsaVae::forward(std::span<const SparseRow> rows, const ForwardNoise& noise, Mode mode,
                           const InterventionSpec& spec, bool with_confounders) const {
  const std::size_t B = rows.size(), k = cfg_.k, d = cfg_.d;
  if (mode == Mode::train && (noise.eta.rows() != B || noise.keep.size() != B))
    throw std::invalid_argument("model: forward noise does not match the batch");
  spec.validate(k, d);

  BatchTrace t;
  t.mode = mode;
  t.with_confounders = with_confounders && cfg_.confounders_active();
  encoder_forward(t, rows, noise, mode);

  t.users.resize(B);
  t.z_hat = Matrix(B, d);
  if (t.with_confounders) {
    t.adj = adjacency(mode, noise.gumbel);
    t.adj_learned = cfg_.use_global && mode == Mode::train;
    t.mask = spec.mask ? spec.mask->matrix() : Matrix(k, k, 1.0);
    t.solver.emplace(t.adj.values);
    t.ridge_engaged = t.solver->ridge_engaged();
    for (std::size_t b = 0; b < B; ++b) {
      latent_forward(t.users[b], t.z.row(b), t.adj, *t.solver, t.mask, spec);
      std::copy(t.users[b].z_hat.begin(), t.users[b].z_hat.end(), t.z_hat.row(b).begin());
    }
  } else {
    for (std::size_t b = 0; b < B; ++b) {
      UserTrace& u = t.users[b];
      u.z.assign(t.z.row(b).begin(), t.z.row(b).end());
      sinfo_forward(u);
      u.mixed = u.s_info;
      bypass_forward(u, u.z);
      std::copy(u.z_hat.begin(), u.z_hat.end(), t.z_hat.row(b).begin());
    }
  }
  decoder_forward(t);
  return t;
}

// --------------------------------------------------------------- backward

void CsaVae::bypass_backward(const UserTrace& u, std::span<const double> g_zhat,
                             std::span<double> g_mixed) {
  if (!cfg_.use_ffn) {
    add_to(g_mixed, g_zhat);
    return;
  }
  outer_acc(g(ffn_w2_), 0, u.ffn_h, g_zhat);
  add_to(g(ffn_b2_).flat(), g_zhat);
  std::vector<double> gh(cfg_.d, 0.0);
  matvec_t(w(ffn_w2_), 0, g_zhat, gh);
  tanh_backward(u.ffn_h, gh);
  outer_acc(g(ffn_w1_), 0, u.mixed, gh);
  add_to(g(ffn_b1_).flat(), gh);
  matvec_t(w(ffn_w1_), 0, gh, g_mixed);
}

void CsaVae::latent_backward(const UserTrace& u, const BatchTrace& t,
                             std::span<const double> g_zhat, const Matrix* seed_eps,
                             const Matrix* seed_local, Matrix& g_adj, std::span<double> g_z) {
  const std::size_t k = cfg_.k, d = cfg_.d;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  const Matrix& A = t.adj.values;

  std::vector<double> g_mixed(d, 0.0);
  bypass_backward(u, g_zhat, g_mixed);
  std::vector<double> g_sinfo = g_mixed;
  const std::vector<double>& g_cu = g_mixed;

  // Mix layer.
  std::vector<double> g_score(k), g_e(k);
  for (std::size_t i = 0; i < k; ++i) g_score[i] = dot(g_cu, u.V.row(i));
  double sg = 0.0;
  for (std::size_t i = 0; i < k; ++i) sg += u.score[i] * g_score[i];
  for (std::size_t i = 0; i < k; ++i) g_e[i] = u.score[i] * (g_score[i] - sg);

  Matrix g_chat(k, d);
  std::vector<double> g_Q(d, 0.0), g_K(d), g_V(d), g_cn(d);
  for (std::size_t i = 0; i < k; ++i) {
    axpy(g_e[i] * inv_sqrt_d, u.K.row(i), g_Q);
    std::fill(g_K.begin(), g_K.end(), 0.0);
    axpy(g_e[i] * inv_sqrt_d, u.Q, g_K);
    std::fill(g_V.begin(), g_V.end(), 0.0);
    axpy(u.score[i], g_cu, g_V);

    outer_acc(g(mix_wh_), 0, u.c_hat.row(i), g_V);
    add_to(g(mix_bh_).flat(), g_V);
    matvec_t(w(mix_wh_), 0, g_V, g_chat.row(i));

    outer_acc(g(mix_wg_), 0, u.cn.row(i), g_K);
    add_to(g(mix_bg_).flat(), g_K);
    std::fill(g_cn.begin(), g_cn.end(), 0.0);
    matvec_t(w(mix_wg_), 0, g_K, g_cn);
    norm_backward(cfg_.mix_norm, u.cn.row(i), u.cn_scale[i], g_cn, g_chat.row(i));
  }
  outer_acc(g(mix_wf_), 0, u.sn, g_Q);
  add_to(g(mix_bf_).flat(), g_Q);
  std::vector<double> g_sn(d, 0.0);
  matvec_t(w(mix_wf_), 0, g_Q, g_sn);
  norm_backward(cfg_.mix_norm, u.sn, u.sn_scale, g_sn, g_sinfo);

  // Absolute assignments cut the path back to the reconstruction.
  for (std::size_t i = 0; i < k; ++i)
    if (u.assigned[i]) std::fill(g_chat.row(i).begin(), g_chat.row(i).end(), 0.0);

  // Reconstruction: c_rec_i = sigmoid(eps_i + sum_{j != i, A[j,i] != 0} Gm[j,i] M_j).
  Matrix g_eps(k, d);
  Matrix g_M(k, d);
  Matrix g_masked(k, k);
  for (std::size_t i = 0; i < k; ++i) {
    auto gp = g_chat.row(i);
    auto c = u.c_rec.row(i);
    for (std::size_t c_ = 0; c_ < d; ++c_) gp[c_] *= c[c_] * (1.0 - c[c_]);
    add_to(g_eps.row(i), gp);
    for (std::size_t j = 0; j < k; ++j) {
      if (j == i || A(j, i) == 0.0) continue;
      g_masked(j, i) = dot(gp, u.M.row(j));
      axpy(u.masked(j, i), gp, g_M.row(j));
    }
  }

  // SCM solve M = S^{-1} eps with S = I - A^T.
  const Matrix lambda = t.solver->solve_transposed(g_M);
  add_to(g_eps.flat(), lambda.flat());
  if (t.adj_learned)
    for (std::size_t a = 0; a < k; ++a)
      for (std::size_t b = 0; b < k; ++b)
        if (a != b) g_adj(a, b) += dot(u.M.row(a), lambda.row(b));

  // masked = (A . local) . mask
  Matrix g_local(k, k);
  for (std::size_t a = 0; a < k; ++a)
    for (std::size_t b = 0; b < k; ++b) {
      if (a == b) continue;
      const double gu = g_masked(a, b) * t.mask(a, b);
      if (t.adj_learned) g_adj(a, b) += gu * u.local(a, b);
      g_local(a, b) = gu * A(a, b);
    }
  if (seed_local && !seed_local->empty()) add_to(g_local.flat(), seed_local->flat());

  // Local attention graph.
  if (cfg_.use_local) {
    for (std::size_t i = 0; i < k; ++i) g_local(i, i) = 0.0;
    Matrix g_kin(k, d);
    std::vector<double> g_q(d), g_key(d), g_row(k);
    for (std::size_t h = 0; h < k; ++h) {
      const Matrix& P = u.prob[h];
      const double gv = dot(g_local.flat(), P.flat());
      Matrix g_s(k, k);
      for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < k; ++j) g_row[j] = g_local(i, j) * u.v[h];
        const double pg = dot(P.row(i), g_row);
        for (std::size_t j = 0; j < k; ++j) g_s(i, j) = P(i, j) * (g_row[j] - pg) * inv_sqrt_d;
      }
      for (std::size_t i = 0; i < k; ++i) {
        std::fill(g_q.begin(), g_q.end(), 0.0);
        std::fill(g_key.begin(), g_key.end(), 0.0);
        for (std::size_t j = 0; j < k; ++j) {
          axpy(g_s(i, j), u.key[h].row(j), g_q);
          axpy(g_s(j, i), u.q[h].row(j), g_key);
        }
        outer_acc(g(att_wq_), h * d, u.eps.row(i), g_q);
        matvec_t(w(att_wq_), h * d, g_q, g_eps.row(i));
        outer_acc(g(att_wk_), h * d, u.kin.row(i), g_key);
        matvec_t(w(att_wk_), h * d, g_key, g_kin.row(i));
      }
      axpy(gv, u.s_info, g(att_wv_).row(h));
      g(att_bv_)(0, h) += gv;
      axpy(gv, w(att_wv_).row(h), g_sinfo);
    }
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t c = 0; c < d; ++c) {
        g_eps(j, c) += g_kin(j, c) * u.s_info[c];
        g_sinfo[c] += g_kin(j, c) * u.eps(j, c);
      }
  }

  // Specific-information head.
  if (cfg_.sinfo_skip) add_to(g_z, g_sinfo);
  outer_acc(g(s_w2_), 0, u.s_h, g_sinfo);
  add_to(g(s_b2_).flat(), g_sinfo);
  std::vector<double> g_sh(d, 0.0);
  matvec_t(w(s_w2_), 0, g_sinfo, g_sh);
  tanh_backward(u.s_h, g_sh);
  outer_acc(g(s_w1_), 0, u.z, g_sh);
  add_to(g(s_b1_).flat(), g_sh);
  matvec_t(w(s_w1_), 0, g_sh, g_z);

  // Exogenous recovery eps_i = C_i - sum_j A[j,i] C_j.
  if (seed_eps && !seed_eps->empty()) add_to(g_eps.flat(), seed_eps->flat());
  Matrix g_C = g_eps;
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      if (j == i) continue;
      if (A(j, i) != 0.0) axpy(-A(j, i), g_eps.row(i), g_C.row(j));
      if (t.adj_learned) g_adj(j, i) -= dot(u.C.row(j), g_eps.row(i));
    }

  // Projection heads.
  std::vector<double> g_h(d);
  for (std::size_t i = 0; i < k; ++i) {
    auto gc = g_C.row(i);
    outer_acc(g(head_w2_), i * d, u.head_h.row(i), gc);
    add_to(g(head_b2_).row(i), gc);
    std::fill(g_h.begin(), g_h.end(), 0.0);
    matvec_t(w(head_w2_), i * d, gc, g_h);
    tanh_backward(u.head_h.row(i), g_h);
    outer_acc(g(head_w1_), i * d, u.z, g_h);
    add_to(g(head_b1_).row(i), g_h);
    matvec_t(w(head_w1_), i * d, g_h, g_z);
  }
}

void CsaVae::backward(const BatchTrace& t, const BackwardSeeds& seeds) {
  const std::size_t B = t.batch(), H = cfg_.hidden, d = cfg_.d, n = cfg_.n_items, k = cfg_.k;
  if (!seeds.scores.same_shape(t.scores))
    throw std::invalid_argument("model: score seed is " + shape_string(seeds.scores) +
                                ", expected " + shape_string(t.scores));
  using kernels::Trans;

  // Decoder.
  kernels::gemm(Trans::yes, Trans::no, H, n, B, t.dec_h.data(), H, seeds.scores.data(), n,
                g(dec_w2_).data(), n);
  colsum_acc(seeds.scores, g(dec_b2_));
  Matrix g_dh(B, H);
  kernels::gemm(Trans::no, Trans::yes, B, H, n, seeds.scores.data(), n, w(dec_w2_).data(), n,
                g_dh.data(), H);
  tanh_backward(t.dec_h.flat(), g_dh.flat());
  kernels::gemm(Trans::yes, Trans::no, d, H, B, t.z_hat.data(), d, g_dh.data(), H,
                g(dec_w1_).data(), H);
  colsum_acc(g_dh, g(dec_b1_));
  Matrix g_zhat(B, d);
  kernels::gemm(Trans::no, Trans::yes, B, d, H, g_dh.data(), H, w(dec_w1_).data(), H,
                g_zhat.data(), d);

  // Latent stage.
  Matrix g_z(B, d);
  Matrix g_adj(k, k);
  for (std::size_t b = 0; b < B; ++b) {
    const UserTrace& u = t.users[b];
    if (t.with_confounders) {
      const Matrix* se = seeds.epsilon.empty() ? nullptr : &seeds.epsilon[b];
      const Matrix* sl = seeds.local.empty() ? nullptr : &seeds.local[b];
      latent_backward(u, t, g_zhat.row(b), se, sl, g_adj, g_z.row(b));
    } else {
      std::vector<double> g_sinfo(d, 0.0);
      bypass_backward(u, g_zhat.row(b), g_sinfo);
      if (cfg_.sinfo_skip) add_to(g_z.row(b), g_sinfo);
      outer_acc(g(s_w2_), 0, u.s_h, g_sinfo);
      add_to(g(s_b2_).flat(), g_sinfo);
      std::vector<double> g_sh(d, 0.0);
      matvec_t(w(s_w2_), 0, g_sinfo, g_sh);
      tanh_backward(u.s_h, g_sh);
      outer_acc(g(s_w1_), 0, u.z, g_sh);
      add_to(g(s_b1_).flat(), g_sh);
      matvec_t(w(s_w1_), 0, g_sh, g_z.row(b));
    }
  }
  if (t.adj_learned) {
    if (!seeds.adjacency.empty()) add_to(g_adj.flat(), seeds.adjacency.flat());
    for (std::size_t i = 0; i < k; ++i) g_adj(i, i) = 0.0;
    const Matrix gl = sem::gumbel_sigmoid_backward(t.adj, cfg_.tau, g_adj);
    add_to(g(logits_).flat(), gl.flat());
  }

  // Encoder.
  Matrix g_out(B, 2 * d);
  for (std::size_t b = 0; b < B; ++b) {
    auto lv = t.log_var(b);
    for (std::size_t j = 0; j < d; ++j) {
      double gmu = g_z(b, j);
      double glv = 0.0;
      if (t.mode == Mode::train) glv = g_z(b, j) * t.eta(b, j) * 0.5 * std::exp(0.5 * lv[j]);
      if (!seeds.mu.empty()) gmu += seeds.mu(b, j);
      if (!seeds.log_var.empty()) glv += seeds.log_var(b, j);
      g_out(b, j) = gmu;
      g_out(b, d + j) = glv;
    }
  }
  kernels::gemm(Trans::yes, Trans::no, H, 2 * d, B, t.enc_h.data(), H, g_out.data(), 2 * d,
                g(enc_w2_).data(), 2 * d);
  colsum_acc(g_out, g(enc_b2_));
  Matrix g_eh(B, H);
  kernels::gemm(Trans::no, Trans::yes, B, H, 2 * d, g_out.data(), 2 * d, w(enc_w2_).data(),
                2 * d, g_eh.data(), H);
  tanh_backward(t.enc_h.flat(), g_eh.flat());
  colsum_acc(g_eh, g(enc_b1_));
  Matrix& gW1 = g(enc_w1_);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t e = 0; e < t.input[b].nnz(); ++e)
      axpy(t.input[b].value[e], g_eh.row(b), gW1.row(t.input[b].index[e]));
}

// ------------------------------------------------------- per-user helpers

EncoderOutput CsaVae::encode(const SparseRow& x, NoiseSource& noise) const {
  const std::span<const SparseRow> rows(&x, 1);
  ForwardNoise f = ForwardNoise::zeros(rows, cfg_);
  for (double& v : f.eta.flat()) v = noise.normal();
  // Reparameterized sample, no input dropout.
  BatchTrace tmp;
  encoder_forward(tmp, rows, f, Mode::train);
  EncoderOutput out;
  out.mu.assign(tmp.mu(0).begin(), tmp.mu(0).end());
  out.log_var.assign(tmp.log_var(0).begin(), tmp.log_var(0).end());
  out.z.assign(tmp.z.row(0).begin(), tmp.z.row(0).end());
  return out;
}

sem::ConfounderSet CsaVae::project_confounders(std::span<const double> z) const {
  UserTrace u;
  u.z.assign(z.begin(), z.end());
  heads_forward(u);
  return {u.C, sem::ConfounderRole::structured};
}

std::vector<double> CsaVae::specific_info(std::span<const double> z) const {
  UserTrace u;
  u.z.assign(z.begin(), z.end());
  sinfo_forward(u);
  return u.s_info;
}

sem::LocalGraph CsaVae::local_graph(const sem::ConfounderSet& epsilon,
                                    std::span<const double> s_info) const {
  if (epsilon.k() != cfg_.k || epsilon.d() != cfg_.d || s_info.size() != cfg_.d)
    throw std::invalid_argument("local_graph: shapes do not match the model");
  UserTrace u;
  u.eps = epsilon.vectors;
  u.s_info.assign(s_info.begin(), s_info.end());
  local_forward(u);
  return {u.local};
}

MixOutput CsaVae::mix(std::span<const double> s_info, const sem::ConfounderSet& c_hat) const {
  if (c_hat.k() != cfg_.k || c_hat.d() != cfg_.d || s_info.size() != cfg_.d)
    throw std::invalid_argument("mix: shapes do not match the model");
  UserTrace u;
  u.s_info.assign(s_info.begin(), s_info.end());
  u.c_hat = c_hat.vectors;
  mix_forward(u);
  return {u.score, u.c_user, u.mixed};
}

std::vector<double> CsaVae::decode(std::span<const double> z_hat) const {
  BatchTrace t;
  t.z_hat = Matrix(1, cfg_.d);
  std::copy(z_hat.begin(), z_hat.end(), t.z_hat.row(0).begin());
  decoder_forward(t);
  return {t.scores.flat().begin(), t.scores.flat().end()};
}

LatentBundle CsaVae::bundle_from(const BatchTrace& t, std::size_t b) {
  const UserTrace& u = t.users[b];
  LatentBundle out;
  out.encoder_out.mu.assign(t.mu(b).begin(), t.mu(b).end());
  out.encoder_out.log_var.assign(t.log_var(b).begin(), t.log_var(b).end());
  out.encoder_out.z.assign(t.z.row(b).begin(), t.z.row(b).end());
  out.s_info = u.s_info;
  out.C = {u.C, sem::ConfounderRole::structured};
  out.epsilon = {u.eps, sem::ConfounderRole::exogenous};
  out.C_hat = {u.c_hat, sem::ConfounderRole::reconstructed};
  out.C_user = u.c_user;
  out.z_hat = u.z_hat;
  out.mix_score = u.score;
  out.local_graph = u.local;
  out.user_graph = u.masked;
  return out;
}

std::pair<std::vector<double>, LatentBundle> CsaVae::forward_with_confounders(
    const SparseRow& x, const InterventionSpec& spec, NoiseSource& noise, Mode mode) const {
  const std::span<const SparseRow> rows(&x, 1);
  ForwardNoise f = ForwardNoise::zeros(rows, cfg_);
  if (mode == Mode::train) {
    f.gumbel = GumbelNoise::draw(noise, cfg_.k);
    for (double& v : f.eta.flat()) v = noise.normal();
  }
  BatchTrace t = forward(rows, f, mode, spec, true);
  return {std::vector<double>(t.scores.flat().begin(), t.scores.flat().end()), bundle_from(t, 0)};
}

std::vector<double> CsaVae::forward_without_confounders(const SparseRow& x, NoiseSource& noise,
                                                        Mode mode) const {
  const std::span<const SparseRow> rows(&x, 1);
  ForwardNoise f = ForwardNoise::zeros(rows, cfg_);
  if (mode == Mode::train)
    for (double& v : f.eta.flat()) v = noise.normal();
  BatchTrace t = forward(rows, f, mode, {}, false);
  return {t.scores.flat().begin(), t.scores.flat().end()};
}

std::vector<std::pair<std::string, std::vector<std::string>>> parameter_groups(
    const ModelConfig& cfg) {
  std::vector<std::pair<std::string, std::vector<std::string>>> groups = {
      {"encoder", {"enc_w1", "enc_b1", "enc_w2", "enc_b2"}},
      {"heads", {"head_w1", "head_b1", "head_w2", "head_b2"}},
      {"sinfo", {"s_w1", "s_b1", "s_w2", "s_b2"}},
      {"graph", {std::string(CsaVae::kLogits)}},
      {"attention", {"att_wq", "att_wk", "att_wv", "att_bv"}},
      {"mix", {"mix_wf", "mix_bf", "mix_wg", "mix_bg", "mix_wh", "mix_bh"}},
  };
  if (cfg.use_ffn) groups.push_back({"ffn", {"ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2"}});
  groups.push_back({"decoder", {"dec_w1", "dec_b1", "dec_w2", "dec_b2"}});
  return groups;
}

}  // namespace csavae

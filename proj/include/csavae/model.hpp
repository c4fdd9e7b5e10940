#pragma once

// The confounder-aware VAE. Encoder and decoder run batched through the
// dense kernels; everything between them (confounder heads, SCM, local
// attention graph, reconstruction and the mix layer) runs per user on k x d
// matrices. Forward passes record a trace that backward() consumes.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "csavae/matrix.hpp"
#include "csavae/noise.hpp"
#include "csavae/sem.hpp"

namespace csavae {

enum class Mode { train, eval };

enum class MixNorm { layer, l2 };

struct ModelConfig {
  std::size_t n_items = 0;
  std::size_t k = 4;
  std::size_t d = 64;
  std::size_t hidden = 600;
  double tau = 0.2;
  double dropout = 0.5;
  bool use_ffn = false;
  bool sinfo_skip = false;
  MixNorm mix_norm = MixNorm::layer;
  bool use_global = true;
  bool use_local = true;

  // False when both graphs are ablated: the confounder path is bypassed.
  bool confounders_active() const { return use_global || use_local; }
  void validate() const;
};

// Sparse real-valued interaction row. Training rows are binary.
struct SparseRow {
  std::vector<std::uint32_t> index;
  std::vector<double> value;

  static SparseRow from_items(std::span<const std::uint32_t> items);
  static SparseRow from_dense(std::span<const double> dense);
  std::size_t nnz() const { return index.size(); }
};

struct Param {
  std::string name;
  Matrix value;
  Matrix grad;
};

struct InterventionSpec {
  std::optional<sem::MaskGraph> mask;
  // do(c_i = v): overwrite the reconstructed c_hat_i.
  std::map<std::size_t, std::vector<double>> assignments;
  // c_hat_i += delta, used by the steering controls.
  std::map<std::size_t, std::vector<double>> offsets;

  bool empty() const;
  void validate(std::size_t k, std::size_t d) const;
};

struct EncoderOutput {
  std::vector<double> mu;
  std::vector<double> log_var;
  std::vector<double> z;
};

struct MixOutput {
  std::vector<double> score;   // length k, sums to 1
  std::vector<double> c_user;  // length d
  std::vector<double> z_hat;   // length d
};

struct LatentBundle {
  EncoderOutput encoder_out;
  std::vector<double> s_info;
  sem::ConfounderSet C;
  sem::ConfounderSet epsilon;
  sem::ConfounderSet C_hat;
  std::vector<double> C_user;
  std::vector<double> z_hat;
  std::vector<double> mix_score;
  Matrix local_graph;  // k x k
  Matrix user_graph;   // k x k, after masking
};

// Pre-drawn randomness for one batched forward pass.
struct ForwardNoise {
  GumbelNoise gumbel;                      // k x k pair
  Matrix eta;                              // B x d reparameterization noise
  std::vector<std::vector<std::uint8_t>> keep;  // per row, per nonzero dropout mask
  bool dropout = false;                    // apply `keep` with inverted scaling

  static ForwardNoise draw(NoiseSource& noise, std::span<const SparseRow> rows,
                           const ModelConfig& cfg, Mode mode);
  static ForwardNoise zeros(std::span<const SparseRow> rows, const ModelConfig& cfg);
};

// Intermediates of the per-user latent stage.
struct UserTrace {
  std::vector<double> z;
  Matrix head_h;     // k x d (tanh hidden of each head)
  Matrix C;          // k x d
  Matrix eps;        // k x d
  std::vector<double> s_h, s_info;
  Matrix kin;                 // k x d, eps_j (.) s_info
  std::vector<Matrix> q, key, prob;  // per head: k x d, k x d, k x k
  std::vector<double> v;      // per head value scalar
  Matrix local;      // k x k
  Matrix user_graph; // k x k, A (.) local
  Matrix masked;     // k x k
  Matrix M;          // k x d SCM solution
  Matrix c_rec;      // k x d, sigmoid output before intervention
  Matrix c_hat;      // k x d, after intervention
  std::vector<std::uint8_t> assigned;
  std::vector<double> sn;
  double sn_scale = 1.0;
  Matrix cn;
  std::vector<double> cn_scale;
  std::vector<double> Q;
  Matrix K, V;
  std::vector<double> score;
  std::vector<double> c_user;
  std::vector<double> mixed;
  std::vector<double> ffn_h;
  std::vector<double> z_hat;
};

struct BatchTrace {
  Mode mode = Mode::eval;
  bool with_confounders = true;
  std::vector<SparseRow> input;  // normalized, after dropout
  Matrix enc_h;                  // B x hidden
  Matrix enc_out;                // B x 2d  [mu | log_var]
  Matrix eta;                    // B x d (train only)
  Matrix z;                      // B x d
  sem::RelaxedAdjacency adj;     // sampled, hard, or ablated adjacency
  bool adj_learned = false;      // gradient flows to the global logits
  bool ridge_engaged = false;
  std::optional<sem::ScmSolver> solver;  // factorization shared by the batch
  Matrix mask;                   // k x k
  std::vector<UserTrace> users;
  Matrix z_hat;                  // B x d
  Matrix dec_h;                  // B x hidden
  Matrix scores;                 // B x n

  std::size_t batch() const { return scores.rows(); }
  std::span<const double> mu(std::size_t b) const;
  std::span<const double> log_var(std::size_t b) const;
};

// d(loss)/d(intermediate) seeds consumed by CsaVae::backward.
struct BackwardSeeds {
  Matrix scores;                 // B x n
  Matrix mu;                     // B x d, optional
  Matrix log_var;                // B x d, optional
  std::vector<Matrix> epsilon;   // per user k x d, optional
  std::vector<Matrix> local;     // per user k x k, optional
  Matrix adjacency;              // k x k, optional
};

class CsaVae {
 public:
  CsaVae(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }
  Param& param(std::string_view name);
  const Param& param(std::string_view name) const;
  void zero_grad();

  const Matrix& global_logits() const { return param(kLogits).value; }
  sem::GlobalGraphParams global_graph() const { return {global_logits()}; }

  // Adjacency used by a forward pass: relaxed sample in training, noise-free
  // hard graph in evaluation, all-ones when the global graph is ablated.
  sem::RelaxedAdjacency adjacency(Mode mode, const GumbelNoise& gumbel) const;

  BatchTrace forward(std::span<const SparseRow> rows, const ForwardNoise& noise, Mode mode,
                     const InterventionSpec& spec = {}, bool with_confounders = true) const;
  void backward(const BatchTrace& trace, const BackwardSeeds& seeds);

  // Per-user building blocks.
  EncoderOutput encode(const SparseRow& x, NoiseSource& noise) const;
  sem::ConfounderSet project_confounders(std::span<const double> z) const;
  std::vector<double> specific_info(std::span<const double> z) const;
  sem::LocalGraph local_graph(const sem::ConfounderSet& epsilon,
                              std::span<const double> s_info) const;
  MixOutput mix(std::span<const double> s_info, const sem::ConfounderSet& c_hat) const;
  std::vector<double> decode(std::span<const double> z_hat) const;

  // Scores and latent bundle for one user. In eval mode the noise source is
  // not consulted.
  std::pair<std::vector<double>, LatentBundle> forward_with_confounders(
      const SparseRow& x, const InterventionSpec& spec, NoiseSource& noise,
      Mode mode = Mode::eval) const;
  std::vector<double> forward_without_confounders(const SparseRow& x, NoiseSource& noise,
                                                  Mode mode = Mode::eval) const;

  static LatentBundle bundle_from(const BatchTrace& trace, std::size_t b);

  static constexpr std::string_view kLogits = "global_logits";

 private:
  void init_params(std::uint64_t seed);
  std::size_t index_of(std::string_view name) const;
  const Matrix& w(std::size_t id) const { return params_[id].value; }
  Matrix& g(std::size_t id) { return params_[id].grad; }

  void encoder_forward(BatchTrace& t, std::span<const SparseRow> rows, const ForwardNoise& noise,
                       Mode mode) const;
  void latent_forward(UserTrace& u, std::span<const double> z, const sem::RelaxedAdjacency& adj,
                      const sem::ScmSolver& solver, const Matrix& mask,
                      const InterventionSpec& spec) const;
  void heads_forward(UserTrace& u) const;
  void sinfo_forward(UserTrace& u) const;
  void local_forward(UserTrace& u) const;
  void mix_forward(UserTrace& u) const;
  void bypass_forward(UserTrace& u, std::span<const double> z) const;
  void decoder_forward(BatchTrace& t) const;

  void latent_backward(const UserTrace& u, const BatchTrace& t, std::span<const double> g_zhat,
                       const Matrix* seed_eps, const Matrix* seed_local, Matrix& g_adj,
                       std::span<double> g_z);
  void bypass_backward(const UserTrace& u, std::span<const double> g_zhat,
                       std::span<double> g_mixed);

  ModelConfig cfg_;
  std::vector<Param> params_;

  // Parameter indices, resolved once after init.
  std::size_t enc_w1_, enc_b1_, enc_w2_, enc_b2_;
  std::size_t head_w1_, head_b1_, head_w2_, head_b2_;
  std::size_t s_w1_, s_b1_, s_w2_, s_b2_;
  std::size_t logits_;
  std::size_t att_wq_, att_wk_, att_wv_, att_bv_;
  std::size_t mix_wf_, mix_bf_, mix_wg_, mix_bg_, mix_wh_, mix_bh_;
  std::size_t ffn_w1_, ffn_b1_, ffn_w2_, ffn_b2_;
  std::size_t dec_w1_, dec_b1_, dec_w2_, dec_b2_;
};

// Groups used by gradient checks and documentation.
std::vector<std::pair<std::string, std::vector<std::string>>> parameter_groups(
    const ModelConfig& cfg);

}  // namespace csavae

#include "doctest.h"

#include "csavae/model.hpp"
#include "csavae/objective.hpp"
#include "support.hpp"

using namespace csavae;
using testing::Gen;

namespace {

ModelConfig tiny(std::size_t n = 12, std::size_t k = 3, std::size_t d = 5, std::size_t h = 7) {
  ModelConfig c;
  c.n_items = n;
  c.k = k;
  c.d = d;
  c.hidden = h;
  return c;
}

SparseRow random_row(Gen& g, std::size_t n) {
  std::vector<std::uint32_t> items;
  for (std::size_t i = 0; i < n; ++i)
    if (g.coin(0.3)) items.push_back(static_cast<std::uint32_t>(i));
  if (items.empty()) items.push_back(static_cast<std::uint32_t>(g.index(0, n - 1)));
  return SparseRow::from_items(items);
}

void set_identity(Matrix& m) {
  m.fill(0.0);
  for (std::size_t i = 0; i < std::min(m.rows(), m.cols()); ++i) m(i, i) = 1.0;
}

}  // namespace

TEST_CASE("property: bundle shapes over random configurations") {
  Gen g(101);
  for (int trial = 0; trial < 25; ++trial) {
    ModelConfig c = tiny(g.index(2, 30), g.index(1, 6), g.index(1, 8), g.index(1, 9));
    c.use_ffn = g.coin();
    c.sinfo_skip = g.coin();
    c.mix_norm = g.coin() ? MixNorm::layer : MixNorm::l2;
    const CsaVae m(c, trial);
    NoiseSource rng(trial);
    const auto [scores, b] =
        m.forward_with_confounders(random_row(g, c.n_items), {}, rng, trial % 2 ? Mode::train : Mode::eval);
    CHECK(scores.size() == c.n_items);
    CHECK(b.encoder_out.mu.size() == c.d);
    CHECK(b.encoder_out.log_var.size() == c.d);
    CHECK(b.encoder_out.z.size() == c.d);
    CHECK(b.s_info.size() == c.d);
    for (const auto* s : {&b.C, &b.epsilon, &b.C_hat}) {
      CHECK(s->k() == c.k);
      CHECK(s->d() == c.d);
    }
    CHECK(b.C_user.size() == c.d);
    CHECK(b.z_hat.size() == c.d);
    CHECK(b.mix_score.size() == c.k);
    CHECK(b.local_graph.rows() == c.k);
    CHECK(b.user_graph.cols() == c.k);
    for (double v : scores) CHECK(std::isfinite(v));
  }
}

TEST_SUITE("encode") {
  TEST_CASE("zero noise gives z = mu and repeated calls agree") {
    const CsaVae m(tiny(), 1);
    Gen g(2);
    const SparseRow x = random_row(g, 12);
    NoiseSource zero = NoiseSource::zero();
    const auto e = m.encode(x, zero);
    CHECK(e.z == e.mu);
    NoiseSource a(9), b(9);
    CHECK(m.encode(x, a).z == m.encode(x, b).z);
  }

  TEST_CASE("input normalization is idempotent") {
    const CsaVae m(tiny(), 3);
    std::vector<double> dense(12, 0.0);
    dense[1] = dense[4] = dense[7] = 1.0;
    std::vector<double> unit = dense;
    for (double& v : unit) v /= std::sqrt(3.0);
    NoiseSource z1 = NoiseSource::zero(), z2 = NoiseSource::zero();
    const auto a = m.encode(SparseRow::from_dense(dense), z1);
    const auto b = m.encode(SparseRow::from_dense(unit), z2);
    CHECK(testing::max_abs_diff(a.mu, b.mu) < 1e-14);
    CHECK(testing::max_abs_diff(a.log_var, b.log_var) < 1e-14);
  }

  TEST_CASE("cold user is accepted") {
    const CsaVae m(tiny(), 4);
    NoiseSource z = NoiseSource::zero();
    const auto e = m.encode(SparseRow{}, z);
    for (double v : e.mu) CHECK(std::isfinite(v));
  }
}

TEST_SUITE("confounder heads") {
  TEST_CASE("single head and distinct heads") {
    Gen g(5);
    const CsaVae one(tiny(10, 1, 4, 3), 5);
    CHECK(one.project_confounders(g.vec(4)).vectors.rows() == 1);
    const CsaVae m(tiny(), 6);
    const auto c = m.project_confounders(g.vec(5)).vectors;
    CHECK(c.row(0)[0] != c.row(1)[0]);
  }

  TEST_CASE("head i does not depend on head j's parameters") {
    Gen g(7);
    CsaVae m(tiny(), 7);
    const auto z = g.vec(5);
    const Matrix before = m.project_confounders(z).vectors;
    const std::size_t d = 5;
    // Perturb every parameter row that belongs to head 2.
    for (auto name : {"head_w1", "head_w2"})
      for (std::size_t r = 2 * d; r < 3 * d; ++r)
        for (double& v : m.param(name).value.row(r)) v += 0.3;
    for (auto name : {"head_b1", "head_b2"})
      for (double& v : m.param(name).value.row(2)) v -= 0.2;
    const Matrix after = m.project_confounders(z).vectors;
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t c = 0; c < d; ++c) CHECK(after(i, c) == before(i, c));
    CHECK(after(2, 0) != before(2, 0));
  }
}

TEST_SUITE("specific information") {
  TEST_CASE("deterministic and user dependent") {
    Gen g(8);
    const CsaVae m(tiny(), 8);
    const auto z1 = g.vec(5), z2 = g.vec(5);
    CHECK(m.specific_info(z1) == m.specific_info(z1));
    CHECK(m.specific_info(z1) != m.specific_info(z2));
  }

  TEST_CASE("zero weights without skip give the bias") {
    Gen g(9);
    CsaVae m(tiny(), 9);
    m.param("s_w1").value.fill(0.0);
    m.param("s_w2").value.fill(0.0);
    for (double& v : m.param("s_b2").value.flat()) v = g.real();
    const auto bias = m.param("s_b2").value.flat();
    const auto s = m.specific_info(g.vec(5));
    CHECK(std::vector<double>(bias.begin(), bias.end()) == s);
  }
}

TEST_SUITE("local graph") {
  TEST_CASE("user specific with zero diagonal") {
    Gen g(10);
    const CsaVae m(tiny(), 10);
    const sem::ConfounderSet eps{g.matrix(3, 5)};
    const auto a = m.local_graph(eps, g.vec(5)).weights;
    const auto b = m.local_graph(eps, g.vec(5)).weights;
    CHECK(a != b);
    for (std::size_t i = 0; i < 3; ++i) CHECK(a(i, i) == 0.0);

    const CsaVae single(tiny(10, 1, 4, 3), 11);
    CHECK(single.local_graph({g.matrix(1, 4)}, g.vec(4)).weights == Matrix(1, 1));
  }

  TEST_CASE("permutation equivariance with tied heads") {
    Gen g(12);
    const std::size_t k = 4, d = 3;
    CsaVae m(tiny(9, k, d, 4), 12);
    // Copy head 0's attention parameters into every head.
    for (auto name : {"att_wq", "att_wk"}) {
      Matrix& w = m.param(name).value;
      for (std::size_t h = 1; h < k; ++h)
        for (std::size_t r = 0; r < d; ++r)
          std::copy(w.row(r).begin(), w.row(r).end(), w.row(h * d + r).begin());
    }
    Matrix& wv = m.param("att_wv").value;
    for (std::size_t h = 1; h < k; ++h) std::copy(wv.row(0).begin(), wv.row(0).end(), wv.row(h).begin());

    const Matrix eps = g.matrix(k, d);
    const auto s = g.vec(d);
    const std::vector<std::size_t> perm{2, 0, 3, 1};
    Matrix peps(k, d);
    for (std::size_t i = 0; i < k; ++i) std::copy(eps.row(perm[i]).begin(), eps.row(perm[i]).end(), peps.row(i).begin());
    const Matrix a = m.local_graph({eps}, s).weights;
    const Matrix b = m.local_graph({peps}, s).weights;
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j) CHECK(b(i, j) == doctest::Approx(a(perm[i], perm[j])).epsilon(1e-12));
  }
}

TEST_SUITE("mix") {
  // f, g, h = identity (unit weights, zero biases).
  CsaVae identity_mix(MixNorm norm) {
    ModelConfig c = tiny(4, 2, 2, 3);
    c.mix_norm = norm;
    CsaVae m(c, 13);
    for (auto w : {"mix_wf", "mix_wg", "mix_wh"}) set_identity(m.param(w).value);
    for (auto b : {"mix_bf", "mix_bg", "mix_bh"}) m.param(b).value.fill(0.0);
    return m;
  }

  std::vector<double> softmax2(double a, double b) {
    const double m = std::max(a, b);
    const double ea = std::exp(a - m), eb = std::exp(b - m);
    return {ea / (ea + eb), eb / (ea + eb)};
  }

  TEST_CASE("worked example with unit-norm scaling") {
    const CsaVae m = identity_mix(MixNorm::l2);
    const Matrix c = Matrix::from_rows({{1, 0}, {0, 1}});
    const auto out = m.mix(std::vector<double>{1, 0}, {c});
    const auto want = softmax2(1.0 / std::sqrt(2.0), 0.0);
    CHECK(out.score[0] == doctest::Approx(want[0]).epsilon(1e-14));
    CHECK(out.score[1] == doctest::Approx(want[1]).epsilon(1e-14));
    CHECK(out.c_user[0] == doctest::Approx(want[0]).epsilon(1e-14));
    CHECK(out.c_user[1] == doctest::Approx(want[1]).epsilon(1e-14));
    CHECK(out.z_hat[0] == doctest::Approx(1.0 + want[0]).epsilon(1e-14));
  }

  TEST_CASE("same example under layer normalization") {
    // Layer norm maps [1, 0] to [1, -1] (up to the variance epsilon) and
    // [0, 1] to [-1, 1], so the logits are +-2/sqrt(2).
    const CsaVae m = identity_mix(MixNorm::layer);
    const auto out = m.mix(std::vector<double>{1, 0}, {Matrix::from_rows({{1, 0}, {0, 1}})});
    const double s = 0.5 / std::sqrt(0.25 + 1e-5);
    const auto want = softmax2(2 * s * s / std::sqrt(2.0), -2 * s * s / std::sqrt(2.0));
    CHECK(out.score[0] == doctest::Approx(want[0]).epsilon(1e-12));
    CHECK(out.score[0] == doctest::Approx(softmax2(std::sqrt(2.0), -std::sqrt(2.0))[0]).epsilon(1e-4));
  }

  TEST_CASE("single confounder and probability simplex") {
    Gen g(14);
    const CsaVae one(tiny(6, 1, 3, 3), 14);
    const Matrix c = g.matrix(1, 3);
    const auto out = one.mix(g.vec(3), {c});
    CHECK(out.score == std::vector<double>{1.0});
    std::vector<double> h(one.param("mix_bh").value.flat().begin(), one.param("mix_bh").value.flat().end());
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t r = 0; r < 3; ++r) h[j] += c(0, r) * one.param("mix_wh").value(r, j);
    CHECK(testing::max_abs_diff(out.c_user, h) < 1e-14);

    const CsaVae m(tiny(), 15);
    for (int t = 0; t < 50; ++t) {
      const auto o = m.mix(g.vec(5, -4, 4), {g.matrix(3, 5, -4, 4)});
      double s = 0.0;
      for (double p : o.score) s += p;
      CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
    }
  }
}

TEST_SUITE("decode") {
  TEST_CASE("probabilities and degenerate parameters") {
    Gen g(16);
    CsaVae m(tiny(), 16);
    const auto zh = g.vec(5);
    const auto s = m.decode(zh);
    CHECK(s == m.decode(zh));
    double mx = *std::max_element(s.begin(), s.end()), z = 0.0;
    for (double v : s) z += std::exp(v - mx);
    double total = 0.0;
    for (double v : s) total += std::exp(v - mx) / z;
    CHECK(total == doctest::Approx(1.0).epsilon(1e-14));

    m.param("dec_w2").value.fill(0.0);
    m.param("dec_b2").value.fill(0.25);
    for (double v : m.decode(zh)) CHECK(v == 0.25);
    // Uniform scores: every item gets 1/n.
    SparseRow one = SparseRow::from_items(std::vector<std::uint32_t>{3});
    CHECK(reconstruction_loglik(m.decode(zh), one) == doctest::Approx(-std::log(12.0)).epsilon(1e-14));
  }
}

TEST_SUITE("inference paths") {
  TEST_CASE("an empty intervention equals the plain pipeline") {
    Gen g(17);
    const CsaVae m(tiny(), 17);
    std::vector<SparseRow> rows{random_row(g, 12), random_row(g, 12)};
    const ForwardNoise none = ForwardNoise::zeros(rows, m.config());
    const BatchTrace plain = m.forward(rows, none, Mode::eval);
    InterventionSpec spec;
    spec.mask = sem::MaskGraph::all_ones(3);
    const BatchTrace masked = m.forward(rows, none, Mode::eval, spec);
    CHECK(plain.scores == masked.scores);
    NoiseSource zero = NoiseSource::zero();
    const auto single = m.forward_with_confounders(rows[1], {}, zero).first;
    CHECK(testing::max_abs_diff(single, std::vector<double>(plain.scores.row(1).begin(), plain.scores.row(1).end())) < 1e-13);
  }

  TEST_CASE("assigning zero vectors leaves only h(0)") {
    Gen g(18);
    const CsaVae m(tiny(), 18);
    InterventionSpec spec;
    for (std::size_t i = 0; i < 3; ++i) spec.assignments[i] = std::vector<double>(5, 0.0);
    NoiseSource zero = NoiseSource::zero();
    const auto [scores, b] = m.forward_with_confounders(random_row(g, 12), spec, zero);
    const auto bh = m.param("mix_bh").value.flat();
    for (std::size_t j = 0; j < 5; ++j) CHECK(b.C_user[j] == doctest::Approx(bh[j]).epsilon(1e-14));
  }

  TEST_CASE("confounder-free path ignores the graph and the Gumbel noise") {
    Gen g(19);
    CsaVae m(tiny(), 19);
    const SparseRow x = random_row(g, 12);
    NoiseSource a(1);
    const auto base = m.forward_without_confounders(x, a, Mode::train);
    for (double& v : m.param(CsaVae::kLogits).value.flat()) v = g.real(-9, 9);
    NoiseSource b(1);
    CHECK(m.forward_without_confounders(x, b, Mode::train) == base);
    NoiseSource e1 = NoiseSource::zero(), e2 = NoiseSource::zero();
    CHECK(m.forward_without_confounders(x, e1) == m.forward_without_confounders(x, e2));
  }

  TEST_CASE("confounder-free path has zero gradient for confounder parameters") {
    Gen g(20);
    CsaVae m(tiny(), 20);
    std::vector<SparseRow> rows{random_row(g, 12), random_row(g, 12)};
    NoiseSource rng(20);
    const ForwardNoise noise = ForwardNoise::draw(rng, rows, m.config(), Mode::train);
    const BatchTrace t = m.forward(rows, noise, Mode::train, {}, false);
    const BatchLoss bl = batch_loss(t, rows, LossWeights{}, m.config());
    m.zero_grad();
    m.backward(t, bl.seeds);
    for (const auto& [group, names] : parameter_groups(m.config())) {
      const bool bypassed = group == "graph" || group == "heads" || group == "attention" || group == "mix";
      double mag = 0.0;
      for (const auto& n : names)
        for (double v : m.param(n).grad.flat()) mag = std::max(mag, std::fabs(v));
      if (bypassed)
        CHECK_MESSAGE(mag == 0.0, group);
      else
        CHECK_MESSAGE(mag > 0.0, group);
    }
  }

  TEST_CASE("assigning the un-intervened value leaves scores unchanged") {
    Gen g(21);
    const CsaVae m(tiny(), 21);
    const SparseRow x = random_row(g, 12);
    NoiseSource z1 = NoiseSource::zero(), z2 = NoiseSource::zero();
    const auto [base, b] = m.forward_with_confounders(x, {}, z1);
    InterventionSpec spec;
    spec.assignments[1] = std::vector<double>(b.C_hat.vectors.row(1).begin(), b.C_hat.vectors.row(1).end());
    const auto same = m.forward_with_confounders(x, spec, z2).first;
    CHECK(testing::max_abs_diff(base, same) < 1e-9);
  }

  TEST_CASE("fixed seeds make both paths reproducible") {
    Gen g(22);
    const CsaVae m(tiny(), 22);
    const SparseRow x = random_row(g, 12);
    NoiseSource a(3), b(3);
    CHECK(m.forward_with_confounders(x, {}, a, Mode::train).first ==
          m.forward_with_confounders(x, {}, b, Mode::train).first);
    NoiseSource c(4), d(4);
    CHECK(m.forward_without_confounders(x, c, Mode::train) == m.forward_without_confounders(x, d, Mode::train));
    CHECK(CsaVae(tiny(), 99).params()[0].value == CsaVae(tiny(), 99).params()[0].value);
  }

  TEST_CASE("ablating both graphs bypasses the confounder path") {
    Gen g(23);
    ModelConfig c = tiny();
    c.use_global = c.use_local = false;
    CsaVae m(c, 23);
    const SparseRow x = random_row(g, 12);
    NoiseSource z1 = NoiseSource::zero(), z2 = NoiseSource::zero();
    const auto with = m.forward_with_confounders(x, {}, z1).first;
    CHECK(with == m.forward_without_confounders(x, z2));
  }

  TEST_CASE("invalid specs are rejected") {
    const CsaVae m(tiny(), 24);
    InterventionSpec spec;
    spec.assignments[3] = std::vector<double>(5, 0.0);
    NoiseSource z = NoiseSource::zero();
    CHECK_THROWS(m.forward_with_confounders(SparseRow::from_items(std::vector<std::uint32_t>{1}), spec, z));
    InterventionSpec nan;
    nan.assignments[0] = std::vector<double>(5, std::nan(""));
    CHECK_THROWS(m.forward_with_confounders(SparseRow::from_items(std::vector<std::uint32_t>{1}), nan, z));
  }
}

#include "csavae/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace csavae {

Adam::Adam(AdamConfig cfg, const std::vector<Param>& params) : cfg_(cfg) {
  for (const auto& p : params) {
    m_.emplace_back(p.value.rows(), p.value.cols());
    v_.emplace_back(p.value.rows(), p.value.cols());
  }
}

void Adam::step(std::vector<Param>& params) {
  if (params.size() != m_.size()) throw std::invalid_argument("adam: parameter count changed");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  const double step = cfg_.lr / bc1;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto w = params[p].value.flat();
    auto g = params[p].grad.flat();
    auto m = m_[p].flat();
    auto v = v_[p].flat();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] + cfg_.weight_decay * w[i];
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
      w[i] -= step * m[i] / (std::sqrt(v[i] / bc2) + cfg_.eps);
    }
  }
}

void Adam::restore(std::uint64_t steps, std::vector<Matrix> m, std::vector<Matrix> v) {
  if (m.size() != m_.size() || v.size() != v_.size())
    throw std::invalid_argument("adam: restored state does not match the parameters");
  for (std::size_t i = 0; i < m.size(); ++i)
    if (!m[i].same_shape(m_[i]) || !v[i].same_shape(v_[i]))
      throw std::invalid_argument("adam: restored moment shape mismatch");
  t_ = steps;
  m_ = std::move(m);
  v_ = std::move(v);
}

}  // namespace csavae

#include "csavae/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "csavae/errors.hpp"

namespace csavae {

ItemList top_k(std::span<const double> scores, std::size_t K,
               std::span<const std::uint32_t> exclude) {
  std::vector<std::uint32_t> cand;
  cand.reserve(scores.size());
  std::size_t e = 0;
  for (std::uint32_t i = 0; i < scores.size(); ++i) {
    while (e < exclude.size() && exclude[e] < i) ++e;
    if (e < exclude.size() && exclude[e] == i) continue;
    cand.push_back(i);
  }
  const std::size_t k = std::min(K, cand.size());
  auto better = [&](std::uint32_t a, std::uint32_t b) {
    return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
  };
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end(), better);
  cand.resize(k);
  return cand;
}

namespace {

bool contains(std::span<const std::uint32_t> sorted, std::uint32_t v) {
  return std::binary_search(sorted.begin(), sorted.end(), v);
}

std::vector<std::uint32_t> sorted_copy(std::span<const std::uint32_t> v) {
  std::vector<std::uint32_t> s(v.begin(), v.end());
  std::sort(s.begin(), s.end());
  s.erase(std::unique(s.begin(), s.end()), s.end());
  return s;
}

}  // namespace

double recall_at_k(std::span<const std::uint32_t> ranked, std::span<const std::uint32_t> relevant,
                   std::size_t K) {
  if (K == 0 || relevant.empty()) return 0.0;
  const auto rel = sorted_copy(relevant);
  const std::size_t n = std::min(K, ranked.size());
  std::size_t hits = 0;
  for (std::size_t p = 0; p < n; ++p) hits += contains(rel, ranked[p]);
  return static_cast<double>(hits) / static_cast<double>(std::min(K, rel.size()));
}

double ndcg_at_k(std::span<const std::uint32_t> ranked, std::span<const std::uint32_t> relevant,
                 std::size_t K) {
  if (K == 0 || relevant.empty()) return 0.0;
  const auto rel = sorted_copy(relevant);
  const std::size_t n = std::min(K, ranked.size());
  double dcg = 0.0;
  for (std::size_t p = 0; p < n; ++p)
    if (contains(rel, ranked[p])) dcg += 1.0 / std::log2(static_cast<double>(p) + 2.0);
  double idcg = 0.0;
  for (std::size_t p = 0; p < std::min(K, rel.size()); ++p)
    idcg += 1.0 / std::log2(static_cast<double>(p) + 2.0);
  return dcg / idcg;
}

std::vector<double> popularity_rank(std::span<const std::uint64_t> popularity) {
  std::vector<std::size_t> order(popularity.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return popularity[a] < popularity[b]; });
  std::vector<double> phi(popularity.size());
  for (std::size_t r = 0; r < order.size(); ++r) phi[order[r]] = static_cast<double>(r + 1);
  return phi;
}

double avp_at_k(const std::vector<ItemList>& lists, std::span<const std::uint64_t> popularity,
                std::size_t K) {
  const auto phi = popularity_rank(popularity);
  double total = 0.0;
  std::size_t users = 0;
  for (const auto& l : lists) {
    const std::size_t n = std::min(K, l.size());
    if (n == 0) continue;
    double s = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      if (l[p] >= phi.size()) throw std::out_of_range("avp: item outside the popularity table");
      s += phi[l[p]];
    }
    total += s / static_cast<double>(n);
    ++users;
  }
  return users ? total / static_cast<double>(users) : 0.0;
}

GraphMetrics graph_metrics(const Matrix& pred, const Matrix& truth) {
  if (!pred.same_shape(truth) || pred.rows() != pred.cols())
    throw std::invalid_argument("graph_metrics: shapes " + shape_string(pred) + " and " +
                                shape_string(truth) + " differ or are not square");
  const std::size_t k = pred.rows();
  auto bin = [](double v) {
    if (v != 0.0 && v != 1.0) throw DomainError("graph_metrics: graphs must be binary");
    return v != 0.0;
  };
  GraphMetrics m;
  std::size_t tp = 0, n_pred = 0, n_true = 0;
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      if (i == j) continue;
      const bool p = bin(pred(i, j)), t = bin(truth(i, j));
      n_pred += p;
      n_true += t;
      tp += p && t;
      if (i < j) {
        const bool pr = bin(pred(j, i)), tr = bin(truth(j, i));
        if (p != t || pr != tr) ++m.shd;
      }
    }
  m.edge_precision = n_pred ? static_cast<double>(tp) / n_pred : (n_true ? 0.0 : 1.0);
  m.edge_recall = n_true ? static_cast<double>(tp) / n_true : 1.0;
  return m;
}

EvalResult evaluate(const CsaVae& model, const InteractionMatrix& input,
                    const InteractionMatrix& exclude, const InteractionMatrix& relevant,
                    std::span<const std::uint64_t> popularity, const EvalOptions& opt) {
  const std::size_t U = input.n_users();
  if (exclude.n_users() != U || relevant.n_users() != U)
    throw std::invalid_argument("evaluate: interaction matrices disagree on user count");
  const std::size_t kmax = opt.ks.empty() ? 0 : *std::max_element(opt.ks.begin(), opt.ks.end());

  std::vector<std::size_t> users;
  EvalResult out;
  for (std::size_t u = 0; u < U; ++u) {
    if (relevant.rows[u].empty())
      ++out.users_skipped;
    else
      users.push_back(u);
  }
  std::map<std::size_t, double> rsum, nsum;
  std::vector<ItemList> lists;
  lists.reserve(users.size());
  const std::size_t bs = std::max<std::size_t>(1, opt.batch_size);
  for (std::size_t start = 0; start < users.size(); start += bs) {
    const std::size_t end = std::min(users.size(), start + bs);
    std::vector<SparseRow> rows;
    for (std::size_t b = start; b < end; ++b) rows.push_back(input.sparse(users[b]));
    const ForwardNoise noise = ForwardNoise::zeros(rows, model.config());
    const BatchTrace t = model.forward(rows, noise, Mode::eval, opt.spec, opt.with_confounders);
    for (std::size_t b = start; b < end; ++b) {
      const std::size_t u = users[b];
      const auto& ex = exclude.rows[u];
      ItemList list = top_k(t.scores.row(b - start), kmax, ex);
      for (auto i : list)
        if (std::binary_search(ex.begin(), ex.end(), i))
          throw std::logic_error("evaluate: ranked list contains an excluded item");
      for (std::size_t K : opt.ks) {
        rsum[K] += recall_at_k(list, relevant.rows[u], K);
        nsum[K] += ndcg_at_k(list, relevant.rows[u], K);
      }
      lists.push_back(std::move(list));
    }
  }
  out.users_scored = users.size();
  const double n = users.empty() ? 1.0 : static_cast<double>(users.size());
  for (std::size_t K : opt.ks) {
    out.metrics["recall@" + std::to_string(K)] = rsum[K] / n;
    out.metrics["ndcg@" + std::to_string(K)] = nsum[K] / n;
    if (opt.compute_avp) out.metrics["avp@" + std::to_string(K)] = avp_at_k(lists, popularity, K);
  }
  return out;
}

EvalResult evaluate_validation(const CsaVae& model, const SplitDataset& ds,
                               const EvalOptions& options) {
  return evaluate(model, ds.train, ds.train, ds.validation, ds.item_popularity, options);
}

EvalResult evaluate_test(const CsaVae& model, const SplitDataset& ds, const EvalOptions& options) {
  const InteractionMatrix seen = merge(ds.train, ds.validation);
  return evaluate(model, seen, seen, ds.test, ds.item_popularity, options);
}

void ResultsTable::add(std::string metric, std::size_t K, std::string variant, double value) {
  rows.push_back({std::move(metric), K, std::move(variant), value});
}

void ResultsTable::add_eval(const EvalResult& r, const std::string& variant) {
  for (const auto& [name, v] : r.metrics) {
    const auto at = name.find('@');
    add(name.substr(0, at), std::stoul(name.substr(at + 1)), variant, v);
  }
}

std::string ResultsTable::to_tsv() const {
  std::ostringstream os;
  os.precision(17);
  os << "# csavae-results v1\nmetric\tK\tvariant\tvalue\n";
  for (const auto& r : rows) os << r.metric << '\t' << r.K << '\t' << r.variant << '\t' << r.value << '\n';
  return os.str();
}

std::string ResultsTable::summary() const {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(5);
  for (const auto& r : rows) {
    os << r.variant << "  " << r.metric;
    if (r.K) os << '@' << r.K;  // K = 0 marks metrics without a cutoff
    os << " = " << r.value << '\n';
  }
  return os.str();
}

ResultsTable ResultsTable::from_tsv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "# csavae-results v1")
    throw FormatError("results: missing or unsupported version header");
  if (!std::getline(in, line) || line != "metric\tK\tvariant\tvalue")
    throw FormatError("results: unexpected column header");
  ResultsTable t;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    ResultRow r;
    std::string k, v;
    if (!std::getline(ls, r.metric, '\t') || !std::getline(ls, k, '\t') ||
        !std::getline(ls, r.variant, '\t') || !std::getline(ls, v))
      throw FormatError("results: malformed row '" + line + "'");
    r.K = std::stoul(k);
    r.value = std::stod(v);
    t.rows.push_back(std::move(r));
  }
  return t;
}

void ResultsTable::write(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("results: cannot write " + path.string());
  out << to_tsv();
}

}  // namespace csavae

#pragma once

// All-ranking metrics, graph recovery metrics and the results table.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "csavae/data.hpp"
#include "csavae/matrix.hpp"
#include "csavae/model.hpp"

namespace csavae {

using ItemList = std::vector<std::uint32_t>;

// Indices of the K highest scores, excluding `exclude` (sorted). Ties go to
// the lower item index. Returns fewer than K items when not enough remain.
ItemList top_k(std::span<const double> scores, std::size_t K, std::span<const std::uint32_t> exclude);

// |top-K intersect relevant| / min(K, |relevant|); 0 for K = 0.
double recall_at_k(std::span<const std::uint32_t> ranked, std::span<const std::uint32_t> relevant,
                   std::size_t K);
// Binary-gain DCG with log2(position + 1) discount over the ideal DCG.
double ndcg_at_k(std::span<const std::uint32_t> ranked, std::span<const std::uint32_t> relevant,
                 std::size_t K);

// phi(i): 1-based ascending rank of the train count, ties by item index.
std::vector<double> popularity_rank(std::span<const std::uint64_t> popularity);
// Mean over lists of the mean phi of each list's first K items.
double avp_at_k(const std::vector<ItemList>& lists, std::span<const std::uint64_t> popularity,
                std::size_t K);

struct GraphMetrics {
  int shd = 0;
  double edge_precision = 0.0;
  double edge_recall = 0.0;
};

// SHD counts each unordered pair whose (i->j, j->i) pattern differs once, so a
// reversed edge costs 1.
GraphMetrics graph_metrics(const Matrix& predicted, const Matrix& truth);

struct EvalOptions {
  std::vector<std::size_t> ks = {10, 30};
  bool with_confounders = true;
  InterventionSpec spec;
  std::size_t batch_size = 500;
  bool compute_avp = true;
};

struct EvalResult {
  std::map<std::string, double> metrics;  // "recall@10", "ndcg@30", "avp@30", ...
  std::size_t users_scored = 0;
  std::size_t users_skipped = 0;  // empty relevant set
};

// Scores `input` rows in evaluation mode, excludes `exclude` items from the
// ranking, and measures against `relevant`. Throws std::logic_error if a
// ranked list ever contains an excluded item.
EvalResult evaluate(const CsaVae& model, const InteractionMatrix& input,
                    const InteractionMatrix& exclude, const InteractionMatrix& relevant,
                    std::span<const std::uint64_t> popularity, const EvalOptions& options = {});

// Validation protocol: input and exclusion are train.
EvalResult evaluate_validation(const CsaVae& model, const SplitDataset& ds,
                               const EvalOptions& options = {});
// Test protocol: input and exclusion are train + validation.
EvalResult evaluate_test(const CsaVae& model, const SplitDataset& ds,
                         const EvalOptions& options = {});

struct ResultRow {
  std::string metric;
  std::size_t K = 0;
  std::string variant;
  double value = 0.0;
};

// Versioned flat table: "# csavae-results v1" then metric, K, variant, value.
struct ResultsTable {
  std::vector<ResultRow> rows;

  void add(std::string metric, std::size_t K, std::string variant, double value);
  void add_eval(const EvalResult& r, const std::string& variant);
  std::string to_tsv() const;
  std::string summary() const;
  static ResultsTable from_tsv(const std::string& text);
  void write(const std::filesystem::path& path) const;
};

}  // namespace csavae

#pragma once

// Rating ingestion and the processed split that training, evaluation and the
// steering service consume.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "csavae/model.hpp"
#include "json.hpp"

namespace csavae {

struct RatingRecord {
  std::string user_id;
  std::string item_id;
  double rating = 0.0;
  std::optional<std::int64_t> timestamp;

  friend bool operator==(const RatingRecord&, const RatingRecord&) = default;
};

struct FormatSpec {
  std::string delimiter = "\t";  // ML-100K u.data; "::" for the ML-1M family
  bool header = false;
  int user_col = 0;
  int item_col = 1;
  int rating_col = 2;
  int timestamp_col = 3;  // -1 when absent
};

struct LoadResult {
  std::vector<RatingRecord> records;
  std::size_t lines = 0;      // non-blank data lines seen
  std::size_t malformed = 0;  // skipped lines
};

// Throws DataError if the file cannot be read or more than 1% of lines are
// malformed.
LoadResult load_ratings(const std::filesystem::path& path, const FormatSpec& format = {});
LoadResult parse_ratings(const std::string& text, const FormatSpec& format = {});

// rating := 1 if rating >= threshold else 0. Input whose ratings are all
// 0 or 1 is returned unchanged.
std::vector<RatingRecord> binarize(std::vector<RatingRecord> records, double threshold = 4.0);

// Optional rule for watch-ratio logs: ratio >= 2 counts as positive.
std::vector<RatingRecord> binarize_watch_ratio(std::vector<RatingRecord> records);

// Keeps records with a nonzero rating.
std::vector<RatingRecord> drop_zeros(std::vector<RatingRecord> records);

// Iterated k-core filter. Throws DataError naming the thresholds when nothing
// survives.
std::vector<RatingRecord> filter_core(std::vector<RatingRecord> records,
                                      std::size_t min_user_interactions = 20,
                                      std::size_t min_item_interactions = 10);

// Users x items binary interactions, one sorted item list per user.
struct InteractionMatrix {
  std::size_t n_items = 0;
  std::vector<std::vector<std::uint32_t>> rows;

  std::size_t n_users() const { return rows.size(); }
  std::size_t nnz() const;
  SparseRow sparse(std::size_t user) const { return SparseRow::from_items(rows[user]); }
};

// Union of two interaction matrices over the same index space.
InteractionMatrix merge(const InteractionMatrix& a, const InteractionMatrix& b);

struct SplitFractions {
  double train = 0.7;
  double validation = 0.1;
  double test = 0.2;
};

struct SplitDataset {
  std::vector<std::string> user_ids;
  std::vector<std::string> item_ids;
  InteractionMatrix train, validation, test;
  std::vector<std::uint64_t> item_popularity;  // train counts
  std::uint64_t seed = 0;
  SplitFractions fractions;
  std::string mode = "random";  // or "full-observed"
  nlohmann::json provenance = nlohmann::json::object();

  std::size_t n_users() const { return user_ids.size(); }
  std::size_t n_items() const { return item_ids.size(); }
  // Throws NotFound.
  std::size_t user_index(const std::string& id) const;
};

std::vector<std::uint64_t> item_popularity(const InteractionMatrix& train);

// Per-user random partition. Users with fewer than three interactions keep
// everything in train.
SplitDataset split(const std::vector<RatingRecord>& records, const SplitFractions& fractions,
                   std::uint64_t seed);

// Full-observed mode: the unbiased test log is taken verbatim; the biased log
// is split into train and validation only.
SplitDataset split_full_observed(const std::vector<RatingRecord>& biased,
                                 const std::vector<RatingRecord>& unbiased_test,
                                 double validation_fraction, std::uint64_t seed);

// Writes train/validation/test TSVs, id lists and manifest.json into dir.
void save_split(const SplitDataset& ds, const std::filesystem::path& dir);
// Verifies file checksums against the manifest. Throws DataError with a hint
// when the manifest is missing.
SplitDataset load_split(const std::filesystem::path& dir);

}  // namespace csavae

#include "csavae/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <unordered_map>

#include "csavae/digest.hpp"
#include "csavae/errors.hpp"

namespace csavae {

namespace fs = std::filesystem;

namespace {

std::vector<std::string_view> split_fields(std::string_view line, std::string_view delim) {
  std::vector<std::string_view> out;
  if (delim.empty()) {
    // Any run of whitespace.
    std::size_t i = 0;
    while (i < line.size()) {
      while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
      std::size_t j = i;
      while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
      if (j > i) out.push_back(line.substr(i, j - i));
      i = j;
    }
    return out;
  }
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(delim, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + delim.size();
  }
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

bool parse_double(std::string_view s, double& out) {
  s = trim(s);
  if (s.empty()) return false;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), out);
  return r.ec == std::errc() && r.ptr == s.data() + s.size() && std::isfinite(out);
}

bool parse_int(std::string_view s, std::int64_t& out) {
  s = trim(s);
  if (s.empty()) return false;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), out);
  return r.ec == std::errc() && r.ptr == s.data() + s.size();
}

}  // namespace

LoadResult parse_ratings(const std::string& text, const FormatSpec& format) {
  LoadResult out;
  std::istringstream in(text);
  std::string line;
  bool skip_header = format.header;
  const int needed = std::max({format.user_col, format.item_col, format.rating_col,
                               format.timestamp_col});
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    if (skip_header) {
      skip_header = false;
      continue;
    }
    ++out.lines;
    const auto f = split_fields(line, format.delimiter);
    if (static_cast<int>(f.size()) <= needed) {
      ++out.malformed;
      continue;
    }
    RatingRecord r;
    r.user_id = std::string(trim(f[format.user_col]));
    r.item_id = std::string(trim(f[format.item_col]));
    if (r.user_id.empty() || r.item_id.empty() || !parse_double(f[format.rating_col], r.rating)) {
      ++out.malformed;
      continue;
    }
    if (format.timestamp_col >= 0) {
      std::int64_t ts = 0;
      if (!parse_int(f[format.timestamp_col], ts)) {
        ++out.malformed;
        continue;
      }
      r.timestamp = ts;
    }
    out.records.push_back(std::move(r));
  }
  if (out.lines > 0 && out.malformed * 100 > out.lines)
    throw DataError("ratings: " + std::to_string(out.malformed) + " of " +
                    std::to_string(out.lines) + " lines are malformed (limit 1%)");
  return out;
}

LoadResult load_ratings(const fs::path& path, const FormatSpec& format) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("ratings: cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_ratings(ss.str(), format);
}

std::vector<RatingRecord> binarize(std::vector<RatingRecord> records, double threshold) {
  // Already-binary input passes through, so a second application is a no-op.
  if (std::ranges::all_of(records, [](const RatingRecord& r) { return r.rating == 0.0 || r.rating == 1.0; }))
    return records;
  for (auto& r : records) r.rating = r.rating >= threshold ? 1.0 : 0.0;
  return records;
}

std::vector<RatingRecord> binarize_watch_ratio(std::vector<RatingRecord> records) {
  return binarize(std::move(records), 2.0);
}

std::vector<RatingRecord> drop_zeros(std::vector<RatingRecord> records) {
  std::erase_if(records, [](const RatingRecord& r) { return r.rating == 0.0; });
  return records;
}

std::vector<RatingRecord> filter_core(std::vector<RatingRecord> records,
                                      std::size_t min_user, std::size_t min_item) {
  while (true) {
    std::unordered_map<std::string, std::size_t> users, items;
    for (const auto& r : records) {
      ++users[r.user_id];
      ++items[r.item_id];
    }
    const std::size_t before = records.size();
    std::erase_if(records, [&](const RatingRecord& r) {
      return users[r.user_id] < min_user || items[r.item_id] < min_item;
    });
    if (records.size() == before) break;
  }
  if (records.empty())
    throw DataError("filter_core: no interactions survive min_user_interactions=" +
                    std::to_string(min_user) +
                    ", min_item_interactions=" + std::to_string(min_item));
  return records;
}

std::size_t InteractionMatrix::nnz() const {
  std::size_t n = 0;
  for (const auto& r : rows) n += r.size();
  return n;
}

InteractionMatrix merge(const InteractionMatrix& a, const InteractionMatrix& b) {
  if (a.n_users() != b.n_users() || a.n_items != b.n_items)
    throw std::invalid_argument("merge: interaction matrices differ in shape");
  InteractionMatrix out{a.n_items, {}};
  out.rows.resize(a.n_users());
  for (std::size_t u = 0; u < a.n_users(); ++u) {
    std::set_union(a.rows[u].begin(), a.rows[u].end(), b.rows[u].begin(), b.rows[u].end(),
                   std::back_inserter(out.rows[u]));
  }
  return out;
}

std::size_t SplitDataset::user_index(const std::string& id) const {
  const auto it = std::lower_bound(user_ids.begin(), user_ids.end(), id);
  if (it == user_ids.end() || *it != id) throw NotFound("unknown user '" + id + "'");
  return static_cast<std::size_t>(it - user_ids.begin());
}

std::vector<std::uint64_t> item_popularity(const InteractionMatrix& train) {
  std::vector<std::uint64_t> pop(train.n_items, 0);
  for (const auto& row : train.rows)
    for (auto i : row) ++pop[i];
  return pop;
}

namespace {

struct Indexed {
  std::vector<std::string> user_ids, item_ids;
  std::vector<std::vector<std::uint32_t>> per_user;  // deduplicated, sorted
};

Indexed index_records(const std::vector<RatingRecord>& a, const std::vector<RatingRecord>* b) {
  Indexed out;
  auto collect = [&](const std::vector<RatingRecord>& rs) {
    for (const auto& r : rs) {
      out.user_ids.push_back(r.user_id);
      out.item_ids.push_back(r.item_id);
    }
  };
  collect(a);
  if (b) collect(*b);
  for (auto* v : {&out.user_ids, &out.item_ids}) {
    std::sort(v->begin(), v->end());
    v->erase(std::unique(v->begin(), v->end()), v->end());
  }
  return out;
}

std::uint32_t lookup(const std::vector<std::string>& ids, const std::string& id) {
  return static_cast<std::uint32_t>(std::lower_bound(ids.begin(), ids.end(), id) - ids.begin());
}

std::vector<std::vector<std::uint32_t>> rows_of(const Indexed& ix,
                                                const std::vector<RatingRecord>& rs) {
  std::vector<std::vector<std::uint32_t>> rows(ix.user_ids.size());
  for (const auto& r : rs) {
    if (r.rating == 0.0) continue;
    rows[lookup(ix.user_ids, r.user_id)].push_back(lookup(ix.item_ids, r.item_id));
  }
  for (auto& row : rows) {
    std::sort(row.begin(), row.end());
    row.erase(std::unique(row.begin(), row.end()), row.end());
  }
  return rows;
}

void validate_fractions(const SplitFractions& f) {
  for (double v : {f.train, f.validation, f.test})
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("split: fractions must lie in [0, 1]");
  if (std::fabs(f.train + f.validation + f.test - 1.0) > 1e-9)
    throw std::invalid_argument("split: fractions must sum to 1");
}

void sort_rows(InteractionMatrix& m) {
  for (auto& r : m.rows) std::sort(r.begin(), r.end());
}

}  // namespace

SplitDataset split(const std::vector<RatingRecord>& records, const SplitFractions& fractions,
                   std::uint64_t seed) {
  validate_fractions(fractions);
  const Indexed ix = index_records(records, nullptr);
  auto rows = rows_of(ix, records);
  SplitDataset ds;
  ds.user_ids = ix.user_ids;
  ds.item_ids = ix.item_ids;
  ds.seed = seed;
  ds.fractions = fractions;
  const std::size_t n_items = ix.item_ids.size();
  for (auto* m : {&ds.train, &ds.validation, &ds.test}) {
    m->n_items = n_items;
    m->rows.resize(rows.size());
  }
  std::mt19937_64 rng(seed);
  for (std::size_t u = 0; u < rows.size(); ++u) {
    auto& items = rows[u];
    if (items.size() < 3) {
      ds.train.rows[u] = items;
      continue;
    }
    std::shuffle(items.begin(), items.end(), rng);
    const std::size_t n = items.size();
    const auto n_train = std::min<std::size_t>(n, std::lround(fractions.train * n));
    const auto n_test = std::min<std::size_t>(n - n_train, std::lround(fractions.test * n));
    ds.train.rows[u].assign(items.begin(), items.begin() + n_train);
    ds.test.rows[u].assign(items.begin() + n_train, items.begin() + n_train + n_test);
    ds.validation.rows[u].assign(items.begin() + n_train + n_test, items.end());
  }
  sort_rows(ds.train);
  sort_rows(ds.validation);
  sort_rows(ds.test);
  ds.item_popularity = item_popularity(ds.train);
  return ds;
}

SplitDataset split_full_observed(const std::vector<RatingRecord>& biased,
                                 const std::vector<RatingRecord>& unbiased_test,
                                 double validation_fraction, std::uint64_t seed) {
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0))
    throw std::invalid_argument("split: validation fraction must lie in [0, 1)");
  const Indexed ix = index_records(biased, &unbiased_test);
  auto rows = rows_of(ix, biased);
  SplitDataset ds;
  ds.user_ids = ix.user_ids;
  ds.item_ids = ix.item_ids;
  ds.seed = seed;
  ds.mode = "full-observed";
  ds.fractions = {1.0 - validation_fraction, validation_fraction, 0.0};
  const std::size_t n_items = ix.item_ids.size();
  for (auto* m : {&ds.train, &ds.validation, &ds.test}) {
    m->n_items = n_items;
    m->rows.resize(rows.size());
  }
  ds.test.rows = rows_of(ix, unbiased_test);
  std::mt19937_64 rng(seed);
  for (std::size_t u = 0; u < rows.size(); ++u) {
    auto& items = rows[u];
    if (items.size() < 3) {
      ds.train.rows[u] = items;
      continue;
    }
    std::shuffle(items.begin(), items.end(), rng);
    const auto n_val = std::min<std::size_t>(items.size() - 1,
                                             std::lround(validation_fraction * items.size()));
    ds.validation.rows[u].assign(items.begin(), items.begin() + n_val);
    ds.train.rows[u].assign(items.begin() + n_val, items.end());
  }
  sort_rows(ds.train);
  sort_rows(ds.validation);
  ds.item_popularity = item_popularity(ds.train);
  return ds;
}

namespace {

void write_matrix(const fs::path& p, const InteractionMatrix& m) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("split: cannot write " + p.string());
  for (std::size_t u = 0; u < m.n_users(); ++u)
    for (auto i : m.rows[u]) out << u << '\t' << i << '\n';
}

InteractionMatrix read_matrix(const fs::path& p, std::size_t n_users, std::size_t n_items) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("split: cannot read " + p.string());
  InteractionMatrix m{n_items, {}};
  m.rows.resize(n_users);
  std::size_t u = 0, i = 0;
  while (in >> u >> i) {
    if (u >= n_users || i >= n_items) throw DataError("split: index out of range in " + p.string());
    m.rows[u].push_back(static_cast<std::uint32_t>(i));
  }
  sort_rows(m);
  return m;
}

void write_lines(const fs::path& p, const std::vector<std::string>& lines) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("split: cannot write " + p.string());
  for (const auto& l : lines) out << l << '\n';
}

std::vector<std::string> read_lines(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("split: cannot read " + p.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) out.push_back(line);
  return out;
}

constexpr const char* kFiles[] = {"train.tsv", "validation.tsv", "test.tsv", "users.txt",
                                  "items.txt"};

}  // namespace

void save_split(const SplitDataset& ds, const fs::path& dir) {
  fs::create_directories(dir);
  write_matrix(dir / "train.tsv", ds.train);
  write_matrix(dir / "validation.tsv", ds.validation);
  write_matrix(dir / "test.tsv", ds.test);
  write_lines(dir / "users.txt", ds.user_ids);
  write_lines(dir / "items.txt", ds.item_ids);
  nlohmann::json checksums = nlohmann::json::object();
  for (const char* f : kFiles) checksums[f] = sha256_file(dir / f);
  nlohmann::json m = {
      {"format", "csavae-split"},
      {"version", 1},
      {"mode", ds.mode},
      {"seed", ds.seed},
      {"fractions",
       {{"train", ds.fractions.train},
        {"validation", ds.fractions.validation},
        {"test", ds.fractions.test}}},
      {"counts",
       {{"users", ds.n_users()},
        {"items", ds.n_items()},
        {"train", ds.train.nnz()},
        {"validation", ds.validation.nnz()},
        {"test", ds.test.nnz()}}},
      {"provenance", ds.provenance},
      {"checksums", checksums},
  };
  std::ofstream out(dir / "manifest.json");
  out << m.dump(2) << '\n';
}

SplitDataset load_split(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  if (!fs::exists(mpath))
    throw DataError("no split manifest at " + mpath.string() +
                    "; run `csavae prepare` or `csavae synth` to create a processed split");
  nlohmann::json m;
  try {
    std::ifstream in(mpath);
    m = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("split manifest is not valid JSON: " + std::string(e.what()));
  }
  if (m.value("format", "") != "csavae-split")
    throw DataError("split manifest has an unexpected format tag");
  for (const char* f : kFiles) {
    const std::string want = m.at("checksums").at(f).get<std::string>();
    if (sha256_file(dir / f) != want)
      throw DataError(std::string("split file ") + f + " does not match its manifest checksum");
  }
  SplitDataset ds;
  ds.user_ids = read_lines(dir / "users.txt");
  ds.item_ids = read_lines(dir / "items.txt");
  ds.seed = m.at("seed").get<std::uint64_t>();
  ds.mode = m.value("mode", "random");
  const auto& f = m.at("fractions");
  ds.fractions = {f.at("train").get<double>(), f.at("validation").get<double>(),
                  f.at("test").get<double>()};
  ds.provenance = m.value("provenance", nlohmann::json::object());
  ds.train = read_matrix(dir / "train.tsv", ds.n_users(), ds.n_items());
  ds.validation = read_matrix(dir / "validation.tsv", ds.n_users(), ds.n_items());
  ds.test = read_matrix(dir / "test.tsv", ds.n_users(), ds.n_items());
  ds.item_popularity = item_popularity(ds.train);
  return ds;
}

}  // namespace csavae

#include "csavae/steering.hpp"

#include <algorithm>
#include <cmath>

#include "csavae/digest.hpp"
#include "csavae/errors.hpp"
#include "csavae/evaluation.hpp"
#include "csavae/noise.hpp"

namespace csavae {

using nlohmann::json;

std::vector<std::uint32_t> Recommendation::indices() const {
  std::vector<std::uint32_t> out;
  for (const auto& it : items) out.push_back(it.index);
  return out;
}

json Recommendation::to_json() const {
  json items_j = json::array();
  for (std::size_t r = 0; r < items.size(); ++r)
    items_j.push_back({{"rank", r + 1},
                       {"item", items[r].item_id},
                       {"index", items[r].index},
                       {"score", items[r].score}});
  return {{"k", k}, {"items", items_j}, {"avp", avp}, {"warnings", warnings}};
}

json InterventionResult::to_json() const {
  json changes = json::array();
  for (const auto& c : changed_positions)
    changes.push_back({{"item", c.item_id},
                       {"index", c.index},
                       {"before", c.before ? json(*c.before) : json(nullptr)},
                       {"after", c.after ? json(*c.after) : json(nullptr)}});
  return {{"before", before.to_json()},
          {"after", after.to_json()},
          {"avp_before", before.avp},
          {"avp_after", after.avp},
          {"changed_positions", changes}};
}

InterventionRequest parse_intervention(const json& doc, std::size_t k, std::size_t d) {
  if (!doc.is_object()) throw std::invalid_argument("intervention: expected a JSON object");
  InterventionRequest req;
  // "k" is the confounder count of the graph document; "K" the list length.
  if (doc.contains("k") && doc.at("k").get<std::size_t>() != k)
    throw std::invalid_argument("intervention: document is for k=" +
                                std::to_string(doc.at("k").get<std::size_t>()) +
                                ", checkpoint has k=" + std::to_string(k));
  if (doc.contains("K")) {
    const auto& kk = doc.at("K");
    if (!kk.is_number_integer() || kk.get<long long>() < 1)
      throw std::invalid_argument("intervention: K must be an integer >= 1");
    req.k = kk.get<std::size_t>();
  }
  if (doc.contains("assign_mode")) {
    const auto mode = doc.at("assign_mode").get<std::string>();
    if (mode != "scaled" && mode != "absolute")
      throw std::invalid_argument("intervention: assign_mode must be 'scaled' or 'absolute'");
    req.absolute = mode == "absolute";
  }
  if (doc.contains("mask") && !doc.at("mask").is_null()) {
    const auto& m = doc.at("mask");
    if (!m.is_array() || m.size() != k)
      throw std::invalid_argument("intervention: mask must be a " + std::to_string(k) + "x" +
                                  std::to_string(k) + " nested list");
    Matrix mm(k, k);
    for (std::size_t i = 0; i < k; ++i) {
      if (!m[i].is_array() || m[i].size() != k)
        throw std::invalid_argument("intervention: mask row " + std::to_string(i) +
                                    " must have " + std::to_string(k) + " entries");
      for (std::size_t j = 0; j < k; ++j) {
        if (!m[i][j].is_number()) throw std::invalid_argument("intervention: mask entries must be 0 or 1");
        mm(i, j) = m[i][j].get<double>();
      }
    }
    req.mask = sem::MaskGraph::from_matrix(std::move(mm));
  }
  if (doc.contains("assign") && !doc.at("assign").is_null()) {
    const auto& a = doc.at("assign");
    if (!a.is_object()) throw std::invalid_argument("intervention: assign must be an object");
    for (const auto& [key, v] : a.items()) {
      std::size_t i = 0;
      try {
        std::size_t used = 0;
        i = std::stoul(key, &used);
        if (used != key.size()) throw std::invalid_argument(key);
      } catch (const std::exception&) {
        throw std::invalid_argument("intervention: assign key '" + key + "' is not an index");
      }
      if (i >= k)
        throw std::invalid_argument("intervention: assign index " + key + " out of range [0, " +
                                    std::to_string(k) + ")");
      std::vector<double> vec;
      if (v.is_number()) {
        vec.assign(d, v.get<double>());
      } else if (v.is_array() && v.size() == d) {
        for (const auto& x : v) {
          if (!x.is_number()) throw std::invalid_argument("intervention: assign values must be numbers");
          vec.push_back(x.get<double>());
        }
      } else {
        throw std::invalid_argument("intervention: assign[" + key + "] must be a number or " +
                                    std::to_string(d) + " numbers");
      }
      for (double x : vec) {
        if (!std::isfinite(x)) throw DomainError("intervention: non-finite assign value");
        if (!req.absolute && (x < -1.0 || x > 1.0))
          throw DomainError("intervention: scaled controls must lie in [-1, 1]");
      }
      req.assign[i] = std::move(vec);
    }
  }
  return req;
}

SteeringEngine::SteeringEngine(CsaVae model, CheckpointMeta meta, SplitDataset data,
                               std::string digest)
    : model_(std::move(model)), meta_(std::move(meta)), data_(std::move(data)),
      digest_(std::move(digest)) {
  if (!meta_.item_ids.empty() && meta_.item_ids != data_.item_ids)
    throw DataError("steering: the split's item vocabulary does not match the checkpoint");
  if (data_.n_items() != model_.config().n_items)
    throw DataError("steering: the split has " + std::to_string(data_.n_items()) +
                    " items, the model " + std::to_string(model_.config().n_items));
  seen_ = merge(data_.train, data_.validation);
  if (meta_.item_popularity.empty()) meta_.item_popularity = data_.item_popularity;
}

std::shared_ptr<SteeringEngine> SteeringEngine::open(const std::filesystem::path& checkpoint,
                                                     const std::filesystem::path& data_dir) {
  const std::string digest = sha256_file(checkpoint);
  Checkpoint ck = load_checkpoint(checkpoint);
  CsaVae model = model_from_checkpoint(ck);
  return std::make_shared<SteeringEngine>(std::move(model), std::move(ck.meta),
                                          load_split(data_dir), digest);
}

SparseRow SteeringEngine::history(std::size_t u) const { return seen_.sparse(u); }

Recommendation SteeringEngine::recommend(const std::string& user_id, std::size_t K,
                                         bool with_confounders,
                                         const InterventionSpec& spec) const {
  if (K < 1) throw std::invalid_argument("recommend: k must be >= 1");
  const std::size_t u = user(user_id);
  const SparseRow x = history(u);
  const auto& seen = seen_.rows[u];
  Recommendation rec;
  const std::size_t available = model_.config().n_items - seen.size();
  if (K > available) {
    rec.warnings.push_back("k=" + std::to_string(K) + " exceeds the " + std::to_string(available) +
                           " unseen items; clamped");
    K = available;
  }
  rec.k = K;
  NoiseSource none = NoiseSource::zero();
  const std::vector<double> scores =
      with_confounders ? model_.forward_with_confounders(x, spec, none, Mode::eval).first
                       : model_.forward_without_confounders(x, none, Mode::eval);
  const ItemList list = top_k(scores, K, seen);
  for (auto i : list) rec.items.push_back({i, data_.item_ids[i], scores[i]});
  rec.avp = avp_at_k({list}, meta_.item_popularity, K);
  return rec;
}

InterventionSpec SteeringEngine::to_spec(const InterventionRequest& req,
                                         const std::string& user_id) const {
  (void)user(user_id);
  const std::size_t k = model_.config().k, d = model_.config().d;
  InterventionSpec spec;
  if (req.mask) {
    if (req.mask->k() != k) throw std::invalid_argument("intervention: mask size does not match k");
    if (!req.mask->is_all_ones()) spec.mask = req.mask;
  }
  for (const auto& [i, v] : req.assign) {
    if (i >= k || v.size() != d) throw std::invalid_argument("intervention: bad assignment shape");
    if (req.absolute) {
      spec.assignments[i] = v;
      continue;
    }
    std::vector<double> delta(d);
    const bool have_range = meta_.confounder_range.rows() == k && meta_.confounder_range.cols() == d;
    for (std::size_t c = 0; c < d; ++c)
      delta[c] = v[c] * (have_range ? meta_.confounder_range(i, c) : 0.0);
    if (std::any_of(delta.begin(), delta.end(), [](double x) { return x != 0.0; }))
      spec.offsets[i] = std::move(delta);
  }
  return spec;
}

InterventionResult SteeringEngine::intervene(const std::string& user_id,
                                             const InterventionRequest& req) const {
  InterventionResult r;
  r.before = recommend(user_id, req.k, true);
  r.after = recommend(user_id, req.k, true, to_spec(req, user_id));
  std::map<std::uint32_t, PositionChange> moves;
  for (std::size_t p = 0; p < r.before.items.size(); ++p) {
    auto& m = moves[r.before.items[p].index];
    m.index = r.before.items[p].index;
    m.item_id = r.before.items[p].item_id;
    m.before = p + 1;
  }
  for (std::size_t p = 0; p < r.after.items.size(); ++p) {
    auto& m = moves[r.after.items[p].index];
    m.index = r.after.items[p].index;
    m.item_id = r.after.items[p].item_id;
    m.after = p + 1;
  }
  for (auto& [i, m] : moves)
    if (m.before != m.after) r.changed_positions.push_back(m);
  std::sort(r.changed_positions.begin(), r.changed_positions.end(),
            [](const PositionChange& a, const PositionChange& b) {
              const std::size_t ka = a.after.value_or(SIZE_MAX), kb = b.after.value_or(SIZE_MAX);
              return ka != kb ? ka < kb : a.before.value_or(SIZE_MAX) < b.before.value_or(SIZE_MAX);
            });
  return r;
}

json SteeringEngine::graph() const { return sem::export_graph(model_.global_graph()); }

json SteeringEngine::user_graph(const std::string& user_id) const {
  const std::size_t u = user(user_id);
  NoiseSource none = NoiseSource::zero();
  json doc = graph();
  doc["user"] = user_id;
  const std::size_t k = model_.config().k;
  auto nested = [&](const Matrix& m) {
    json rows = json::array();
    for (std::size_t i = 0; i < m.rows(); ++i)
      rows.push_back(std::vector<double>(m.row(i).begin(), m.row(i).end()));
    return rows;
  };
  if (!model_.config().confounders_active()) {
    doc["local"] = nested(Matrix(k, k));
    doc["composed"] = nested(Matrix(k, k));
    return doc;
  }
  const auto [scores, bundle] = model_.forward_with_confounders(history(u), {}, none, Mode::eval);
  doc["local"] = nested(bundle.local_graph);
  doc["composed"] = nested(bundle.user_graph);
  for (auto& e : doc["edges"]) {
    const std::size_t i = e["from"], j = e["to"];
    e["local"] = bundle.local_graph(i, j);
    e["composed"] = bundle.user_graph(i, j);
  }
  return doc;
}

}  // namespace csavae

#pragma once

// Inference-mode recommendation and intervention logic shared by the HTTP
// service and the `do` command, so both produce identical output.

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "csavae/checkpoint.hpp"
#include "csavae/data.hpp"
#include "csavae/model.hpp"
#include "json.hpp"

namespace httplib {
class Server;
}

namespace csavae {

struct RankedItem {
  std::uint32_t index = 0;
  std::string item_id;
  double score = 0.0;
};

struct Recommendation {
  std::vector<RankedItem> items;
  double avp = 0.0;
  std::size_t k = 0;
  std::vector<std::string> warnings;

  std::vector<std::uint32_t> indices() const;
  nlohmann::json to_json() const;
};

struct InterventionRequest {
  std::size_t k = 10;
  std::optional<sem::MaskGraph> mask;
  // Scaled controls in [-1, 1] per dimension by default; raw confounder
  // vectors when `absolute` is set.
  std::map<std::size_t, std::vector<double>> assign;
  bool absolute = false;
};

// Accepts the graph export document extended with "mask" (k x k of 0/1) and
// "assign" ({"i": [d floats]} or {"i": s} broadcast to every dimension).
// Optional "K" (list length, default 10) and "assign_mode": "scaled" |
// "absolute". A "k" field, when present, must equal the confounder count.
// Throws std::invalid_argument / DomainError on malformed input.
InterventionRequest parse_intervention(const nlohmann::json& doc, std::size_t k, std::size_t d);

struct PositionChange {
  std::uint32_t index = 0;
  std::string item_id;
  std::optional<std::size_t> before;  // 1-based rank
  std::optional<std::size_t> after;
};

struct InterventionResult {
  Recommendation before;
  Recommendation after;
  std::vector<PositionChange> changed_positions;

  nlohmann::json to_json() const;
};

class SteeringEngine {
 public:
  // The split supplies user histories; its item vocabulary must match the
  // checkpoint's.
  SteeringEngine(CsaVae model, CheckpointMeta meta, SplitDataset data, std::string digest);

  static std::shared_ptr<SteeringEngine> open(const std::filesystem::path& checkpoint,
                                              const std::filesystem::path& data_dir);

  const std::string& digest() const { return digest_; }
  const CsaVae& model() const { return model_; }
  const CheckpointMeta& meta() const { return meta_; }
  const SplitDataset& data() const { return data_; }

  // Throws NotFound for an unknown id.
  std::size_t user(const std::string& id) const { return data_.user_index(id); }

  Recommendation recommend(const std::string& user_id, std::size_t K, bool with_confounders,
                           const InterventionSpec& spec = {}) const;
  InterventionSpec to_spec(const InterventionRequest& req, const std::string& user_id) const;
  InterventionResult intervene(const std::string& user_id, const InterventionRequest& req) const;

  nlohmann::json graph() const;
  nlohmann::json user_graph(const std::string& user_id) const;

 private:
  SparseRow history(std::size_t u) const;

  CsaVae model_;
  CheckpointMeta meta_;
  SplitDataset data_;
  InteractionMatrix seen_;  // train + validation
  std::string digest_;
};

// Registers the HTTP routes on `server`:
//   GET  /health
//   GET  /graph
//   GET  /users/{id}/graph
//   GET  /users/{id}/recommendations?k=10&confounders=on|off
//   POST /users/{id}/intervene
// Every response carries the checkpoint digest in the X-Checkpoint-Digest
// header and in the body; errors are {"code", "message"}.
void register_routes(httplib::Server& server, std::shared_ptr<const SteeringEngine> engine);

// Blocks serving on host:port.
bool serve(std::shared_ptr<const SteeringEngine> engine, const std::string& host, int port);

}  // namespace csavae

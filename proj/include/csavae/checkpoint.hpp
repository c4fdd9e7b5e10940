#pragma once

// Versioned binary checkpoint:
//   "CSAVAECK" | u32 version | u64 header length | JSON header | raw f64 tensors
// The header lists tensors in storage order with their shapes.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "csavae/model.hpp"
#include "csavae/objective.hpp"
#include "json.hpp"

namespace csavae {

inline constexpr std::uint32_t kCheckpointVersion = 1;

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct CheckpointMeta {
  ModelConfig model;
  LossWeights weights;
  std::uint64_t seed = 0;
  nlohmann::json train_config = nlohmann::json::object();
  std::vector<std::string> item_ids;
  std::vector<std::uint64_t> item_popularity;
  // Per-confounder, per-dimension inter-quartile range of the reconstructed
  // confounders over training users (k x d). Scales steering controls.
  Matrix confounder_range;
  // Present only on resumable checkpoints.
  nlohmann::json training_state;
};

struct Checkpoint {
  CheckpointMeta meta;
  std::vector<std::pair<std::string, Matrix>> params;
  std::map<std::string, Matrix> extra;  // optimizer moments, live weights, ...
};

std::string encode_checkpoint(const CsaVae& model, const CheckpointMeta& meta,
                              const std::map<std::string, Matrix>& extra = {});
// Throws FormatError on bad magic, version mismatch, or truncated data.
Checkpoint decode_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const CsaVae& model,
                     const CheckpointMeta& meta, const std::map<std::string, Matrix>& extra = {});
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Rebuilds the network; names and shapes must match the configuration.
CsaVae model_from_checkpoint(const Checkpoint& ck);
void load_parameters(CsaVae& model, const std::vector<std::pair<std::string, Matrix>>& params);

// SHA-256 over the parameter names, shapes and values.
std::string parameter_digest(const CsaVae& model);

}  // namespace csavae

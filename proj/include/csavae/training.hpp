#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "csavae/checkpoint.hpp"
#include "csavae/data.hpp"
#include "csavae/evaluation.hpp"
#include "csavae/model.hpp"
#include "csavae/objective.hpp"
#include "json.hpp"

namespace csavae {

struct TrainConfig {
  double learning_rate = 1e-3;
  double weight_decay = 1e-6;
  std::size_t patience = 10;
  double tau = 0.2;
  std::size_t k = 4;
  std::size_t d = 64;
  std::size_t hidden = 600;
  std::size_t batch_size = 500;
  std::size_t max_epochs = 200;
  std::uint64_t seed = 0;
  double beta_kl = 1.0;  // value reached at the end of the ramp
  double lambda_dag = 1.0;
  double lambda_div = 1.0;
  double dag_c = 1.0;
  double anneal_fraction = 0.2;
  double dropout = 0.5;
  bool use_ffn = false;
  bool sinfo_skip = false;
  std::string mix_norm = "layer";
  bool use_global = true;
  bool use_local = true;

  void validate() const;
  ModelConfig model_config(std::size_t n_items) const;
  LossWeights weights() const;
  // KL weight at a given optimizer step of a run with `total_steps` steps.
  double beta_at(std::uint64_t step, std::uint64_t total_steps) const;

  // Flat document keyed by field name. Unknown keys are rejected.
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  static TrainConfig from_json(const nlohmann::json& j, TrainConfig base);
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  LossBreakdown loss;     // mean over the epoch's batches
  double val_recall10 = 0.0;
  double val_ndcg10 = 0.0;
  double wall_seconds = 0.0;
  bool improved = false;

  nlohmann::json to_json() const;
};

struct ValidationScore {
  double recall10 = 0.0;
  double ndcg10 = 0.0;
};

using Validator = std::function<ValidationScore(const CsaVae&, std::size_t epoch)>;

struct TrainHooks {
  Validator validator;                             // default: validation split
  std::function<void(const EpochRecord&)> on_epoch;
  const Checkpoint* resume = nullptr;              // resumable checkpoint to continue
  std::size_t stop_after = 0;                      // stop after this epoch (0 = off)
};

struct TrainResult {
  CsaVae best;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_ndcg = 0.0;
  bool early_stopped = false;
  bool interrupted = false;  // stopped by stop_after
  CheckpointMeta meta;
  std::map<std::string, Matrix> resume_tensors;  // live weights and optimizer moments
};

// Adam with early stopping on validation NDCG@10. Returns the best-validation
// model. Throws TrainingFault carrying the last finite breakdown on
// divergence.
TrainResult train(const SplitDataset& ds, const TrainConfig& cfg, const TrainHooks& hooks = {});

// Writes the best model with its resume state.
void save_train_result(const std::filesystem::path& path, const TrainResult& r);

// Per-confounder, per-dimension IQR of the reconstructed confounders over the
// given users, evaluated in inference mode.
Matrix confounder_ranges(const CsaVae& model, const InteractionMatrix& input);

using RunMetrics = std::map<std::string, double>;
using RunEvaluator = std::function<RunMetrics(const TrainResult&, const SplitDataset&)>;

// Test-split Recall/NDCG/AVP at 10 and 30 with confounders.
RunMetrics default_run_metrics(const TrainResult& r, const SplitDataset& ds);

struct SeedOutcome {
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  RunMetrics metrics;
  std::size_t epochs = 0;
};

struct RepeatResult {
  std::vector<SeedOutcome> runs;  // sorted by seed
  RunMetrics mean;                // over successful runs
  std::size_t failures = 0;
};

RepeatResult repeat_runs(const SplitDataset& ds, const TrainConfig& cfg,
                         const std::vector<std::uint64_t>& seeds,
                         const RunEvaluator& evaluator = default_run_metrics);

struct SweepRow {
  std::size_t k = 0;
  RepeatResult result;
};

std::vector<SweepRow> sweep_k(const SplitDataset& ds, const TrainConfig& base,
                              const std::vector<std::size_t>& k_values,
                              const std::vector<std::uint64_t>& seeds,
                              const RunEvaluator& evaluator = default_run_metrics);

struct AblationRow {
  std::string variant;  // full, w/o-local, w/o-global, w/o-both
  bool use_global = true;
  bool use_local = true;
  RepeatResult result;
};

std::vector<AblationRow> ablation_run(const SplitDataset& ds, const TrainConfig& cfg,
                                      const std::vector<std::uint64_t>& seeds,
                                      const RunEvaluator& evaluator = default_run_metrics);

// Flattens repeat results into the results table, one row per metric.
void append_repeat(ResultsTable& table, const RepeatResult& r, const std::string& variant);

}  // namespace csavae

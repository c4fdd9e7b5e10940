#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "csavae/checkpoint.hpp"
#include "csavae/data.hpp"
#include "csavae/digest.hpp"
#include "csavae/errors.hpp"
#include "csavae/evaluation.hpp"
#include "csavae/steering.hpp"
#include "csavae/synthetic.hpp"
#include "csavae/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace csavae;

namespace {

constexpr const char* kCheckpointFile = "checkpoint.ckpt";

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(p.string() + ": malformed JSON: " + e.what());
  }
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out || !(out << text)) throw std::runtime_error("cannot write " + p.string());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir))
    throw std::runtime_error("cannot create output directory " + dir.string());
}

// Digest of an input; a directory is represented by its manifest.
std::string input_digest(const fs::path& p) {
  if (fs::is_directory(p)) return sha256_file(p / "manifest.json");
  return sha256_file(p);
}

// manifest.json: command, resolved settings and content digests. Nothing
// time-dependent goes in, so a rerun into a fresh directory is byte-identical.
void write_manifest(const fs::path& dir, const std::string& command, json settings,
                    const std::map<std::string, fs::path>& inputs,
                    const std::vector<std::string>& outputs) {
  json in = json::object(), out = json::object();
  for (const auto& [role, p] : inputs)
    in[role] = {{"path", fs::absolute(p).lexically_normal().string()}, {"sha256", input_digest(p)}};
  for (const auto& name : outputs) out[name] = sha256_file(dir / name);
  json m = {{"format", "csavae-run"},
            {"version", 1},
            {"command", command},
            {"settings", std::move(settings)},
            {"inputs", in},
            {"outputs", out}};
  write_text(dir / "manifest.json", m.dump(2) + "\n");
}

// Data directory recorded by `train` next to a checkpoint, used when --data is
// omitted.
fs::path resolve_data(const std::string& data, const fs::path& checkpoint) {
  if (!data.empty()) return data;
  const fs::path manifest = checkpoint.parent_path() / "manifest.json";
  if (fs::exists(manifest)) {
    const json m = read_json(manifest);
    if (m.contains("inputs") && m["inputs"].contains("data"))
      return m["inputs"]["data"]["path"].get<std::string>();
  }
  throw std::runtime_error("--data is required (no training manifest next to " +
                           checkpoint.string() + ")");
}

std::vector<std::uint64_t> seed_list(const std::vector<std::uint64_t>& seeds, std::size_t n,
                                     std::uint64_t first) {
  if (!seeds.empty()) return seeds;
  std::vector<std::uint64_t> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(first + i);
  return out;
}

struct TrainFlags {
  std::string config;
  std::uint64_t seed = 0;
  std::size_t k = 0, patience = 0, max_epochs = 0, batch_size = 0;
  double tau = 0, lr = 0;
  CLI::Option *o_seed, *o_k, *o_tau, *o_lr, *o_patience, *o_epochs, *o_batch;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "Flat JSON document of TrainConfig fields")
        ->check(CLI::ExistingFile);
    o_seed = app->add_option("--seed", seed, "Training seed");
    o_k = app->add_option("--k", k, "Number of confounders");
    o_tau = app->add_option("--tau", tau, "Gumbel-Sigmoid temperature");
    o_lr = app->add_option("--lr", lr, "Adam learning rate");
    o_patience = app->add_option("--patience", patience, "Early-stopping patience in epochs");
    o_epochs = app->add_option("--max-epochs", max_epochs, "Epoch budget");
    o_batch = app->add_option("--batch-size", batch_size, "Users per batch");
  }

  // File keys first, then any flag given on the command line.
  TrainConfig resolve() const {
    TrainConfig c = config.empty() ? TrainConfig{} : TrainConfig::from_json(read_json(config));
    if (o_seed->count()) c.seed = seed;
    if (o_k->count()) c.k = k;
    if (o_tau->count()) c.tau = tau;
    if (o_lr->count()) c.learning_rate = lr;
    if (o_patience->count()) c.patience = patience;
    if (o_epochs->count()) c.max_epochs = max_epochs;
    if (o_batch->count()) c.batch_size = batch_size;
    c.validate();
    return c;
  }

  std::map<std::string, fs::path> inputs(const fs::path& data) const {
    std::map<std::string, fs::path> in{{"data", data}};
    if (!config.empty()) in["config"] = config;
    return in;
  }
};

int cmd_synth(std::uint64_t seed, const fs::path& out) {
  ensure_dir(out);
  const SyntheticDataset ds = synthetic_generate(seed);
  save_synthetic(ds, out);
  write_manifest(out, "synth", {{"seed", seed}, {"users", 300}, {"items", 500}}, {},
                 {"observations.tsv", "binary.tsv", "confounders.tsv", "true_graph.json",
                  "generator_params.json"});
  std::cout << "synthetic dataset (seed " << seed << ") written to " << out.string() << "\n";
  return 0;
}

struct PrepareFlags {
  std::string ratings, format = "ml100k";
  double threshold = 4.0;
  std::size_t min_user = 20, min_item = 10;
  std::uint64_t seed = 0;
};

int cmd_prepare(const PrepareFlags& f, const fs::path& out) {
  FormatSpec spec;
  if (f.format == "ml1m") {
    spec.delimiter = "::";
  } else if (f.format == "csv") {
    spec.delimiter = ",";
    spec.header = true;
  } else if (f.format != "ml100k") {
    throw std::invalid_argument("unknown --format '" + f.format + "' (ml100k, ml1m, csv)");
  }
  const LoadResult loaded = load_ratings(f.ratings, spec);
  auto records = drop_zeros(binarize(loaded.records, f.threshold));
  records = filter_core(std::move(records), f.min_user, f.min_item);
  SplitDataset ds = split(records, {}, f.seed);
  ds.provenance = {{"source", fs::path(f.ratings).filename().string()},
                   {"format", f.format},
                   {"threshold", f.threshold},
                   {"min_user_interactions", f.min_user},
                   {"min_item_interactions", f.min_item},
                   {"lines", loaded.lines},
                   {"malformed", loaded.malformed}};
  save_split(ds, out);
  std::cout << "prepared " << ds.n_users() << " users x " << ds.n_items() << " items ("
            << ds.train.nnz() << " train / " << ds.validation.nnz() << " validation / "
            << ds.test.nnz() << " test interactions)";
  if (loaded.malformed) std::cout << ", skipped " << loaded.malformed << " malformed lines";
  std::cout << "\n";
  return 0;
}

int cmd_train(const TrainFlags& flags, const fs::path& data, const fs::path& out,
              const std::string& resume, std::size_t stop_after) {
  const TrainConfig cfg = flags.resolve();
  const SplitDataset ds = load_split(data);
  ensure_dir(out);

  std::optional<Checkpoint> previous;
  if (!resume.empty()) previous = load_checkpoint(resume);

  std::ofstream log(out / "epochs.jsonl", std::ios::trunc);
  if (!log) throw std::runtime_error("cannot write " + (out / "epochs.jsonl").string());
  if (previous)
    for (const auto& e : previous->meta.training_state.at("history")) log << e.dump() << "\n";

  TrainHooks hooks;
  hooks.resume = previous ? &*previous : nullptr;
  hooks.stop_after = stop_after;
  hooks.on_epoch = [&](const EpochRecord& rec) {
    log << rec.to_json().dump() << "\n" << std::flush;
    std::cerr << "epoch " << rec.epoch << "  loss " << rec.loss.total << "  val ndcg@10 "
              << rec.val_ndcg10 << (rec.improved ? "  *" : "") << "\n";
  };
  const TrainResult r = train(ds, cfg, hooks);
  log.close();
  save_train_result(out / kCheckpointFile, r);

  json settings = {{"config", cfg.to_json()}, {"seed", cfg.seed}};
  if (!resume.empty()) settings["resumed_from"] = sha256_file(resume);
  if (stop_after) settings["stop_after"] = stop_after;
  write_manifest(out, "train", settings, flags.inputs(data), {kCheckpointFile});

  std::cout << "best epoch " << r.best_epoch << " of " << r.history.size() << ", val ndcg@10 "
            << r.best_ndcg << (r.early_stopped ? " (early stop)" : "")
            << (r.interrupted ? " (stopped; resume with --resume)" : "") << "\n"
            << "checkpoint " << (out / kCheckpointFile).string() << "\n";
  return 0;
}

int cmd_eval(const fs::path& checkpoint, const fs::path& data, const std::string& out,
             const std::string& split_name, const std::string& confounders,
             const std::string& truth) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const CsaVae model = model_from_checkpoint(ck);
  const SplitDataset ds = load_split(data);
  if (ds.item_ids != ck.meta.item_ids)
    throw DataError("the split's item vocabulary does not match the checkpoint");

  ResultsTable table;
  auto run = [&](bool with, const std::string& variant) {
    EvalOptions opt;
    opt.with_confounders = with;
    const EvalResult e =
        split_name == "validation" ? evaluate_validation(model, ds, opt) : evaluate_test(model, ds, opt);
    table.add_eval(e, variant);
  };
  if (confounders == "on" || confounders == "both") run(true, "with-confounders");
  if (confounders == "off" || confounders == "both") run(false, "without-confounders");
  if (!truth.empty()) {
    const Matrix predicted = sem::graph_from_document(sem::export_graph(model.global_graph()));
    const GraphMetrics g = graph_metrics(predicted, sem::graph_from_document(read_json(truth)));
    table.add("shd", 0, "graph", g.shd);
    table.add("edge_precision", 0, "graph", g.edge_precision);
    table.add("edge_recall", 0, "graph", g.edge_recall);
  }
  std::cout << table.summary();
  if (!out.empty()) {
    ensure_dir(out);
    table.write(fs::path(out) / "results.tsv");
    std::map<std::string, fs::path> inputs{{"checkpoint", checkpoint}, {"data", data}};
    if (!truth.empty()) inputs["truth"] = truth;
    write_manifest(out, "eval", {{"split", split_name}, {"confounders", confounders}}, inputs,
                   {"results.tsv"});
  }
  return 0;
}

int cmd_do(const fs::path& checkpoint, const fs::path& data, const std::string& user,
           const std::string& mask_file, std::optional<std::size_t> top, const std::string& out) {
  const auto engine = SteeringEngine::open(checkpoint, data);
  const auto& mc = engine->model().config();
  json doc = mask_file.empty() ? json::object() : read_json(mask_file);
  InterventionRequest req = parse_intervention(doc, mc.k, mc.d);
  if (top) req.k = *top;
  const InterventionResult r = engine->intervene(user, req);

  json report = r.to_json();
  report["user"] = user;
  report["checkpoint_digest"] = engine->digest();
  const auto& test = engine->data().test.rows[engine->user(user)];
  if (!test.empty()) {
    const double before = recall_at_k(r.before.indices(), test, r.before.k);
    const double after = recall_at_k(r.after.indices(), test, r.after.k);
    report["recall_before"] = before;
    report["recall_after"] = after;
    report["recall_delta"] = after - before;
  }
  report["avp_delta"] = r.after.avp - r.before.avp;
  const std::string text = report.dump(2) + "\n";
  std::cout << text;
  if (!out.empty()) {
    ensure_dir(out);
    write_text(fs::path(out) / "intervention.json", text);
    std::map<std::string, fs::path> inputs{{"checkpoint", checkpoint}, {"data", data}};
    if (!mask_file.empty()) inputs["intervention"] = mask_file;
    write_manifest(out, "do", {{"user", user}, {"K", req.k}}, inputs, {"intervention.json"});
  }
  return 0;
}

int cmd_export_graph(const fs::path& checkpoint, const std::string& out) {
  const CsaVae model = model_from_checkpoint(load_checkpoint(checkpoint));
  const std::string text = sem::export_graph(model.global_graph()).dump(2) + "\n";
  if (out.empty())
    std::cout << text;
  else
    write_text(out, text);
  return 0;
}

int cmd_serve(const fs::path& checkpoint, const fs::path& data, const std::string& host, int port) {
  const auto engine = SteeringEngine::open(checkpoint, data);
  std::cerr << "serving " << checkpoint.string() << " (sha256 " << engine->digest() << ") on "
            << host << ":" << port << "\n";
  if (!serve(engine, host, port)) throw std::runtime_error("cannot listen on " + host + ":" + std::to_string(port));
  return 0;
}

void write_repeat_outputs(const fs::path& out, const std::string& command, const TrainFlags& flags,
                          const fs::path& data, const ResultsTable& table, json settings) {
  ensure_dir(out);
  table.write(out / "results.tsv");
  write_manifest(out, command, std::move(settings), flags.inputs(data), {"results.tsv"});
  std::cout << table.summary();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CSA-VAE: confounder-aware variational recommender with a learned causal graph"};
  app.require_subcommand(1);

  std::string out, data, checkpoint, user, mask_file, host = "127.0.0.1";
  int port = 8080;

  std::uint64_t synth_seed = kDefaultSyntheticSeed;
  auto* synth = app.add_subcommand("synth", "Generate the four-confounder synthetic benchmark");
  synth->add_option("--seed", synth_seed, "Generator seed")->capture_default_str();
  synth->add_option("--out", out, "Output directory")->required();

  PrepareFlags pf;
  auto* prepare = app.add_subcommand("prepare", "Binarize, filter and split a ratings file");
  prepare->add_option("--ratings", pf.ratings, "Ratings file (e.g. ML-100K u.data)")
      ->required()->check(CLI::ExistingFile);
  prepare->add_option("--format", pf.format, "ml100k | ml1m | csv")->capture_default_str();
  prepare->add_option("--threshold", pf.threshold, "Positive rating threshold")->capture_default_str();
  prepare->add_option("--min-user", pf.min_user, "Core filter: interactions per user")->capture_default_str();
  prepare->add_option("--min-item", pf.min_item, "Core filter: interactions per item")->capture_default_str();
  prepare->add_option("--seed", pf.seed, "Split seed")->capture_default_str();
  prepare->add_option("--out", out, "Output split directory")->required();

  TrainFlags tf;
  std::string resume;
  std::size_t stop_after = 0;
  auto* train_cmd = app.add_subcommand("train", "Train a model on a processed split");
  tf.attach(train_cmd);
  train_cmd->add_option("--data", data, "Split directory")->required();
  train_cmd->add_option("--out", out, "Output directory")->required();
  train_cmd->add_option("--resume", resume, "Continue from a checkpoint written by train")
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--stop-after", stop_after, "Stop after this epoch, keeping resume state");

  std::string split_name = "test", confounders = "on", truth;
  auto* eval = app.add_subcommand("eval", "Recall/NDCG/AVP of a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", data, "Split directory (default: the one used for training)");
  eval->add_option("--out", out, "Directory for results.tsv and manifest.json");
  eval->add_option("--split", split_name, "test | validation")
      ->check(CLI::IsMember({"test", "validation"}))->capture_default_str();
  eval->add_option("--confounders", confounders, "on | off | both")
      ->check(CLI::IsMember({"on", "off", "both"}))->capture_default_str();
  eval->add_option("--truth", truth, "Graph document to score the learned graph against")
      ->check(CLI::ExistingFile);

  std::optional<std::size_t> top;
  auto* do_cmd = app.add_subcommand("do", "Top-K before and after an intervention");
  do_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  do_cmd->add_option("--data", data, "Split directory (default: the one used for training)");
  do_cmd->add_option("--user", user, "User id")->required();
  do_cmd->add_option("--mask-file", mask_file, "Intervention document")->check(CLI::ExistingFile);
  do_cmd->add_option("--top", top, "List length (overrides the document's K)");
  do_cmd->add_option("--out", out, "Directory for intervention.json and manifest.json");

  auto* export_cmd = app.add_subcommand("export-graph", "Write the learned global graph document");
  export_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  export_cmd->add_option("--out", out, "Output file (default: stdout)");

  auto* serve_cmd = app.add_subcommand("serve", "Start the steering HTTP service");
  serve_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  serve_cmd->add_option("--data", data, "Split directory (default: the one used for training)");
  serve_cmd->add_option("--host", host, "Bind address")->capture_default_str();
  serve_cmd->add_option("--port", port, "Port")->capture_default_str();

  TrainFlags sf;
  std::vector<std::size_t> k_values = {1, 2, 4, 8, 16, 32};
  std::vector<std::uint64_t> seeds;
  std::size_t n_seeds = 5;
  auto* sweep = app.add_subcommand("sweep", "Confounder-count sensitivity over several seeds");
  sf.attach(sweep);
  sweep->add_option("--data", data, "Split directory")->required();
  sweep->add_option("--out", out, "Output directory")->required();
  sweep->add_option("--k-values", k_values, "Confounder counts")->delimiter(',')->capture_default_str();
  sweep->add_option("--seeds", seeds, "Explicit seeds")->delimiter(',');
  sweep->add_option("--n-seeds", n_seeds, "Seeds base..base+n-1 when --seeds is absent")->capture_default_str();

  TrainFlags af;
  auto* ablate = app.add_subcommand("ablate", "Graph ablations over several seeds");
  af.attach(ablate);
  ablate->add_option("--data", data, "Split directory")->required();
  ablate->add_option("--out", out, "Output directory")->required();
  ablate->add_option("--seeds", seeds, "Explicit seeds")->delimiter(',');
  ablate->add_option("--n-seeds", n_seeds, "Seeds base..base+n-1 when --seeds is absent")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) return cmd_synth(synth_seed, out);
    if (*prepare) return cmd_prepare(pf, out);
    if (*train_cmd) return cmd_train(tf, data, out, resume, stop_after);
    if (*eval) return cmd_eval(checkpoint, resolve_data(data, checkpoint), out, split_name, confounders, truth);
    if (*do_cmd) return cmd_do(checkpoint, resolve_data(data, checkpoint), user, mask_file, top, out);
    if (*export_cmd) return cmd_export_graph(checkpoint, out);
    if (*serve_cmd) return cmd_serve(checkpoint, resolve_data(data, checkpoint), host, port);
    if (*sweep) {
      const TrainConfig base = sf.resolve();
      const auto s = seed_list(seeds, n_seeds, base.seed);
      ResultsTable table;
      for (const auto& row : sweep_k(load_split(data), base, k_values, s)) {
        append_repeat(table, row.result, "k=" + std::to_string(row.k));
        if (row.result.failures)
          std::cerr << "k=" << row.k << ": " << row.result.failures << " failed seed(s)\n";
      }
      write_repeat_outputs(out, "sweep", sf, data, table,
                           {{"config", base.to_json()}, {"k_values", k_values}, {"seeds", s}});
      return 0;
    }
    if (*ablate) {
      const TrainConfig cfg = af.resolve();
      const auto s = seed_list(seeds, n_seeds, cfg.seed);
      ResultsTable table;
      for (const auto& row : ablation_run(load_split(data), cfg, s)) {
        append_repeat(table, row.result, row.variant);
        if (row.result.failures)
          std::cerr << row.variant << ": " << row.result.failures << " failed seed(s)\n";
      }
      write_repeat_outputs(out, "ablate", af, data, table, {{"config", cfg.to_json()}, {"seeds", s}});
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

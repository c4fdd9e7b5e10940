#include "csavae/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "csavae/noise.hpp"
#include "csavae/optim.hpp"

namespace csavae {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("train: learning_rate must be positive");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("train: weight_decay must be >= 0");
  if (patience < 1) throw std::invalid_argument("train: patience must be >= 1");
  if (!(tau > 0.0)) throw std::invalid_argument("train: tau must be positive");
  if (k < 1 || d < 1 || hidden < 1) throw std::invalid_argument("train: k, d, hidden must be >= 1");
  if (batch_size < 1 || max_epochs < 1)
    throw std::invalid_argument("train: batch_size and max_epochs must be >= 1");
  if (!(anneal_fraction >= 0.0 && anneal_fraction <= 1.0))
    throw std::invalid_argument("train: anneal_fraction must lie in [0, 1]");
  for (double w : {beta_kl, lambda_dag, lambda_div})
    if (!(w >= 0.0)) throw std::invalid_argument("train: loss weights must be >= 0");
  if (!(dag_c > 0.0)) throw std::invalid_argument("train: dag_c must be positive");
  if (mix_norm != "layer" && mix_norm != "l2")
    throw std::invalid_argument("train: mix_norm must be 'layer' or 'l2'");
}

ModelConfig TrainConfig::model_config(std::size_t n_items) const {
  ModelConfig m;
  m.n_items = n_items;
  m.k = k;
  m.d = d;
  m.hidden = hidden;
  m.tau = tau;
  m.dropout = dropout;
  m.use_ffn = use_ffn;
  m.sinfo_skip = sinfo_skip;
  m.mix_norm = mix_norm == "l2" ? MixNorm::l2 : MixNorm::layer;
  m.use_global = use_global;
  m.use_local = use_local;
  return m;
}

LossWeights TrainConfig::weights() const { return {beta_kl, lambda_dag, lambda_div, dag_c}; }

double TrainConfig::beta_at(std::uint64_t step, std::uint64_t total_steps) const {
  const double ramp = anneal_fraction * static_cast<double>(total_steps);
  if (ramp <= 0.0) return beta_kl;
  return beta_kl * std::min(1.0, static_cast<double>(step) / ramp);
}

nlohmann::json TrainConfig::to_json() const {
  return {{"learning_rate", learning_rate}, {"weight_decay", weight_decay},
          {"patience", patience},           {"tau", tau},
          {"k", k},                         {"d", d},
          {"hidden", hidden},               {"batch_size", batch_size},
          {"max_epochs", max_epochs},       {"seed", seed},
          {"beta_kl", beta_kl},             {"lambda_dag", lambda_dag},
          {"lambda_div", lambda_div},       {"dag_c", dag_c},
          {"anneal_fraction", anneal_fraction},
          {"dropout", dropout},             {"use_ffn", use_ffn},
          {"sinfo_skip", sinfo_skip},       {"mix_norm", mix_norm},
          {"use_global", use_global},       {"use_local", use_local}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) { return from_json(j, TrainConfig{}); }

TrainConfig TrainConfig::from_json(const nlohmann::json& j, TrainConfig c) {
  if (!j.is_object()) throw std::invalid_argument("config: expected a flat JSON object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "learning_rate") c.learning_rate = v.get<double>();
      else if (key == "weight_decay") c.weight_decay = v.get<double>();
      else if (key == "patience") c.patience = v.get<std::size_t>();
      else if (key == "tau") c.tau = v.get<double>();
      else if (key == "k") c.k = v.get<std::size_t>();
      else if (key == "d") c.d = v.get<std::size_t>();
      else if (key == "hidden") c.hidden = v.get<std::size_t>();
      else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (key == "max_epochs") c.max_epochs = v.get<std::size_t>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "beta_kl") c.beta_kl = v.get<double>();
      else if (key == "lambda_dag") c.lambda_dag = v.get<double>();
      else if (key == "lambda_div") c.lambda_div = v.get<double>();
      else if (key == "dag_c") c.dag_c = v.get<double>();
      else if (key == "anneal_fraction") c.anneal_fraction = v.get<double>();
      else if (key == "dropout") c.dropout = v.get<double>();
      else if (key == "use_ffn") c.use_ffn = v.get<bool>();
      else if (key == "sinfo_skip") c.sinfo_skip = v.get<bool>();
      else if (key == "mix_norm") c.mix_norm = v.get<std::string>();
      else if (key == "use_global") c.use_global = v.get<bool>();
      else if (key == "use_local") c.use_local = v.get<bool>();
      else throw std::invalid_argument("config: unknown key '" + key + "'");
    } catch (const nlohmann::json::exception&) {
      throw std::invalid_argument("config: key '" + key + "' has the wrong type");
    }
  }
  c.validate();
  return c;
}

nlohmann::json EpochRecord::to_json() const {
  nlohmann::json j = loss.to_json();
  j.erase("weights");
  j["epoch"] = epoch;
  j["beta_kl"] = loss.weights.beta_kl;
  j["val_recall@10"] = val_recall10;
  j["val_ndcg@10"] = val_ndcg10;
  j["wall_seconds"] = wall_seconds;
  j["improved"] = improved;
  return j;
}

namespace {

EpochRecord epoch_from_json(const nlohmann::json& j) {
  EpochRecord e;
  e.epoch = j.at("epoch").get<std::size_t>();
  e.loss.total = j.at("total").get<double>();
  e.loss.neg_elbo = j.at("neg_elbo").get<double>();
  e.loss.recon = j.at("recon").get<double>();
  e.loss.kl = j.at("kl").get<double>();
  e.loss.dag_global = j.at("dag_global").get<double>();
  e.loss.dag_local = j.at("dag_local").get<double>();
  e.loss.diversity = j.at("diversity").get<double>();
  e.loss.weights.beta_kl = j.at("beta_kl").get<double>();
  e.val_recall10 = j.at("val_recall@10").get<double>();
  e.val_ndcg10 = j.at("val_ndcg@10").get<double>();
  e.wall_seconds = j.at("wall_seconds").get<double>();
  e.improved = j.at("improved").get<bool>();
  return e;
}

void accumulate(LossBreakdown& acc, const LossBreakdown& b, double w) {
  acc.total += w * b.total;
  acc.neg_elbo += w * b.neg_elbo;
  acc.recon += w * b.recon;
  acc.kl += w * b.kl;
  acc.dag_global += w * b.dag_global;
  acc.dag_local += w * b.dag_local;
  acc.diversity += w * b.diversity;
  acc.zero_norm_exogenous = acc.zero_norm_exogenous || b.zero_norm_exogenous;
}

}  // namespace

Matrix confounder_ranges(const CsaVae& model, const InteractionMatrix& input) {
  const ModelConfig& cfg = model.config();
  Matrix out(cfg.k, cfg.d);
  if (!cfg.confounders_active()) return out;
  std::vector<std::size_t> users;
  for (std::size_t u = 0; u < input.n_users(); ++u)
    if (!input.rows[u].empty()) users.push_back(u);
  if (users.empty()) return out;
  std::vector<std::vector<double>> values(cfg.k * cfg.d);
  const std::size_t bs = 500;
  for (std::size_t s = 0; s < users.size(); s += bs) {
    std::vector<SparseRow> rows;
    for (std::size_t b = s; b < std::min(users.size(), s + bs); ++b)
      rows.push_back(input.sparse(users[b]));
    const BatchTrace t = model.forward(rows, ForwardNoise::zeros(rows, cfg), Mode::eval);
    for (const auto& u : t.users)
      for (std::size_t i = 0; i < cfg.k * cfg.d; ++i) values[i].push_back(u.c_hat.flat()[i]);
  }
  auto quantile = [](std::vector<double>& v, double q) {
    // Linear interpolation between order statistics.
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
  };
  for (std::size_t i = 0; i < cfg.k * cfg.d; ++i)
    out.flat()[i] = quantile(values[i], 0.75) - quantile(values[i], 0.25);
  return out;
}

TrainResult train(const SplitDataset& ds, const TrainConfig& cfg, const TrainHooks& hooks) {
  using clock = std::chrono::steady_clock;
  cfg.validate();
  const ModelConfig mcfg = cfg.model_config(ds.n_items());
  CsaVae live(mcfg, cfg.seed);
  Adam adam({cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.weight_decay}, live.params());
  NoiseSource rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);

  std::vector<std::size_t> users;
  for (std::size_t u = 0; u < ds.n_users(); ++u)
    if (!ds.train.rows[u].empty()) users.push_back(u);
  if (users.empty()) throw std::invalid_argument("train: no user has training interactions");
  const std::uint64_t batches_per_epoch = (users.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::uint64_t total_steps = cfg.max_epochs * batches_per_epoch;

  TrainResult r{live, {}, 0, 0.0, false, false, {}, {}};
  std::uint64_t step = 0;
  std::size_t bad_epochs = 0;
  std::size_t first_epoch = 1;

  if (hooks.resume) {
    const Checkpoint& ck = *hooks.resume;
    const auto& st = ck.meta.training_state;
    if (st.is_null()) throw std::invalid_argument("train: checkpoint has no resume state");
    if (TrainConfig::from_json(ck.meta.train_config).to_json() != cfg.to_json())
      throw std::invalid_argument("train: resume configuration differs from the checkpoint");
    r.best = model_from_checkpoint(ck);
    std::vector<std::pair<std::string, Matrix>> lp;
    std::vector<Matrix> m, v;
    for (const auto& p : live.params()) {
      lp.emplace_back(p.name, ck.extra.at("live/" + p.name));
      m.push_back(ck.extra.at("adam_m/" + p.name));
      v.push_back(ck.extra.at("adam_v/" + p.name));
    }
    load_parameters(live, lp);
    adam.restore(st.at("adam_steps").get<std::uint64_t>(), std::move(m), std::move(v));
    rng.restore(st.at("rng").get<std::string>());
    step = st.at("step").get<std::uint64_t>();
    bad_epochs = st.at("bad_epochs").get<std::size_t>();
    r.best_epoch = st.at("best_epoch").get<std::size_t>();
    r.best_ndcg = st.at("best_ndcg").get<double>();
    for (const auto& e : st.at("history")) r.history.push_back(epoch_from_json(e));
    first_epoch = r.history.size() + 1;
    if (st.at("finished").get<bool>()) first_epoch = cfg.max_epochs + 1;
  }

  Validator validate = hooks.validator;
  if (!validate) {
    validate = [&](const CsaVae& m, std::size_t) {
      EvalOptions opt;
      opt.ks = {10};
      opt.compute_avp = false;
      const EvalResult e = evaluate_validation(m, ds, opt);
      return ValidationScore{e.metrics.at("recall@10"), e.metrics.at("ndcg@10")};
    };
  }

  bool finished = false;
  for (std::size_t epoch = first_epoch; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = clock::now();
    // Shuffle from the canonical order each epoch; the permutation then
    // depends only on the generator state, which a resume restores.
    std::vector<std::size_t> order = users;
    std::shuffle(order.begin(), order.end(), rng.engine());
    EpochRecord rec;
    rec.epoch = epoch;
    LossBreakdown last_finite;
    for (std::size_t s = 0; s < users.size(); s += cfg.batch_size) {
      std::vector<SparseRow> rows;
      for (std::size_t b = s; b < std::min(users.size(), s + cfg.batch_size); ++b)
        rows.push_back(ds.train.sparse(order[b]));
      const ForwardNoise noise = ForwardNoise::draw(rng, rows, mcfg, Mode::train);
      const BatchTrace trace = live.forward(rows, noise, Mode::train);
      LossWeights w = cfg.weights();
      w.beta_kl = cfg.beta_at(step, total_steps);
      BatchLoss bl;
      try {
        bl = batch_loss(trace, rows, w, mcfg);
      } catch (const TrainingFault& f) {
        throw TrainingFault(std::string(f.what()) + " at epoch " + std::to_string(epoch) +
                                ", step " + std::to_string(step),
                            step == 0 ? f.breakdown : last_finite);
      }
      last_finite = bl.breakdown;
      live.zero_grad();
      live.backward(trace, bl.seeds);
      adam.step(live.params());
      ++step;
      accumulate(rec.loss, bl.breakdown, static_cast<double>(rows.size()) / users.size());
      rec.loss.weights = w;
    }
    const ValidationScore vs = validate(live, epoch);
    rec.val_recall10 = vs.recall10;
    rec.val_ndcg10 = vs.ndcg10;
    rec.improved = r.history.empty() || vs.ndcg10 > r.best_ndcg;
    if (rec.improved) {
      r.best = live;
      r.best_epoch = epoch;
      r.best_ndcg = vs.ndcg10;
      bad_epochs = 0;
    } else {
      ++bad_epochs;
    }
    rec.wall_seconds = std::chrono::duration<double>(clock::now() - t0).count();
    r.history.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);
    if (bad_epochs >= cfg.patience) {
      r.early_stopped = true;
      finished = true;
      break;
    }
    if (epoch == cfg.max_epochs) finished = true;
    if (hooks.stop_after && epoch >= hooks.stop_after && epoch < cfg.max_epochs) {
      r.interrupted = true;
      break;
    }
  }
  if (first_epoch > cfg.max_epochs) finished = true;

  for (auto& p : r.best.params()) p.grad.fill(0.0);
  r.meta.model = mcfg;
  r.meta.weights = cfg.weights();
  r.meta.seed = cfg.seed;
  r.meta.train_config = cfg.to_json();
  r.meta.item_ids = ds.item_ids;
  r.meta.item_popularity = ds.item_popularity;
  r.meta.confounder_range = confounder_ranges(r.best, ds.train);
  nlohmann::json hist = nlohmann::json::array();
  // Wall times stay out of the checkpoint so reruns produce identical bytes.
  for (const auto& e : r.history) {
    nlohmann::json ej = e.to_json();
    ej["wall_seconds"] = 0.0;
    hist.push_back(std::move(ej));
  }
  r.meta.training_state = {{"step", step},
                           {"adam_steps", adam.steps()},
                           {"rng", rng.state()},
                           {"bad_epochs", bad_epochs},
                           {"best_epoch", r.best_epoch},
                           {"best_ndcg", r.best_ndcg},
                           {"early_stopped", r.early_stopped},
                           {"finished", finished},
                           {"history", hist}};
  for (std::size_t i = 0; i < live.params().size(); ++i) {
    const auto& name = live.params()[i].name;
    r.resume_tensors["live/" + name] = live.params()[i].value;
    r.resume_tensors["adam_m/" + name] = adam.first_moments()[i];
    r.resume_tensors["adam_v/" + name] = adam.second_moments()[i];
  }
  return r;
}

void save_train_result(const std::filesystem::path& path, const TrainResult& r) {
  save_checkpoint(path, r.best, r.meta, r.resume_tensors);
}

RunMetrics default_run_metrics(const TrainResult& r, const SplitDataset& ds) {
  return evaluate_test(r.best, ds).metrics;
}

RepeatResult repeat_runs(const SplitDataset& ds, const TrainConfig& cfg,
                         const std::vector<std::uint64_t>& seeds, const RunEvaluator& evaluator) {
  if (seeds.empty()) throw std::invalid_argument("repeat_runs: at least one seed is required");
  std::vector<std::uint64_t> order = seeds;
  std::sort(order.begin(), order.end());
  RepeatResult out;
  for (std::uint64_t seed : order) {
    SeedOutcome o;
    o.seed = seed;
    try {
      TrainConfig c = cfg;
      c.seed = seed;
      const TrainResult r = train(ds, c);
      o.metrics = evaluator(r, ds);
      o.epochs = r.history.size();
      o.ok = true;
    } catch (const std::exception& e) {
      o.error = e.what();
      ++out.failures;
    }
    out.runs.push_back(std::move(o));
  }
  std::map<std::string, std::size_t> counts;
  for (const auto& o : out.runs)
    if (o.ok)
      for (const auto& [name, v] : o.metrics) {
        out.mean[name] += v;
        ++counts[name];
      }
  for (auto& [name, v] : out.mean) v /= static_cast<double>(counts[name]);
  return out;
}

std::vector<SweepRow> sweep_k(const SplitDataset& ds, const TrainConfig& base,
                              const std::vector<std::size_t>& k_values,
                              const std::vector<std::uint64_t>& seeds,
                              const RunEvaluator& evaluator) {
  if (k_values.empty()) throw std::invalid_argument("sweep_k: no k values");
  std::vector<SweepRow> rows;
  for (std::size_t k : k_values) {
    TrainConfig c = base;
    c.k = k;
    rows.push_back({k, repeat_runs(ds, c, seeds, evaluator)});
  }
  return rows;
}

std::vector<AblationRow> ablation_run(const SplitDataset& ds, const TrainConfig& cfg,
                                      const std::vector<std::uint64_t>& seeds,
                                      const RunEvaluator& evaluator) {
  const std::vector<AblationRow> variants = {{"w/o-both", false, false, {}},
                                             {"w/o-global", false, true, {}},
                                             {"w/o-local", true, false, {}},
                                             {"full", true, true, {}}};
  std::vector<AblationRow> out;
  for (AblationRow v : variants) {
    TrainConfig c = cfg;
    c.use_global = v.use_global;
    c.use_local = v.use_local;
    v.result = repeat_runs(ds, c, seeds, evaluator);
    out.push_back(std::move(v));
  }
  return out;
}

void append_repeat(ResultsTable& table, const RepeatResult& r, const std::string& variant) {
  auto split_name = [](const std::string& name) {
    const auto at = name.find('@');
    return std::pair{name.substr(0, at),
                     at == std::string::npos ? std::size_t{0} : std::stoul(name.substr(at + 1))};
  };
  for (const auto& o : r.runs) {
    if (!o.ok) continue;
    for (const auto& [name, v] : o.metrics) {
      const auto [m, K] = split_name(name);
      table.add(m, K, variant + "/seed=" + std::to_string(o.seed), v);
    }
  }
  for (const auto& [name, v] : r.mean) {
    const auto [m, K] = split_name(name);
    table.add(m, K, variant + "/mean", v);
  }
}

}  // namespace csavae

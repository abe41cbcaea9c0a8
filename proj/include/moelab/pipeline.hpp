#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "moelab/calibration.hpp"
#include "moelab/corpus.hpp"
#include "moelab/errors.hpp"
#include "moelab/eval.hpp"
#include "moelab/finetune.hpp"
#include "moelab/model.hpp"
#include "moelab/persistence.hpp"
#include "moelab/pruning.hpp"
#include "moelab/report.hpp"

#include "json.hpp"

namespace moelab {

namespace detail {

inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                       const std::string& context) {
  if (!j.is_object()) {
    throw ValidationError("config: '" + context + "' must be a JSON object");
  }
  for (const auto& [key, value] : j.items()) {
    (void)value;
    bool ok = false;
    for (const char* a : allowed) {
      if (key == a) {
        ok = true;
        break;
      }
    }
    if (!ok) {
      throw ValidationError("config: unknown key '" + key + "' in '" + context + "'");
    }
  }
}

}  // namespace detail

struct TrainSpec {
  std::int64_t budget = 200000;
  double max_lr = 1e-3;
  double weight_decay = 0.01;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
};

struct PruneSpec {
  std::string strategy = "oneshot";  // oneshot | iterative | lottery
  std::string criterion = "EAN";
  std::string direction;  // empty → criterion default
  double sparsity = 0.5;
  std::size_t rounds = 1;
  std::uint64_t random_seed = 0;
};

// Full run description; JSON form rejects unknown keys at every level and
// every run echoes the fully resolved version of itself into its output.
struct RunConfig {
  ModelConfig model;
  std::string corpus_path;
  TrainSpec train;
  CalibrationSpec calibration;
  PruneSpec prune;
  FinetuneSpec finetune;
  std::size_t threads = 1;

  static RunConfig from_json(const nlohmann::json& j) {
    detail::check_keys(j, {"model", "corpus", "train", "calibration", "prune",
                           "finetune", "threads"},
                       "run config");
    RunConfig rc;
    if (j.contains("model")) {
      detail::check_keys(j.at("model"),
                         {"vocab_size", "d_model", "n_layers", "n_experts", "top_k",
                          "d_hidden", "seq_len", "renormalize_topk", "seed"},
                         "model");
      nlohmann::json m = config_to_json(rc.model);
      m.update(j.at("model"));
      rc.model = config_from_json(m);
    }
    if (j.contains("corpus")) rc.corpus_path = j.at("corpus").get<std::string>();
    if (j.contains("train")) {
      const auto& t = j.at("train");
      detail::check_keys(t, {"budget", "max_lr", "weight_decay", "batch_size", "seed"},
                         "train");
      rc.train.budget = t.value("budget", rc.train.budget);
      rc.train.max_lr = t.value("max_lr", rc.train.max_lr);
      rc.train.weight_decay = t.value("weight_decay", rc.train.weight_decay);
      rc.train.batch_size = t.value("batch_size", rc.train.batch_size);
      rc.train.seed = t.value("seed", rc.train.seed);
    }
    if (j.contains("calibration")) {
      const auto& c = j.at("calibration");
      detail::check_keys(
          c, {"n_sequences", "seq_len", "seed", "sampling_seed", "reservoir_cap"},
          "calibration");
      rc.calibration.n_sequences = c.value("n_sequences", rc.calibration.n_sequences);
      rc.calibration.seq_len = c.value("seq_len", rc.calibration.seq_len);
      rc.calibration.seed = c.value("seed", rc.calibration.seed);
      rc.calibration.sampling_seed = c.value("sampling_seed", rc.calibration.sampling_seed);
      rc.calibration.reservoir_cap = c.value("reservoir_cap", rc.calibration.reservoir_cap);
    }
    if (j.contains("prune")) {
      const auto& p = j.at("prune");
      detail::check_keys(
          p, {"strategy", "criterion", "direction", "sparsity", "rounds", "random_seed"},
          "prune");
      rc.prune.strategy = p.value("strategy", rc.prune.strategy);
      rc.prune.criterion = p.value("criterion", rc.prune.criterion);
      rc.prune.direction = p.value("direction", rc.prune.direction);
      rc.prune.sparsity = p.value("sparsity", rc.prune.sparsity);
      rc.prune.rounds = p.value("rounds", rc.prune.rounds);
      rc.prune.random_seed = p.value("random_seed", rc.prune.random_seed);
    }
    if (j.contains("finetune")) {
      const auto& f = j.at("finetune");
      detail::check_keys(f,
                         {"base_budget", "doubling", "max_lr", "weight_decay",
                          "batch_size", "scope", "seed", "allow_reuse"},
                         "finetune");
      rc.finetune.base_budget = f.value("base_budget", rc.finetune.base_budget);
      rc.finetune.doubling = f.value("doubling", rc.finetune.doubling);
      rc.finetune.max_lr = f.value("max_lr", rc.finetune.max_lr);
      rc.finetune.weight_decay = f.value("weight_decay", rc.finetune.weight_decay);
      rc.finetune.batch_size = f.value("batch_size", rc.finetune.batch_size);
      const std::string scope = f.value("scope", std::string("all"));
      if (scope == "all") {
        rc.finetune.scope = FinetuneSpec::Scope::AllParameters;
      } else if (scope == "router-only") {
        rc.finetune.scope = FinetuneSpec::Scope::RouterOnly;
      } else {
        throw ValidationError("config: finetune.scope must be 'all' or 'router-only'");
      }
      rc.finetune.seed = f.value("seed", rc.finetune.seed);
      rc.finetune.allow_reuse = f.value("allow_reuse", rc.finetune.allow_reuse);
    }
    if (j.contains("threads")) rc.threads = j.at("threads").get<std::size_t>();
    if (rc.threads < 1) throw ValidationError("config: threads must be >= 1");
    rc.model.validate();
    return rc;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["model"] = config_to_json(model);
    j["corpus"] = corpus_path;
    j["train"] = {{"budget", train.budget},
                  {"max_lr", train.max_lr},
                  {"weight_decay", train.weight_decay},
                  {"batch_size", train.batch_size},
                  {"seed", train.seed}};
    j["calibration"] = {{"n_sequences", calibration.n_sequences},
                        {"seq_len", calibration.seq_len},
                        {"seed", calibration.seed},
                        {"sampling_seed", calibration.sampling_seed},
                        {"reservoir_cap", calibration.reservoir_cap}};
    j["prune"] = {{"strategy", prune.strategy},
                  {"criterion", prune.criterion},
                  {"direction", prune.direction},
                  {"sparsity", prune.sparsity},
                  {"rounds", prune.rounds},
                  {"random_seed", prune.random_seed}};
    j["finetune"] = {
        {"base_budget", finetune.base_budget},
        {"doubling", finetune.doubling},
        {"max_lr", finetune.max_lr},
        {"weight_decay", finetune.weight_decay},
        {"batch_size", finetune.batch_size},
        {"scope", finetune.scope == FinetuneSpec::Scope::RouterOnly ? "router-only" : "all"},
        {"seed", finetune.seed},
        {"allow_reuse", finetune.allow_reuse}};
    j["threads"] = threads;
    return j;
  }
};

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config parse error in " + path + ": " + e.what());
  }
  return RunConfig::from_json(j);
}

// Executes a strategy described by a PruneSpec against a trained model.
inline PruneResult run_prune_spec(const MoEModel& model, const Corpus& corpus,
                                  const RunConfig& rc) {
  const auto& ps = rc.prune;
  PruneOptions opts;
  opts.random_seed = ps.random_seed;
  if (ps.criterion == kRandomCriterion) {
    return random_baseline(model, corpus, ps.sparsity, ps.strategy, ps.random_seed,
                           ps.rounds, &rc.finetune);
  }
  const CriterionId id = CriterionId::resolve(ps.criterion, ps.direction);
  if (ps.strategy == "oneshot") {
    const auto& info = criterion_info(id.name);
    CalibrationStats stats;
    const CalibrationStats* sp = nullptr;
    if (info.needs_stats) {
      const std::size_t seq_len =
          rc.calibration.seq_len ? rc.calibration.seq_len : model.config.seq_len;
      CalibrationSet calset = build_calibration_set(corpus, rc.calibration.n_sequences,
                                                    seq_len, rc.calibration.seed);
      stats = run_calibration(model, calset, info.needs_gradients,
                              rc.calibration.sampling_seed, rc.calibration.reservoir_cap);
      stats.model_digest = model_digest(model);
      sp = &stats;
    }
    return one_shot(model, id, ps.sparsity, sp, opts);
  }
  if (ps.strategy == "iterative") {
    return iterative(model, corpus, id, ps.sparsity, ps.rounds, rc.calibration, opts);
  }
  if (ps.strategy == "lottery") {
    return lottery(model, corpus, id, ps.sparsity, ps.rounds, rc.calibration,
                   rc.finetune, opts);
  }
  throw ValidationError("unknown strategy '" + ps.strategy +
                        "' (expected oneshot|iterative|lottery)");
}

struct PipelineResult {
  MoEModel base_model;
  MoEModel pruned_model;
  PruningPlan plan;
  SubnetworkLineage lineage;
  EvalResult base_eval;
  EvalResult final_eval;
  std::map<std::string, std::string> manifest;
};

// train → calibrate → prune → eval, with every artifact written to out_dir.
inline PipelineResult run_pipeline(const RunConfig& rc, const std::string& out_dir) {
  namespace fs = std::filesystem;
  Corpus corpus = load_corpus(rc.corpus_path);
  PipelineResult res;
  res.base_model = init_model(rc.model);
  run_training(res.base_model, corpus, rc.train.budget, rc.train.max_lr,
               rc.train.weight_decay, rc.train.batch_size, rc.train.seed);

  EvalSplit split = make_eval_split(corpus, rc.model.seq_len);
  res.base_eval = evaluate(res.base_model, split);

  PruneResult pruned = run_prune_spec(res.base_model, corpus, rc);
  res.pruned_model = std::move(pruned.model);
  res.plan = std::move(pruned.plan);
  res.lineage = std::move(pruned.lineage);
  res.final_eval = evaluate(res.pruned_model, split);

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory " + out_dir + ": " + ec.message());
  save_model(res.base_model, (fs::path(out_dir) / "base_model.moel").string());
  save_model(res.pruned_model, (fs::path(out_dir) / "pruned_model.moel").string());

  ReportInputs inputs;
  inputs.config = rc.to_json();
  inputs.plan = &res.plan;
  inputs.lineage = &res.lineage;
  inputs.base_eval = &res.base_eval;
  inputs.final_eval = &res.final_eval;
  res.manifest = emit_reports(out_dir, inputs);
  return res;
}

}  // namespace moelab

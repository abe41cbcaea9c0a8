// moelab command-line front end.
//
// Exit codes: 0 success, 1 usage error, 2 validation failure,
// 3 numerical failure (non-finite loss / SVD non-convergence).

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "moelab/moelab.hpp"

namespace fs = std::filesystem;
using namespace moelab;

namespace {

// Thrown for errors that are the caller's fault at the flag level (exit 1).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void check_criterion_name(const std::string& name) {
  if (name == kRandomCriterion) return;
  try {
    criterion_info(name);
  } catch (const ValidationError& e) {
    throw UsageError(e.what());
  }
}

void write_run_info(const std::string& out_dir, const nlohmann::json& resolved) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory " + out_dir + ": " + ec.message());
  nlohmann::json j;
  j["tool"] = "moelab";
  j["version"] = kToolVersion;
  j["config"] = resolved;
  std::ofstream out(fs::path(out_dir) / "run_info.json", std::ios::trunc);
  if (!out) throw IoError("cannot write run_info.json in " + out_dir);
  out << j.dump(2) << '\n';
}

CalibrationStats calibrate_with(const MoEModel& model, const Corpus& corpus,
                                const CalibrationSpec& spec, bool gradients) {
  const std::size_t seq_len = spec.seq_len ? spec.seq_len : model.config.seq_len;
  CalibrationSet calset =
      build_calibration_set(corpus, spec.n_sequences, seq_len, spec.seed);
  CalibrationStats stats = run_calibration(model, calset, gradients, spec.sampling_seed,
                                           spec.reservoir_cap);
  stats.model_digest = model_digest(model);
  return stats;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"moelab: desk-scale laboratory for expert-level MoE sparsification"};
  app.require_subcommand(1);

  std::size_t threads = 1;
  if (const char* env = std::getenv("MOELAB_THREADS")) {
    threads = static_cast<std::size_t>(std::max(1L, std::atol(env)));
  }
  app.add_option("--threads", threads, "worker threads (1 = bit-reproducible)")
      ->capture_default_str();

  std::string config_path, model_path, corpus_path, stats_path, out_dir;
  std::string criterion = "EAN", direction, strategy = "oneshot", scope = "all";
  std::string plan_a_path, plan_b_path;
  double sparsity = 0.5;
  std::size_t rounds = 1, n_sequences = 64, cal_seq_len = 0;
  std::int64_t budget = 50000;
  double max_lr = 1e-3, weight_decay = 0.01;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0, sampling_seed = 0, random_seed = 0;
  bool gradients = false, allow_reuse = false, fp64 = false;

  auto* train = app.add_subcommand("train", "pretrain the toy MoE base checkpoint");
  train->add_option("--config", config_path)->required();
  train->add_option("--out", out_dir)->required();

  auto* calibrate = app.add_subcommand("calibrate", "produce calibration statistics");
  calibrate->add_option("--model", model_path)->required();
  calibrate->add_option("--corpus", corpus_path)->required();
  calibrate->add_option("--out", out_dir)->required();
  calibrate->add_option("--sequences", n_sequences);
  calibrate->add_option("--seq-len", cal_seq_len);
  calibrate->add_option("--seed", seed);
  calibrate->add_option("--sampling-seed", sampling_seed);
  calibrate->add_flag("--gradients", gradients, "also accumulate expert gradients");

  auto* score = app.add_subcommand("score", "emit a criterion score table");
  score->add_option("--model", model_path)->required();
  score->add_option("--stats", stats_path);
  score->add_option("--criterion", criterion)->required();
  score->add_option("--direction", direction, "min|max (default: criterion default)");
  score->add_option("--out", out_dir)->required();

  auto* prune = app.add_subcommand("prune", "execute a pruning plan");
  prune->add_option("--model", model_path)->required();
  prune->add_option("--corpus", corpus_path)->required();
  prune->add_option("--strategy", strategy, "oneshot|iterative|lottery");
  prune->add_option("--criterion", criterion);
  prune->add_option("--direction", direction);
  prune->add_option("--sparsity", sparsity);
  prune->add_option("--rounds", rounds);
  prune->add_option("--sequences", n_sequences);
  prune->add_option("--seed", seed);
  prune->add_option("--sampling-seed", sampling_seed);
  prune->add_option("--random-seed", random_seed);
  prune->add_option("--ft-budget", budget, "lottery: base finetune budget");
  prune->add_option("--ft-lr", max_lr);
  prune->add_option("--out", out_dir)->required();

  auto* finetune = app.add_subcommand("finetune", "standalone budget finetune");
  finetune->add_option("--model", model_path)->required();
  finetune->add_option("--corpus", corpus_path)->required();
  finetune->add_option("--budget", budget)->required();
  finetune->add_option("--lr", max_lr);
  finetune->add_option("--weight-decay", weight_decay);
  finetune->add_option("--batch", batch_size);
  finetune->add_option("--scope", scope, "all|router-only");
  finetune->add_option("--seed", seed);
  finetune->add_flag("--allow-reuse", allow_reuse);
  finetune->add_option("--out", out_dir)->required();

  auto* evalc = app.add_subcommand("eval", "perplexity on the held-out corpus tail");
  evalc->add_option("--model", model_path)->required();
  evalc->add_option("--corpus", corpus_path)->required();
  evalc->add_option("--out", out_dir)->required();

  auto* ablate = app.add_subcommand("ablate", "single-expert ablation grid");
  ablate->add_option("--model", model_path)->required();
  ablate->add_option("--corpus", corpus_path)->required();
  ablate->add_option("--out", out_dir)->required();

  auto* compare = app.add_subcommand("compare", "divergence map between two plans");
  compare->add_option("--plan-a", plan_a_path)->required();
  compare->add_option("--plan-b", plan_b_path)->required();
  compare->add_option("--out", out_dir)->required();

  auto* pipeline = app.add_subcommand("pipeline", "train > calibrate > prune > eval");
  pipeline->add_option("--config", config_path)->required();
  pipeline->add_option("--out", out_dir)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*train) {
      RunConfig rc = load_run_config(config_path);
      Corpus corpus = load_corpus(rc.corpus_path);
      MoEModel model = init_model(rc.model);
      FinetuneReport rep =
          run_training(model, corpus, rc.train.budget, rc.train.max_lr,
                       rc.train.weight_decay, rc.train.batch_size, rc.train.seed);
      write_run_info(out_dir, rc.to_json());
      const std::string digest =
          save_model(model, (fs::path(out_dir) / "model.moel").string(), fp64);
      ReportInputs inputs;
      inputs.config = rc.to_json();
      inputs.finetune = &rep;
      emit_reports(out_dir, inputs);
      std::cout << "trained " << rep.tokens_consumed << " tokens, checkpoint " << digest
                << '\n';
    } else if (*calibrate) {
      MoEModel model = load_model(model_path);
      Corpus corpus = load_corpus(corpus_path);
      CalibrationSpec spec{n_sequences, cal_seq_len, seed, sampling_seed,
                           kDefaultReservoirCap};
      CalibrationStats stats = calibrate_with(model, corpus, spec, gradients);
      write_run_info(out_dir, {{"model", model_path},
                               {"corpus", corpus_path},
                               {"sequences", n_sequences},
                               {"seed", seed},
                               {"sampling_seed", sampling_seed},
                               {"gradients", gradients}});
      const std::string digest =
          save_stats(stats, (fs::path(out_dir) / "stats.moel").string());
      std::cout << "calibrated " << stats.token_total << " tokens, stats " << digest
                << '\n';
    } else if (*score) {
      check_criterion_name(criterion);
      if (criterion == kRandomCriterion) {
        throw UsageError("'random' is a pruning baseline, not a scorable criterion");
      }
      MoEModel model = load_model(model_path);
      const auto& info = criterion_info(criterion);
      CalibrationStats stats;
      const CalibrationStats* sp = nullptr;
      if (info.needs_stats) {
        if (stats_path.empty()) {
          throw UsageError("criterion " + criterion + " requires --stats");
        }
        stats = load_stats(stats_path);
        sp = &stats;
      }
      const CriterionId id = CriterionId::resolve(criterion, direction);
      ScoreTable table = build_score_table(id, model, sp);
      write_run_info(out_dir, {{"model", model_path},
                               {"stats", stats_path},
                               {"criterion", id.name},
                               {"direction", to_string(id.direction)}});
      ReportInputs inputs;
      inputs.config = {{"criterion", id.name}, {"direction", to_string(id.direction)}};
      inputs.score_tables.push_back(&table);
      emit_reports(out_dir, inputs);
      std::cout << "criterion " << id.name << " direction " << to_string(id.direction)
                << " digest " << table.digest() << '\n';
    } else if (*prune) {
      check_criterion_name(criterion);
      MoEModel model = load_model(model_path);
      Corpus corpus = load_corpus(corpus_path);
      RunConfig rc;
      rc.model = model.config;
      rc.corpus_path = corpus_path;
      rc.calibration = CalibrationSpec{n_sequences, 0, seed, sampling_seed,
                                       kDefaultReservoirCap};
      rc.prune = PruneSpec{strategy, criterion, direction, sparsity, rounds, random_seed};
      rc.finetune.base_budget = budget;
      rc.finetune.max_lr = max_lr;
      rc.finetune.seed = seed;
      PruneResult res = run_prune_spec(model, corpus, rc);
      write_run_info(out_dir, rc.to_json());
      const std::string digest =
          save_model(res.model, (fs::path(out_dir) / "pruned_model.moel").string(), fp64);
      ReportInputs inputs;
      inputs.config = rc.to_json();
      inputs.plan = &res.plan;
      inputs.lineage = &res.lineage;
      emit_reports(out_dir, inputs);
      std::cout << "pruned to " << res.model.n_active(0) << " experts/layer, checkpoint "
                << digest << ", plan " << res.plan.digest() << '\n';
    } else if (*finetune) {
      MoEModel model = load_model(model_path);
      Corpus corpus = load_corpus(corpus_path);
      FinetuneSpec spec;
      spec.base_budget = budget;
      spec.doubling = false;
      spec.max_lr = max_lr;
      spec.weight_decay = weight_decay;
      spec.batch_size = batch_size;
      spec.seed = seed;
      spec.allow_reuse = allow_reuse;
      if (scope == "router-only") {
        spec.scope = FinetuneSpec::Scope::RouterOnly;
      } else if (scope != "all") {
        throw UsageError("--scope must be 'all' or 'router-only'");
      }
      FinetuneReport rep = finetune_round(model, corpus, spec, 1, nullptr);
      write_run_info(out_dir, {{"model", model_path},
                               {"budget", budget},
                               {"lr", max_lr},
                               {"scope", scope},
                               {"seed", seed}});
      const std::string digest =
          save_model(model, (fs::path(out_dir) / "model.moel").string(), fp64);
      ReportInputs inputs;
      inputs.config = {{"budget", budget}, {"scope", scope}};
      inputs.finetune = &rep;
      emit_reports(out_dir, inputs);
      std::cout << "finetuned " << rep.tokens_consumed << " tokens, checkpoint " << digest
                << '\n';
    } else if (*evalc) {
      MoEModel model = load_model(model_path);
      Corpus corpus = load_corpus(corpus_path);
      EvalSplit split = make_eval_split(corpus, model.config.seq_len);
      EvalResult res = evaluate(model, split);
      write_run_info(out_dir, {{"model", model_path}, {"corpus", corpus_path}});
      ReportInputs inputs;
      inputs.config = {{"model", model_path}, {"corpus", corpus_path}};
      inputs.base_eval = &res;
      emit_reports(out_dir, inputs);
      std::cout << "perplexity " << res.perplexity << " over " << res.token_count
                << " tokens\n";
    } else if (*ablate) {
      MoEModel model = load_model(model_path);
      Corpus corpus = load_corpus(corpus_path);
      EvalSplit split = make_eval_split(corpus, model.config.seq_len);
      AblationGrid grid = single_expert_ablation(model, split, threads);
      write_run_info(out_dir, {{"model", model_path}, {"corpus", corpus_path}});
      ReportInputs inputs;
      inputs.config = {{"model", model_path}, {"corpus", corpus_path}};
      inputs.ablation = &grid;
      emit_reports(out_dir, inputs);
      std::cout << "ablation grid " << grid.n_layers << "x" << grid.n_experts
                << ", base perplexity " << grid.base_perplexity << '\n';
    } else if (*compare) {
      auto read_plan = [](const std::string& path) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot read plan file: " + path);
        nlohmann::json j;
        in >> j;
        return PruningPlan::from_json(j);
      };
      PruningPlan a = read_plan(plan_a_path);
      PruningPlan b = read_plan(plan_b_path);
      DivergenceMap map = plan_divergence(a, b);
      write_run_info(out_dir, {{"plan_a", plan_a_path}, {"plan_b", plan_b_path}});
      ReportInputs inputs;
      inputs.config = {{"plan_a", plan_a_path}, {"plan_b", plan_b_path}};
      inputs.divergence = &map;
      emit_reports(out_dir, inputs);
      std::cout << "agreement " << map.agreement << '\n';
    } else if (*pipeline) {
      RunConfig rc = load_run_config(config_path);
      if (rc.threads == 1) rc.threads = threads;
      check_criterion_name(rc.prune.criterion);
      PipelineResult res = run_pipeline(rc, out_dir);
      write_run_info(out_dir, rc.to_json());
      std::cout << "base perplexity " << res.base_eval.perplexity << ", final perplexity "
                << res.final_eval.perplexity << ", plan " << res.plan.digest() << '\n';
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 3;
  } catch (const IoError& e) {
    std::cerr << "i/o failure: " << e.what() << '\n';
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << "validation failure: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "moelab/digest.hpp"
#include "moelab/errors.hpp"
#include "moelab/eval.hpp"
#include "moelab/finetune.hpp"
#include "moelab/pruning.hpp"

#include "json.hpp"

namespace moelab {

// ---- single-expert ablation sweep ----

struct AblationGrid {
  std::size_t n_layers = 0;
  std::size_t n_experts = 0;
  Matrix perplexity;  // entry (l, e): base model with only expert e of layer l removed
  double base_perplexity = 0.0;
};

// Each cell evaluates an independent copy of the base model with exactly one
// expert removed; cells are embarrassingly parallel.
inline AblationGrid single_expert_ablation(const MoEModel& model, const EvalSplit& split,
                                           std::size_t threads = 1) {
  for (const auto& layer : model.layers) {
    for (std::size_t e = 0; e < layer.expert_ids.size(); ++e) {
      if (layer.expert_ids[e] != e) {
        throw ValidationError("single_expert_ablation: model is already pruned");
      }
    }
  }
  AblationGrid grid;
  grid.n_layers = model.config.n_layers;
  grid.n_experts = model.n_active(0);
  grid.perplexity = Matrix(grid.n_layers, grid.n_experts);
  grid.base_perplexity = evaluate(model, split).perplexity;

  const std::size_t cells = grid.n_layers * grid.n_experts;
  auto run_cell = [&](std::size_t cell) {
    const std::size_t l = cell / grid.n_experts;
    const std::size_t e = cell % grid.n_experts;
    MoEModel copy = model;
    drop_expert(copy, l, e);
    grid.perplexity.at(l, e) = evaluate(copy, split).perplexity;
  };
  if (threads <= 1) {
    for (std::size_t c = 0; c < cells; ++c) run_cell(c);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        for (std::size_t c = t; c < cells; c += threads) run_cell(c);
      });
    }
    for (auto& th : pool) th.join();
  }
  return grid;
}

// ---- report emission ----

namespace detail {

inline std::string fmt_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

inline void write_report_file(const std::filesystem::path& path, const std::string& body,
                              std::map<std::string, std::string>& manifest) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write report file: " + path.string());
  out.write(body.data(), static_cast<std::streamsize>(body.size()));
  out.close();
  if (!out) throw IoError("write failed: " + path.string());
  manifest[path.filename().string()] = fnv64_hex(body);
}

}  // namespace detail

struct ReportInputs {
  nlohmann::json config;  // resolved run configuration echo
  const PruningPlan* plan = nullptr;
  const SubnetworkLineage* lineage = nullptr;
  std::vector<const ScoreTable*> score_tables;
  const EvalResult* base_eval = nullptr;
  const EvalResult* final_eval = nullptr;
  const AblationGrid* ablation = nullptr;
  const LoadDistribution* loads = nullptr;
  const DivergenceMap* divergence = nullptr;
  const FinetuneReport* finetune = nullptr;
};

// Writes every available artifact into out_dir and returns the manifest
// (file name -> content hash), which is also saved as manifest.json.
inline std::map<std::string, std::string> emit_reports(const std::string& out_dir,
                                                       const ReportInputs& in) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create report directory " + out_dir + ": " + ec.message());
  std::map<std::string, std::string> manifest;

  nlohmann::json summary;
  summary["report_version"] = 1;
  summary["config"] = in.config;

  if (!in.score_tables.empty()) {
    std::string csv = "layer,expert_original_id,criterion,direction,score\n";
    for (const ScoreTable* t : in.score_tables) {
      for (std::size_t l = 0; l < t->scores.size(); ++l) {
        for (std::size_t e = 0; e < t->scores[l].size(); ++e) {
          csv += std::to_string(l) + ',' + std::to_string(t->expert_ids[l][e]) + ',' +
                 t->criterion + ',' + to_string(t->direction) + ',' +
                 detail::fmt_double(t->scores[l][e]) + '\n';
        }
      }
    }
    detail::write_report_file(fs::path(out_dir) / "scores.csv", csv, manifest);
    nlohmann::json digs = nlohmann::json::array();
    for (const ScoreTable* t : in.score_tables)
      digs.push_back({{"criterion", t->criterion}, {"digest", t->digest()}});
    summary["score_tables"] = digs;
  }

  if (in.plan) {
    detail::write_report_file(fs::path(out_dir) / "plan.json",
                              in.plan->to_json().dump(2) + '\n', manifest);
    summary["plan_digest"] = in.plan->digest();
    summary["strategy"] = in.plan->strategy;
    summary["sparsity"] = in.plan->target_sparsity;
  }

  if (in.lineage) {
    summary["lineage"] = {{"checkpoints", in.lineage->checkpoint_digests},
                          {"score_digests", in.lineage->score_digests}};
  }

  if (in.base_eval) {
    summary["base_eval"] = {{"perplexity", in.base_eval->perplexity},
                            {"mean_nll", in.base_eval->mean_nll},
                            {"tokens", in.base_eval->token_count},
                            {"split_digest", in.base_eval->split_digest}};
  }
  if (in.final_eval) {
    summary["final_eval"] = {{"perplexity", in.final_eval->perplexity},
                             {"mean_nll", in.final_eval->mean_nll},
                             {"tokens", in.final_eval->token_count},
                             {"split_digest", in.final_eval->split_digest}};
  }

  if (in.ablation) {
    std::string csv = "layer,expert_original_id,perplexity\n";
    for (std::size_t l = 0; l < in.ablation->n_layers; ++l)
      for (std::size_t e = 0; e < in.ablation->n_experts; ++e)
        csv += std::to_string(l) + ',' + std::to_string(e) + ',' +
               detail::fmt_double(in.ablation->perplexity.at(l, e)) + '\n';
    detail::write_report_file(fs::path(out_dir) / "ablation.csv", csv, manifest);
    summary["ablation_base_perplexity"] = in.ablation->base_perplexity;
  }

  if (in.loads) {
    std::string csv = "layer,expert_slot,load,cv\n";
    for (std::size_t l = 0; l < in.loads->loads.size(); ++l)
      for (std::size_t e = 0; e < in.loads->loads[l].size(); ++e)
        csv += std::to_string(l) + ',' + std::to_string(e) + ',' +
               std::to_string(in.loads->loads[l][e]) + ',' +
               detail::fmt_double(in.loads->cv[l]) + '\n';
    detail::write_report_file(fs::path(out_dir) / "loads.csv", csv, manifest);
  }

  if (in.divergence) {
    std::string csv = "layer,expert_original_id,class\n";
    for (const auto& cell : in.divergence->cells) {
      const char* kind = cell.kind == DivergenceCell::Kind::BothDrop   ? "both_drop"
                         : cell.kind == DivergenceCell::Kind::Disagree ? "disagree"
                                                                       : "both_retain";
      csv += std::to_string(cell.layer) + ',' + std::to_string(cell.original_id) + ',' +
             kind + '\n';
    }
    detail::write_report_file(fs::path(out_dir) / "divergence.csv", csv, manifest);
    summary["divergence_agreement"] = in.divergence->agreement;
  }

  if (in.finetune) {
    std::string csv = "step,tokens,loss,lr\n";
    for (const auto& p : in.finetune->curve)
      csv += std::to_string(p.step) + ',' + std::to_string(p.tokens) + ',' +
             detail::fmt_double(p.loss) + ',' + detail::fmt_double(p.lr) + '\n';
    detail::write_report_file(fs::path(out_dir) / "finetune_curve.csv", csv, manifest);
    summary["finetune"] = {{"tokens_consumed", in.finetune->tokens_consumed},
                           {"loss_initial", in.finetune->loss_initial},
                           {"loss_final", in.finetune->loss_final},
                           {"ppl_initial", in.finetune->ppl_initial},
                           {"ppl_final", in.finetune->ppl_final},
                           {"reused_data", in.finetune->reused_data}};
  }

  detail::write_report_file(fs::path(out_dir) / "summary.json", summary.dump(2) + '\n',
                            manifest);

  nlohmann::json mj;
  for (const auto& [name, hash] : manifest) mj[name] = hash;
  const std::string manifest_body = nlohmann::json{{"files", mj}}.dump(2) + '\n';
  std::ofstream mf(fs::path(out_dir) / "manifest.json", std::ios::binary | std::ios::trunc);
  if (!mf) throw IoError("cannot write manifest in " + out_dir);
  mf << manifest_body;
  mf.close();
  manifest["manifest.json"] = fnv64_hex(manifest_body);
  return manifest;
}

}  // namespace moelab

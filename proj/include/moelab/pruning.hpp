#pragma once

#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "moelab/calibration.hpp"
#include "moelab/corpus.hpp"
#include "moelab/criteria.hpp"
#include "moelab/errors.hpp"
#include "moelab/finetune.hpp"
#include "moelab/model.hpp"
#include "moelab/persistence.hpp"
#include "moelab/rng.hpp"

#include "json.hpp"

namespace moelab {

inline constexpr const char* kRandomCriterion = "random";

struct DropRecord {
  std::size_t round;        // 1-based
  std::size_t layer;
  std::size_t original_id;  // identity from the unpruned model
};

struct PlanSeeds {
  std::uint64_t calibration = 0;
  std::uint64_t sampling = 0;
  std::uint64_t random = 0;  // used only by the random baseline
};

struct PruningPlan {
  std::string strategy;  // oneshot | iterative | lottery
  std::string criterion;
  Direction direction = Direction::Min;
  double target_sparsity = 0.0;
  std::size_t rounds = 1;
  std::vector<DropRecord> drops;
  PlanSeeds seeds;
  std::string root_digest;        // model digest before any drop
  std::size_t n_layers = 0;
  std::size_t n_experts_initial = 0;
  std::string finetune_schedule;  // lottery only, e.g. "base=50000,doubling"
  bool calset_reused_across_rounds = true;

  // Strategy-independent view: two plans that drop the same experts in the
  // same round order serialize identically regardless of how they were made.
  nlohmann::json canonical_json() const {
    nlohmann::json j;
    j["criterion"] = criterion;
    j["direction"] = to_string(direction);
    j["sparsity"] = target_sparsity;
    j["rounds"] = rounds;
    j["root_digest"] = root_digest;
    j["n_layers"] = n_layers;
    j["n_experts"] = n_experts_initial;
    j["seeds"] = {{"calibration", seeds.calibration},
                  {"sampling", seeds.sampling},
                  {"random", seeds.random}};
    nlohmann::json drops_j = nlohmann::json::array();
    for (const auto& d : drops) drops_j.push_back({d.round, d.layer, d.original_id});
    j["drops"] = drops_j;
    return j;
  }

  nlohmann::json to_json() const {
    nlohmann::json j = canonical_json();
    j["strategy"] = strategy;
    j["finetune_schedule"] = finetune_schedule;
    j["calset_reused_across_rounds"] = calset_reused_across_rounds;
    return j;
  }

  static PruningPlan from_json(const nlohmann::json& j) {
    PruningPlan p;
    p.strategy = j.value("strategy", "");
    p.criterion = j.at("criterion").get<std::string>();
    p.direction = parse_direction(j.at("direction").get<std::string>());
    p.target_sparsity = j.at("sparsity").get<double>();
    p.rounds = j.at("rounds").get<std::size_t>();
    p.root_digest = j.at("root_digest").get<std::string>();
    p.n_layers = j.at("n_layers").get<std::size_t>();
    p.n_experts_initial = j.at("n_experts").get<std::size_t>();
    p.seeds.calibration = j.at("seeds").at("calibration").get<std::uint64_t>();
    p.seeds.sampling = j.at("seeds").at("sampling").get<std::uint64_t>();
    p.seeds.random = j.at("seeds").at("random").get<std::uint64_t>();
    p.finetune_schedule = j.value("finetune_schedule", "");
    p.calset_reused_across_rounds = j.value("calset_reused_across_rounds", true);
    for (const auto& d : j.at("drops")) {
      p.drops.push_back({d.at(0).get<std::size_t>(), d.at(1).get<std::size_t>(),
                         d.at(2).get<std::size_t>()});
    }
    return p;
  }

  std::string digest() const { return fnv64_hex(canonical_json().dump()); }

  std::vector<std::set<std::size_t>> dropped_per_layer() const {
    std::vector<std::set<std::size_t>> out(n_layers);
    for (const auto& d : drops) out[d.layer].insert(d.original_id);
    return out;
  }
};

// Audit trail: model digest before round 1 plus after each round, and the
// score-table digests that drove each round's drops.
struct SubnetworkLineage {
  std::vector<std::string> checkpoint_digests;  // rounds + 1 entries
  std::vector<std::string> score_digests;       // one per round (empty for random)
};

struct CalibrationSpec {
  std::size_t n_sequences = 64;
  std::size_t seq_len = 0;  // 0 → model seq_len
  std::uint64_t seed = 0;
  std::uint64_t sampling_seed = 0;
  std::size_t reservoir_cap = kDefaultReservoirCap;
};

// ---- expert removal with router surgery ----

// Deletes the expert's weight pair and its router column; survivors' router
// logits are bit-unchanged (only the softmax normalizer shifts).
inline void drop_expert(MoEModel& model, std::size_t layer, std::size_t original_id) {
  if (layer >= model.layers.size()) {
    throw ValidationError("drop_expert: layer " + std::to_string(layer) + " out of range");
  }
  auto& L = model.layers[layer];
  std::size_t slot = L.expert_ids.size();
  for (std::size_t i = 0; i < L.expert_ids.size(); ++i) {
    if (L.expert_ids[i] == original_id) {
      slot = i;
      break;
    }
  }
  if (slot == L.expert_ids.size()) {
    throw ValidationError("drop_expert: expert " + std::to_string(original_id) +
                          " is not retained in layer " + std::to_string(layer));
  }
  const std::size_t n = L.expert_ids.size();
  if (n - 1 < model.config.top_k) {
    throw ValidationError("drop_expert: dropping would leave " + std::to_string(n - 1) +
                          " experts, below top_k=" + std::to_string(model.config.top_k));
  }
  Matrix trimmed(L.router.w_gate.rows, n - 1);
  for (std::size_t i = 0; i < trimmed.rows; ++i) {
    std::size_t c = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == slot) continue;
      trimmed.at(i, c++) = L.router.w_gate.at(i, j);
    }
  }
  L.router.w_gate = std::move(trimmed);
  L.experts.erase(L.experts.begin() + static_cast<std::ptrdiff_t>(slot));
  L.expert_ids.erase(L.expert_ids.begin() + static_cast<std::ptrdiff_t>(slot));
}

namespace detail {

// Per-layer drops for one strategy round, given total sparsity s over r rounds.
inline std::size_t drops_per_layer_per_round(double s, std::size_t n_experts,
                                             std::size_t rounds, std::size_t top_k) {
  if (s < 0.0 || s >= 1.0) {
    throw ValidationError("sparsity must lie in [0, 1), got " + std::to_string(s));
  }
  if (rounds < 1) throw ValidationError("rounds must be >= 1");
  const double total = s * static_cast<double>(n_experts);
  const double total_rounded = std::round(total);
  if (std::fabs(total - total_rounded) > 1e-9) {
    throw ValidationError("sparsity " + std::to_string(s) + " x " +
                          std::to_string(n_experts) +
                          " experts is not an integral per-layer drop count");
  }
  const auto m_total = static_cast<std::size_t>(total_rounded);
  if (m_total % rounds != 0) {
    throw ValidationError("total per-layer drops " + std::to_string(m_total) +
                          " not divisible by rounds " + std::to_string(rounds));
  }
  if (n_experts - m_total < top_k) {
    throw ValidationError("dropping " + std::to_string(m_total) +
                          " experts per layer would leave fewer than top_k=" +
                          std::to_string(top_k) + " survivors");
  }
  return m_total / rounds;
}

// Slots (ascending-retained order) chosen by the criterion for one layer.
inline std::vector<std::size_t> round_drop_slots(const MoEModel& model,
                                                 const CriterionId& id,
                                                 const CalibrationStats* stats,
                                                 std::size_t layer, std::size_t m,
                                                 const ScoreOptions& opts,
                                                 std::uint64_t random_seed,
                                                 std::size_t round) {
  const std::size_t n = model.n_active(layer);
  if (id.name == kRandomCriterion) {
    std::vector<std::size_t> slots(n);
    std::iota(slots.begin(), slots.end(), std::size_t{0});
    Rng rng(derive_seed(random_seed, (round << 24) | (layer + 1)));
    for (std::size_t i = 0; i < m; ++i) {
      const std::size_t j = i + rng.below(n - i);
      std::swap(slots[i], slots[j]);
    }
    slots.resize(m);
    return slots;
  }
  const auto& info = criterion_info(id.name);
  if (info.pairwise) {
    const auto& st = moelab::detail::need_stats(stats, info.name);
    const auto& usage = st.layers[layer].usage;
    const CountMatrix matrix = id.name == "ECC"
                                   ? collaboration_pair_stats(st, layer)
                                   : token_similarity_matrix(st, layer);
    return select_drop_pairwise(matrix, usage, id.direction, {}, m,
                                model.config.top_k);
  }
  const Vector scores = score_layer(id.name, model, stats, layer, opts);
  return select_drop(scores, id.direction, {}, m, model.config.top_k);
}

// One estimation-free drop round on an already-scored model.
inline void execute_round(MoEModel& model, const CriterionId& id,
                          const CalibrationStats* stats, std::size_t m,
                          const ScoreOptions& opts, std::uint64_t random_seed,
                          std::size_t round, PruningPlan& plan) {
  for (std::size_t l = 0; l < model.config.n_layers; ++l) {
    const auto slots = round_drop_slots(model, id, stats, l, m, opts, random_seed, round);
    std::vector<std::size_t> ids;
    ids.reserve(slots.size());
    for (std::size_t s : slots) ids.push_back(model.layers[l].expert_ids[s]);
    for (std::size_t oid : ids) {
      drop_expert(model, l, oid);
      plan.drops.push_back({round, l, oid});
    }
  }
}

inline CalibrationStats calibrate_for(const MoEModel& model, const CalibrationSet& calset,
                                      const CriterionId& id, const CalibrationSpec& spec) {
  const bool grads = id.name != kRandomCriterion && criterion_info(id.name).needs_gradients;
  return run_calibration(model, calset, grads, spec.sampling_seed, spec.reservoir_cap);
}

inline PruningPlan start_plan(const MoEModel& model, const std::string& strategy,
                              const CriterionId& id, double s, std::size_t rounds) {
  PruningPlan plan;
  plan.strategy = strategy;
  plan.criterion = id.name;
  plan.direction = id.direction;
  plan.target_sparsity = s;
  plan.rounds = rounds;
  plan.root_digest = model_digest(model);
  plan.n_layers = model.config.n_layers;
  plan.n_experts_initial = model.n_active(0);
  return plan;
}

}  // namespace detail

struct PruneResult {
  MoEModel model;
  PruningPlan plan;
  SubnetworkLineage lineage;
};

struct PruneOptions {
  ScoreOptions score;
  std::uint64_t random_seed = 0;  // only consulted for criterion "random"
};

// Score once on the given statistics, drop s*n experts per layer at once.
inline PruneResult one_shot(const MoEModel& model, const CriterionId& id, double s,
                            const CalibrationStats* stats,
                            const PruneOptions& opts = {}) {
  PruneResult res;
  res.model = model;
  const std::size_t m = detail::drops_per_layer_per_round(s, model.n_active(0), 1, model.config.top_k);
  res.plan = detail::start_plan(model, "oneshot", id, s, 1);
  res.plan.seeds.random = opts.random_seed;
  res.lineage.checkpoint_digests.push_back(res.plan.root_digest);
  if (id.name != kRandomCriterion) {
    res.lineage.score_digests.push_back(
        build_score_table(id, model, stats, opts.score).digest());
  } else {
    res.lineage.score_digests.emplace_back();
  }
  detail::execute_round(res.model, id, stats, m, opts.score, opts.random_seed, 1,
                        res.plan);
  res.lineage.checkpoint_digests.push_back(model_digest(res.model));
  return res;
}

// k rounds of {recalibrate on the current subnetwork → score → drop}. The
// same CalibrationSet (sequence windows) is reused; the forward passes and
// statistics are recomputed from scratch each round.
inline PruneResult iterative(const MoEModel& model, const Corpus& corpus,
                             const CriterionId& id, double s, std::size_t rounds,
                             const CalibrationSpec& calspec,
                             const PruneOptions& opts = {}) {
  PruneResult res;
  res.model = model;
  const std::size_t m = detail::drops_per_layer_per_round(s, model.n_active(0), rounds, model.config.top_k);
  res.plan = detail::start_plan(model, "iterative", id, s, rounds);
  res.plan.seeds = {calspec.seed, calspec.sampling_seed, opts.random_seed};
  res.lineage.checkpoint_digests.push_back(res.plan.root_digest);

  const bool needs_stats =
      id.name != kRandomCriterion && criterion_info(id.name).needs_stats;
  const std::size_t seq_len = calspec.seq_len ? calspec.seq_len : model.config.seq_len;
  CalibrationSet calset;
  if (needs_stats) {
    calset = build_calibration_set(corpus, calspec.n_sequences, seq_len, calspec.seed);
  }
  for (std::size_t round = 1; round <= rounds; ++round) {
    CalibrationStats stats;
    const CalibrationStats* sp = nullptr;
    if (needs_stats) {
      stats = detail::calibrate_for(res.model, calset, id, calspec);
      stats.model_digest = model_digest(res.model);
      sp = &stats;
    }
    if (id.name != kRandomCriterion) {
      res.lineage.score_digests.push_back(
          build_score_table(id, res.model, sp, opts.score).digest());
    } else {
      res.lineage.score_digests.emplace_back();
    }
    detail::execute_round(res.model, id, sp, m, opts.score, opts.random_seed, round,
                          res.plan);
    res.lineage.checkpoint_digests.push_back(model_digest(res.model));
  }
  return res;
}

// Estimate-prune-finetune: as iterative, with one budget-finetune round after
// each drop round. A zero base budget collapses to iterative exactly.
inline PruneResult lottery(const MoEModel& model, const Corpus& corpus,
                           const CriterionId& id, double s, std::size_t rounds,
                           const CalibrationSpec& calspec, const FinetuneSpec& ftspec,
                           const PruneOptions& opts = {}) {
  PruneResult res;
  res.model = model;
  const std::size_t m = detail::drops_per_layer_per_round(s, model.n_active(0), rounds, model.config.top_k);
  res.plan = detail::start_plan(model, "lottery", id, s, rounds);
  res.plan.seeds = {calspec.seed, calspec.sampling_seed, opts.random_seed};
  res.plan.finetune_schedule = "base=" + std::to_string(ftspec.base_budget) +
                               (ftspec.doubling ? ",doubling" : ",flat");
  res.lineage.checkpoint_digests.push_back(res.plan.root_digest);

  const bool needs_stats =
      id.name != kRandomCriterion && criterion_info(id.name).needs_stats;
  const std::size_t seq_len = calspec.seq_len ? calspec.seq_len : model.config.seq_len;
  CalibrationSet calset;
  if (needs_stats) {
    calset = build_calibration_set(corpus, calspec.n_sequences, seq_len, calspec.seed);
  }
  for (std::size_t round = 1; round <= rounds; ++round) {
    CalibrationStats stats;
    const CalibrationStats* sp = nullptr;
    if (needs_stats) {
      stats = detail::calibrate_for(res.model, calset, id, calspec);
      stats.model_digest = model_digest(res.model);
      sp = &stats;
    }
    if (id.name != kRandomCriterion) {
      res.lineage.score_digests.push_back(
          build_score_table(id, res.model, sp, opts.score).digest());
    } else {
      res.lineage.score_digests.emplace_back();
    }
    detail::execute_round(res.model, id, sp, m, opts.score, opts.random_seed, round,
                          res.plan);
    try {
      finetune_round(res.model, corpus, ftspec, round, nullptr);
    } catch (const NumericalError& err) {
      throw NumericalError("lottery: finetune diverged in round " +
                           std::to_string(round) + ": " + err.what());
    }
    res.lineage.checkpoint_digests.push_back(model_digest(res.model));
  }
  return res;
}

// Seeded uniform choice per layer in place of a criterion, keeping all other
// strategy machinery identical.
inline PruneResult random_baseline(const MoEModel& model, const Corpus& corpus,
                                   double s, const std::string& strategy,
                                   std::uint64_t seed, std::size_t rounds = 1,
                                   const FinetuneSpec* ftspec = nullptr) {
  const CriterionId id{kRandomCriterion, Direction::Min};
  PruneOptions opts;
  opts.random_seed = seed;
  CalibrationSpec calspec;  // unused by the random scorer
  if (strategy == "oneshot") return one_shot(model, id, s, nullptr, opts);
  if (strategy == "iterative") return iterative(model, corpus, id, s, rounds, calspec, opts);
  if (strategy == "lottery") {
    if (!ftspec) throw ValidationError("random_baseline: lottery requires a finetune spec");
    return lottery(model, corpus, id, s, rounds, calspec, *ftspec, opts);
  }
  throw ValidationError("random_baseline: unknown strategy '" + strategy +
                        "' (expected oneshot|iterative|lottery)");
}

// ---- plan comparison (three-way per-expert classification) ----

struct DivergenceCell {
  std::size_t layer;
  std::size_t original_id;
  enum class Kind { BothDrop, Disagree, BothRetain } kind;
};

struct DivergenceMap {
  std::vector<DivergenceCell> cells;  // layer-major, expert-minor
  double agreement = 0.0;             // fraction of cells where plans agree
};

inline DivergenceMap plan_divergence(const PruningPlan& a, const PruningPlan& b) {
  if (a.root_digest != b.root_digest) {
    throw ValidationError("plan_divergence: plans have different root checkpoints");
  }
  if (a.target_sparsity != b.target_sparsity) {
    throw ValidationError("plan_divergence: plans target different sparsities");
  }
  const auto da = a.dropped_per_layer();
  const auto db = b.dropped_per_layer();
  DivergenceMap map;
  std::size_t agree = 0, total = 0;
  for (std::size_t l = 0; l < a.n_layers; ++l) {
    for (std::size_t e = 0; e < a.n_experts_initial; ++e) {
      const bool in_a = da[l].count(e) > 0;
      const bool in_b = db[l].count(e) > 0;
      DivergenceCell::Kind kind;
      if (in_a && in_b) kind = DivergenceCell::Kind::BothDrop;
      else if (in_a != in_b) kind = DivergenceCell::Kind::Disagree;
      else kind = DivergenceCell::Kind::BothRetain;
      if (kind != DivergenceCell::Kind::Disagree) ++agree;
      ++total;
      map.cells.push_back({l, e, kind});
    }
  }
  map.agreement = static_cast<double>(agree) / static_cast<double>(total);
  return map;
}

}  // namespace moelab

#include <catch2/catch_amalgamated.hpp>

#include "moelab/pipeline.hpp"
#include "moelab/pruning.hpp"
#include "support.hpp"

using namespace moelab;

TEST_CASE("drop_expert removes the router column and keeps survivors bit-exact") {
  ModelConfig cfg = support::tiny_config(91);
  cfg.n_experts = 8;
  MoEModel m = init_model(cfg);
  const Matrix before = m.layers[0].router.w_gate;
  drop_expert(m, 0, 3);
  REQUIRE(m.layers[0].router.w_gate.cols == 7);
  REQUIRE(m.layers[0].experts.size() == 7);
  CHECK(m.layers[0].expert_ids == std::vector<std::size_t>{0, 1, 2, 4, 5, 6, 7});
  for (std::size_t i = 0; i < before.rows; ++i) {
    std::size_t c = 0;
    for (std::size_t j = 0; j < 8; ++j) {
      if (j == 3) continue;
      CHECK(m.layers[0].router.w_gate.at(i, c++) == before.at(i, j));
    }
  }
  // other layers untouched
  CHECK(m.layers[1].experts.size() == 8);
}

TEST_CASE("drop_expert rejects missing experts and top_k violations") {
  ModelConfig cfg = support::tiny_config(93);
  cfg.n_experts = 2;
  cfg.top_k = 2;
  MoEModel m = init_model(cfg);
  CHECK_THROWS_AS(drop_expert(m, 0, 0), ValidationError);  // would leave 1 < top_k
  cfg.top_k = 1;
  m = init_model(cfg);
  drop_expert(m, 0, 1);
  CHECK_THROWS_AS(drop_expert(m, 0, 1), ValidationError);  // already gone
}

TEST_CASE("drop order within a round commutes bit-exactly") {
  MoEModel a = support::tiny_model(97);
  MoEModel b = a;
  drop_expert(a, 1, 0);
  drop_expert(a, 1, 2);
  drop_expert(b, 1, 2);
  drop_expert(b, 1, 0);
  CHECK(model_digest(a) == model_digest(b));
}

TEST_CASE("survivor logits are preserved after a drop") {
  MoEModel m = support::tiny_model(101);
  auto toks = support::random_tokens(8, 81);
  ForwardResult before = forward(m, toks);
  MoEModel pruned = m;
  drop_expert(pruned, 0, 1);
  ForwardResult after = forward(pruned, toks);
  // layer-0 gate input is unchanged, so survivor router logits are identical;
  // verify via the softmax ratio structure: softmax values renormalize but
  // ratios between survivors persist.
  for (std::size_t i = 0; i < before.T; ++i) {
    const auto& g0 = before.layers[0].gating[i];
    const auto& g1 = after.layers[0].gating[i];
    // map original id -> softmax value
    auto val0 = [&](std::size_t id) { return g0.softmax_full[id]; };
    const std::vector<std::size_t>& ids = pruned.layers[0].expert_ids;
    for (std::size_t a = 1; a < ids.size(); ++a) {
      const double r_before = val0(ids[a]) / val0(ids[0]);
      const double r_after = g1.softmax_full[a] / g1.softmax_full[0];
      CHECK(r_after == Catch::Approx(r_before).epsilon(1e-9));
    }
  }
}

TEST_CASE("zero-usage drop keeps top-k selections of unaffected tokens") {
  // build a model where expert 0 of layer 0 is never selected by pushing its
  // router column to -inf-ish values
  MoEModel m = support::tiny_model(103);
  for (std::size_t i = 0; i < m.layers[0].router.w_gate.rows; ++i) {
    m.layers[0].router.w_gate.at(i, 0) = 0.0;
  }
  // bias: make column 0 strongly negative via a constant offset on the weights
  for (std::size_t i = 0; i < m.layers[0].router.w_gate.rows; ++i) {
    m.layers[0].router.w_gate.at(i, 0) = -5.0;
  }
  auto toks = support::random_tokens(10, 87);
  ForwardResult before = forward(m, toks);
  bool used = false;
  for (std::size_t i = 0; i < before.T; ++i)
    for (const auto& s : before.layers[0].sel[i]) used |= (s.slot == 0);
  if (!used) {
    MoEModel pruned = m;
    drop_expert(pruned, 0, 0);
    ForwardResult after = forward(pruned, toks);
    for (std::size_t i = 0; i < before.T; ++i) {
      std::vector<std::size_t> ids0 = before.layers[0].gating[i].selected_ids;
      std::vector<std::size_t> ids1 = after.layers[0].gating[i].selected_ids;
      CHECK(ids0 == ids1);
    }
  }
}

TEST_CASE("one_shot: sparsity 0 is identity, drop counts validated") {
  MoEModel m = support::tiny_model(107);
  PruneResult res = one_shot(m, CriterionId::resolve("EWN", ""), 0.0, nullptr);
  CHECK(model_digest(res.model) == model_digest(m));
  CHECK(res.plan.drops.empty());

  // non-integral per-layer count rejected (4 experts, s = 0.3 -> 1.2)
  CHECK_THROWS_WITH(one_shot(m, CriterionId::resolve("EWN", ""), 0.3, nullptr),
                    Catch::Matchers::ContainsSubstring("integral"));
}

TEST_CASE("one_shot drop set equals select_drop per layer") {
  MoEModel m = support::tiny_model(109);
  const CriterionId id = CriterionId::resolve("EWN", "min");
  PruneResult res = one_shot(m, id, 0.25, nullptr);  // 1 drop per layer
  auto dropped = res.plan.dropped_per_layer();
  for (std::size_t l = 0; l < m.config.n_layers; ++l) {
    Vector score = score_EWN(m, l);
    auto expect = select_drop(score, Direction::Min, {}, 1, m.config.top_k);
    REQUIRE(dropped[l].size() == 1);
    CHECK(*dropped[l].begin() == m.layers[l].expert_ids[expect[0]]);
  }
  // uniform per-layer count and surviving width
  for (const auto& layer : res.model.layers) CHECK(layer.experts.size() == 3);
}

TEST_CASE("k=1 iterative equals one-shot: canonical plan JSON byte equality") {
  MoEModel m = support::tiny_model(113);
  Corpus corpus = support::synth_corpus(40000, 21);
  CalibrationSpec calspec;
  calspec.n_sequences = 4;
  calspec.seq_len = 12;
  calspec.seed = 3;
  const CriterionId id = CriterionId::resolve("EUF", "min");

  CalibrationSet calset = build_calibration_set(corpus, 4, 12, 3);
  CalibrationStats stats = run_calibration(m, calset, false);
  stats.model_digest = model_digest(m);
  PruneOptions opts;
  PruneResult oneshot = one_shot(m, id, 0.5, &stats, opts);
  // give the one-shot plan the same recorded seeds as the iterative driver
  oneshot.plan.seeds = {calspec.seed, calspec.sampling_seed, 0};
  PruneResult iter = iterative(m, corpus, id, 0.5, 1, calspec, opts);
  CHECK(oneshot.plan.canonical_json().dump() == iter.plan.canonical_json().dump());
  CHECK(model_digest(oneshot.model) == model_digest(iter.model));
}

TEST_CASE("iterative re-estimates: per-round drops recorded with round index") {
  MoEModel m = support::tiny_model(127);
  Corpus corpus = support::synth_corpus(40000, 22);
  CalibrationSpec calspec;
  calspec.n_sequences = 3;
  calspec.seq_len = 10;
  PruneResult res =
      iterative(m, corpus, CriterionId::resolve("EAN", ""), 0.5, 2, calspec);
  CHECK(res.plan.rounds == 2);
  CHECK(res.plan.drops.size() == 2 * m.config.n_layers);
  std::size_t round1 = 0, round2 = 0;
  for (const auto& d : res.plan.drops) {
    if (d.round == 1) ++round1;
    if (d.round == 2) ++round2;
  }
  CHECK(round1 == m.config.n_layers);
  CHECK(round2 == m.config.n_layers);
  CHECK(res.lineage.checkpoint_digests.size() == 3);
  for (const auto& layer : res.model.layers) CHECK(layer.experts.size() == 2);
}

TEST_CASE("lottery with zero budget equals iterative exactly") {
  MoEModel m = support::tiny_model(131);
  Corpus corpus = support::synth_corpus(40000, 23);
  CalibrationSpec calspec;
  calspec.n_sequences = 3;
  calspec.seq_len = 10;
  FinetuneSpec ft;
  ft.base_budget = 0;
  const CriterionId id = CriterionId::resolve("EAN", "");
  PruneResult it = iterative(m, corpus, id, 0.5, 2, calspec);
  PruneResult lo = lottery(m, corpus, id, 0.5, 2, calspec, ft);
  CHECK(it.plan.canonical_json().dump() == lo.plan.canonical_json().dump());
  CHECK(model_digest(it.model) == model_digest(lo.model));
  CHECK(it.lineage.checkpoint_digests == lo.lineage.checkpoint_digests);
}

TEST_CASE("lottery lineage has k+1 checkpoints and distinct models with budget") {
  MoEModel m = support::tiny_model(137);
  Corpus corpus = support::synth_corpus(60000, 24);
  CalibrationSpec calspec;
  calspec.n_sequences = 3;
  calspec.seq_len = 10;
  FinetuneSpec ft;
  ft.base_budget = 256;
  ft.batch_size = 2;
  ft.doubling = true;
  PruneResult res =
      lottery(m, corpus, CriterionId::resolve("EWN", ""), 0.5, 2, calspec, ft);
  CHECK(res.lineage.checkpoint_digests.size() == 3);
  CHECK(res.lineage.checkpoint_digests[1] != res.lineage.checkpoint_digests[2]);
}

TEST_CASE("random baseline: s=0 identity, reproducible, uniform per layer") {
  MoEModel m = support::tiny_model(139);
  Corpus corpus = support::synth_corpus(40000, 25);
  PruneResult zero = random_baseline(m, corpus, 0.0, "oneshot", 7);
  CHECK(model_digest(zero.model) == model_digest(m));

  PruneResult a = random_baseline(m, corpus, 0.5, "oneshot", 7);
  PruneResult b = random_baseline(m, corpus, 0.5, "oneshot", 7);
  CHECK(a.plan.digest() == b.plan.digest());
  PruneResult c = random_baseline(m, corpus, 0.5, "oneshot", 8);
  CHECK(a.plan.digest() != c.plan.digest());

  auto dropped = a.plan.dropped_per_layer();
  for (const auto& layer : dropped) CHECK(layer.size() == 2);
  CHECK_THROWS_AS(random_baseline(m, corpus, 0.5, "nonsense", 7), ValidationError);
}

TEST_CASE("plan divergence classifications") {
  MoEModel m = support::tiny_model(149);
  Corpus corpus = support::synth_corpus(40000, 26);
  PruneResult a = random_baseline(m, corpus, 0.5, "oneshot", 1);
  PruneResult b = random_baseline(m, corpus, 0.5, "oneshot", 2);

  DivergenceMap self = plan_divergence(a.plan, a.plan);
  CHECK(self.agreement == 1.0);

  DivergenceMap ab = plan_divergence(a.plan, b.plan);
  // oracle: recompute agreement by set comparison
  auto da = a.plan.dropped_per_layer();
  auto db = b.plan.dropped_per_layer();
  std::size_t agree = 0, total = 0;
  for (std::size_t l = 0; l < a.plan.n_layers; ++l) {
    for (std::size_t e = 0; e < a.plan.n_experts_initial; ++e) {
      if ((da[l].count(e) > 0) == (db[l].count(e) > 0)) ++agree;
      ++total;
    }
  }
  CHECK(ab.agreement ==
        Catch::Approx(static_cast<double>(agree) / static_cast<double>(total)));

  // mismatched roots rejected
  MoEModel other = support::tiny_model(151);
  PruneResult o = random_baseline(other, corpus, 0.5, "oneshot", 1);
  CHECK_THROWS_AS(plan_divergence(a.plan, o.plan), ValidationError);
}

TEST_CASE("plan JSON round-trips through from_json") {
  MoEModel m = support::tiny_model(157);
  Corpus corpus = support::synth_corpus(40000, 27);
  PruneResult res = random_baseline(m, corpus, 0.5, "oneshot", 3);
  const nlohmann::json j = res.plan.to_json();
  PruningPlan back = PruningPlan::from_json(j);
  CHECK(back.canonical_json().dump() == res.plan.canonical_json().dump());
  CHECK(back.strategy == "oneshot");
}

#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "moelab/calibration.hpp"
#include "support.hpp"

using namespace moelab;

TEST_CASE("calibration set determinism, window count and disjointness") {
  Corpus corpus = support::synth_corpus(1 << 20, 3);  // 1 MiB
  CalibrationSet a = build_calibration_set(corpus, 64, 256, 9);
  CalibrationSet b = build_calibration_set(corpus, 64, 256, 9);
  CHECK(a.digest() == b.digest());
  CHECK(a.token_total() == 16384);  // 64 x 256 processed tokens
  REQUIRE(a.sequences.size() == 64);
  for (const auto& s : a.sequences) CHECK(s.size() == 257);

  // windows are slot-aligned draws without replacement, hence disjoint:
  // recover each window's slot by matching its bytes against the corpus
  std::set<std::vector<std::uint8_t>> uniq(a.sequences.begin(), a.sequences.end());
  CHECK(uniq.size() == 64);

  CalibrationSet c = build_calibration_set(corpus, 64, 256, 10);
  CHECK(a.digest() != c.digest());
}

TEST_CASE("calibration windows stay inside the training region") {
  Corpus corpus = support::synth_corpus(200000, 4);
  CalibrationSet cs = build_calibration_set(corpus, 32, 64, 1);
  // every window must equal corpus bytes at some slot-aligned offset < train_end
  for (const auto& seq : cs.sequences) {
    bool found = false;
    for (std::size_t slot = 0; slot * 65 + 65 <= corpus.train_end && !found; ++slot) {
      const std::size_t off = slot * 65;
      found = std::equal(seq.begin(), seq.end(), corpus.bytes.begin() + off);
    }
    CHECK(found);
  }
}

TEST_CASE("calibration rejects a too-small corpus with the required size") {
  Corpus tiny = corpus_from_bytes({'a'});
  CHECK_THROWS_WITH(build_calibration_set(tiny, 4, 8, 0),
                    Catch::Matchers::ContainsSubstring("36"));
}

TEST_CASE("usage conservation and collaboration recount oracle") {
  MoEModel m = support::tiny_model(29);
  Corpus corpus = support::synth_corpus(8000, 5);
  CalibrationSet cs = build_calibration_set(corpus, 3, 8, 2);
  CalibrationStats stats = run_calibration(m, cs, /*gradients=*/false);

  const std::int64_t t = stats.token_total;
  CHECK(t == 24);
  for (std::size_t l = 0; l < m.config.n_layers; ++l) {
    std::int64_t total = 0;
    for (auto u : stats.layers[l].usage) total += u;
    CHECK(total == t * static_cast<std::int64_t>(m.config.top_k));
  }

  // brute-force recount from an independent routing log
  const std::size_t n = m.config.n_experts;
  std::vector<CountMatrix> collab(m.config.n_layers);
  std::vector<std::vector<std::set<unsigned>>> ids(m.config.n_layers);
  for (std::size_t l = 0; l < m.config.n_layers; ++l) {
    collab[l] = CountMatrix(n, n);
    ids[l].resize(n);
  }
  for (std::size_t s = 0; s < cs.sequences.size(); ++s) {
    auto toks = cs.tokens(s);
    ForwardResult f = forward(m, toks);
    for (std::size_t l = 0; l < m.config.n_layers; ++l) {
      for (std::size_t i = 0; i < f.T; ++i) {
        std::vector<std::size_t> sel;
        for (const auto& e : f.layers[l].sel[i]) sel.push_back(e.slot);
        for (std::size_t a = 0; a < sel.size(); ++a) {
          collab[l].at(sel[a], sel[a]) += 1;
          ids[l][sel[a]].insert(toks[i]);
          for (std::size_t b = a + 1; b < sel.size(); ++b) {
            collab[l].at(sel[a], sel[b]) += 1;
            collab[l].at(sel[b], sel[a]) += 1;
          }
        }
      }
    }
  }
  for (std::size_t l = 0; l < m.config.n_layers; ++l) {
    CHECK(collaboration_pair_stats(stats, l).data == collab[l].data);
    // token-similarity vs brute-force set intersections
    CountMatrix ts = token_similarity_matrix(stats, l);
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = 0; q < n; ++q) {
        std::int64_t inter = 0;
        if (p == q) {
          inter = static_cast<std::int64_t>(ids[l][p].size());
        } else {
          for (unsigned v : ids[l][p]) inter += ids[l][q].count(v);
        }
        CHECK(ts.at(p, q) == inter);
      }
    }
    // symmetry and bound collab[p][q] <= min(usage)
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = 0; q < n; ++q) {
        CHECK(collab[l].at(p, q) == collab[l].at(q, p));
        if (p != q) {
          CHECK(collab[l].at(p, q) <=
                std::min(stats.layers[l].usage[p], stats.layers[l].usage[q]));
        }
      }
    }
  }
}

TEST_CASE("k=1 gives an all-zero off-diagonal collaboration matrix") {
  ModelConfig cfg = support::tiny_config(31);
  cfg.top_k = 1;
  MoEModel m = init_model(cfg);
  Corpus corpus = support::synth_corpus(8000, 6);
  CalibrationSet cs = build_calibration_set(corpus, 2, 8, 3);
  CalibrationStats stats = run_calibration(m, cs, false);
  const auto& c = collaboration_pair_stats(stats, 0);
  for (std::size_t p = 0; p < c.rows; ++p)
    for (std::size_t q = 0; q < c.cols; ++q)
      if (p != q) CHECK(c.at(p, q) == 0);
}

TEST_CASE("k=n: usage equals token total for every expert") {
  ModelConfig cfg = support::tiny_config(37);
  cfg.top_k = cfg.n_experts;
  MoEModel m = init_model(cfg);
  Corpus corpus = support::synth_corpus(8000, 7);
  CalibrationSet cs = build_calibration_set(corpus, 2, 10, 4);
  CalibrationStats stats = run_calibration(m, cs, false);
  for (const auto& layer : stats.layers)
    for (auto u : layer.usage) CHECK(u == stats.token_total);
}

TEST_CASE("calibration statistics are bit-deterministic including reservoirs") {
  MoEModel m = support::tiny_model(41);
  Corpus corpus = support::synth_corpus(20000, 8);
  CalibrationSet cs = build_calibration_set(corpus, 4, 16, 5);
  CalibrationStats a = run_calibration(m, cs, true, /*sampling_seed=*/3);
  CalibrationStats b = run_calibration(m, cs, true, /*sampling_seed=*/3);
  CHECK(a.digest() == b.digest());
  CalibrationStats c = run_calibration(m, cs, true, /*sampling_seed=*/4);
  CHECK(a.token_total == c.token_total);  // sampling seed never alters forward stats
  CHECK(a.layers[0].usage == c.layers[0].usage);
}

TEST_CASE("reservoir caps at M while running accumulators cover all tokens") {
  MoEModel m = support::tiny_model(43);
  Corpus corpus = support::synth_corpus(40000, 9);
  CalibrationSet cs = build_calibration_set(corpus, 8, 16, 6);
  const std::size_t cap = 5;
  CalibrationStats stats = run_calibration(m, cs, false, 0, cap);
  for (const auto& layer : stats.layers) {
    for (std::size_t e = 0; e < layer.usage.size(); ++e) {
      CHECK(layer.reservoir[e].size() <=
            std::min<std::size_t>(cap, static_cast<std::size_t>(layer.usage[e])));
      CHECK(layer.reservoir_seen[e] == layer.usage[e]);
      CHECK(layer.dump[e].size() == static_cast<std::size_t>(layer.usage[e]));
    }
  }
}

TEST_CASE("zero-usage experts have zero gradient sums") {
  // A layer where some expert may receive no tokens: use few tokens
  MoEModel m = support::tiny_model(47);
  Corpus corpus = support::synth_corpus(8000, 10);
  CalibrationSet cs = build_calibration_set(corpus, 1, 4, 7);
  CalibrationStats stats = run_calibration(m, cs, true);
  for (const auto& layer : stats.layers) {
    for (std::size_t e = 0; e < layer.usage.size(); ++e) {
      if (layer.usage[e] != 0) continue;
      for (double x : layer.grad_up_sum[e].data) CHECK(x == 0.0);
      for (double x : layer.grad_down_sum[e].data) CHECK(x == 0.0);
    }
  }
}

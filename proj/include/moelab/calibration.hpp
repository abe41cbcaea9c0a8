#pragma once

#include <cstdint>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "moelab/corpus.hpp"
#include "moelab/digest.hpp"
#include "moelab/errors.hpp"
#include "moelab/model.hpp"
#include "moelab/rng.hpp"

namespace moelab {

// Each stored sequence is seq_len + 1 byte-level token ids: the first seq_len
// entries are fed to the model, the shifted tail provides next-token targets.
// The processed token count is therefore n_sequences * seq_len.
struct CalibrationSet {
  std::vector<std::vector<std::uint8_t>> sequences;
  std::size_t seq_len = 0;
  std::string source_digest;
  std::uint64_t seed = 0;

  std::size_t token_total() const { return sequences.size() * seq_len; }

  std::vector<std::uint8_t> tokens(std::size_t s) const {
    return {sequences[s].begin(), sequences[s].begin() + static_cast<std::ptrdiff_t>(seq_len)};
  }
  std::vector<std::uint8_t> targets(std::size_t s) const {
    return {sequences[s].begin() + 1, sequences[s].end()};
  }

  std::string digest() const {
    Fnv64 h;
    h.update_str(source_digest);
    h.update_u64(seed);
    h.update_u64(seq_len);
    h.update_u64(sequences.size());
    for (const auto& s : sequences) h.update(s.data(), s.size());
    return h.hex();
  }
};

// Non-overlapping windows chosen by seeded draw without replacement from the
// training region of the corpus. Tokenization is byte identity.
inline CalibrationSet build_calibration_set(const Corpus& corpus, std::size_t n_sequences,
                                            std::size_t seq_len, std::uint64_t seed) {
  const std::size_t window = seq_len + 1;
  const std::size_t required = n_sequences * window;
  if (corpus.train_end < required) {
    throw ValidationError("calibration corpus too small: need at least " +
                          std::to_string(required) + " training-region bytes, have " +
                          std::to_string(corpus.train_end));
  }
  const std::size_t n_slots = corpus.train_end / window;
  std::vector<std::size_t> slots(n_slots);
  std::iota(slots.begin(), slots.end(), std::size_t{0});
  Rng rng(derive_seed(seed, /*tag=*/11));
  // partial Fisher-Yates: first n_sequences entries are a draw w/o replacement
  for (std::size_t i = 0; i < n_sequences; ++i) {
    const std::size_t j = i + rng.below(n_slots - i);
    std::swap(slots[i], slots[j]);
  }
  CalibrationSet cs;
  cs.seq_len = seq_len;
  cs.source_digest = corpus.digest;
  cs.seed = seed;
  cs.sequences.reserve(n_sequences);
  for (std::size_t i = 0; i < n_sequences; ++i) {
    const std::size_t start = slots[i] * window;
    cs.sequences.emplace_back(corpus.bytes.begin() + static_cast<std::ptrdiff_t>(start),
                              corpus.bytes.begin() + static_cast<std::ptrdiff_t>(start + window));
  }
  return cs;
}

struct LayerStats {
  std::vector<std::int64_t> usage;               // per retained expert
  CountMatrix collaboration;                     // diagonal = usage
  std::vector<std::set<unsigned>> routed_ids;    // unique vocab ids per expert
  std::vector<std::vector<Vector>> reservoir;    // sampled outputs, cap M
  std::vector<std::int64_t> reservoir_seen;
  std::vector<Vector> act_sum, act_sumsq;        // per expert, per output dim
  std::vector<std::vector<Vector>> dump;         // full outputs (exact EAO pass)
  std::vector<Matrix> grad_up_sum, grad_down_sum;
};

struct CalibrationStats {
  std::vector<LayerStats> layers;
  std::int64_t token_total = 0;
  bool has_gradients = false;
  std::size_t reservoir_cap = 0;
  std::uint64_t sampling_seed = 0;
  std::string model_digest;
  std::string calset_digest;

  std::string digest() const {
    Fnv64 h;
    h.update_u64(static_cast<std::uint64_t>(token_total));
    h.update_u64(has_gradients ? 1 : 0);
    h.update_u64(reservoir_cap);
    h.update_u64(sampling_seed);
    h.update_str(model_digest);
    h.update_str(calset_digest);
    for (const auto& ls : layers) {
      for (auto u : ls.usage) h.update_u64(static_cast<std::uint64_t>(u));
      for (auto c : ls.collaboration.data) h.update_u64(static_cast<std::uint64_t>(c));
      for (const auto& ids : ls.routed_ids) {
        h.update_u64(ids.size());
        for (unsigned id : ids) h.update_u64(id);
      }
      for (const auto& res : ls.reservoir) {
        h.update_u64(res.size());
        for (const auto& v : res)
          for (double x : v) h.update_double(x);
      }
      for (const auto& v : ls.act_sum)
        for (double x : v) h.update_double(x);
      for (const auto& v : ls.act_sumsq)
        for (double x : v) h.update_double(x);
      for (const auto& m : ls.grad_up_sum)
        for (double x : m.data) h.update_double(x);
      for (const auto& m : ls.grad_down_sum)
        for (double x : m.data) h.update_double(x);
    }
    return h.hex();
  }
};

inline constexpr std::size_t kDefaultReservoirCap = 1024;

// One forward (and optional backward) pass per sequence in fixed order.
// Reservoir sampling draws from a dedicated seeded stream per (layer, expert)
// so forward results are unaffected by the sampling choices.
inline CalibrationStats run_calibration(const MoEModel& model, const CalibrationSet& calset,
                                        bool collect_gradients,
                                        std::uint64_t sampling_seed = 0,
                                        std::size_t reservoir_cap = kDefaultReservoirCap,
                                        bool keep_dump = true) {
  const auto& cfg = model.config;
  if (calset.seq_len > cfg.seq_len) {
    throw ValidationError("run_calibration: calibration seq_len " +
                          std::to_string(calset.seq_len) + " exceeds model seq_len " +
                          std::to_string(cfg.seq_len));
  }
  CalibrationStats stats;
  stats.has_gradients = collect_gradients;
  stats.reservoir_cap = reservoir_cap;
  stats.sampling_seed = sampling_seed;
  stats.calset_digest = calset.digest();
  stats.layers.resize(cfg.n_layers);
  std::vector<std::vector<Rng>> res_rng(cfg.n_layers);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::size_t n = model.n_active(l);
    auto& ls = stats.layers[l];
    ls.usage.assign(n, 0);
    ls.collaboration = CountMatrix(n, n);
    ls.routed_ids.resize(n);
    ls.reservoir.resize(n);
    ls.reservoir_seen.assign(n, 0);
    ls.act_sum.assign(n, Vector(cfg.d_model, 0.0));
    ls.act_sumsq.assign(n, Vector(cfg.d_model, 0.0));
    if (keep_dump) ls.dump.resize(n);
    if (collect_gradients) {
      ls.grad_up_sum.assign(n, Matrix(cfg.d_model, cfg.d_hidden));
      ls.grad_down_sum.assign(n, Matrix(cfg.d_hidden, cfg.d_model));
    }
    res_rng[l].reserve(n);
    for (std::size_t e = 0; e < n; ++e) {
      res_rng[l].emplace_back(derive_seed(sampling_seed, (l << 20) | (e + 7)));
    }
  }

  GradientBundle grads = collect_gradients ? make_zero_grads(model) : GradientBundle{};

  for (std::size_t s = 0; s < calset.sequences.size(); ++s) {
    std::vector<std::uint8_t> toks, tgts;
    try {
      toks = calset.tokens(s);
      tgts = calset.targets(s);
      ForwardResult fwd = forward(model, toks);
      for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        auto& ls = stats.layers[l];
        const auto& tr = fwd.layers[l];
        for (std::size_t i = 0; i < fwd.T; ++i) {
          const auto& sel = tr.sel[i];
          for (std::size_t a = 0; a < sel.size(); ++a) {
            const std::size_t slot = sel[a].slot;
            ls.usage[slot] += 1;
            ls.routed_ids[slot].insert(toks[i]);
            const Vector& out = sel[a].out;
            for (std::size_t j = 0; j < cfg.d_model; ++j) {
              ls.act_sum[slot][j] += out[j];
              ls.act_sumsq[slot][j] += out[j] * out[j];
            }
            if (keep_dump) ls.dump[slot].push_back(out);
            // reservoir (algorithm R)
            auto& rng = res_rng[l][slot];
            const std::int64_t seen = ls.reservoir_seen[slot]++;
            if (static_cast<std::size_t>(seen) < reservoir_cap) {
              ls.reservoir[slot].push_back(out);
            } else {
              const std::uint64_t j = rng.below(static_cast<std::uint64_t>(seen) + 1);
              if (j < reservoir_cap) ls.reservoir[slot][j] = out;
            }
            for (std::size_t b = a + 1; b < sel.size(); ++b) {
              const std::size_t other = sel[b].slot;
              ls.collaboration.at(slot, other) += 1;
              ls.collaboration.at(other, slot) += 1;
            }
          }
        }
      }
      stats.token_total += static_cast<std::int64_t>(fwd.T);
      if (collect_gradients) {
        backward_into(model, toks, tgts, fwd, grads, GradReduction::Sum);
      }
    } catch (const ValidationError& err) {
      throw ValidationError("run_calibration: sequence " + std::to_string(s) + ": " +
                            err.what());
    }
  }

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    auto& ls = stats.layers[l];
    for (std::size_t e = 0; e < model.n_active(l); ++e) {
      ls.collaboration.at(e, e) = ls.usage[e];
      if (collect_gradients) {
        ls.grad_up_sum[e] = grads.layers[l].g_up[e];
        ls.grad_down_sum[e] = grads.layers[l].g_down[e];
      }
    }
  }
  return stats;
}

inline const CountMatrix& collaboration_pair_stats(const CalibrationStats& stats,
                                                   std::size_t layer) {
  if (layer >= stats.layers.size()) {
    throw ValidationError("collaboration_pair_stats: layer out of range");
  }
  return stats.layers[layer].collaboration;
}

// Entry (p, q): cardinality of the intersection of unique routed token-id sets.
inline CountMatrix token_similarity_matrix(const CalibrationStats& stats,
                                           std::size_t layer) {
  if (layer >= stats.layers.size()) {
    throw ValidationError("token_similarity_matrix: layer out of range");
  }
  const auto& ids = stats.layers[layer].routed_ids;
  const std::size_t n = ids.size();
  CountMatrix m(n, n);
  for (std::size_t p = 0; p < n; ++p) {
    m.at(p, p) = static_cast<std::int64_t>(ids[p].size());
    for (std::size_t q = p + 1; q < n; ++q) {
      std::int64_t count = 0;
      for (unsigned t : ids[p])
        if (ids[q].count(t)) ++count;
      m.at(p, q) = count;
      m.at(q, p) = count;
    }
  }
  return m;
}

}  // namespace moelab

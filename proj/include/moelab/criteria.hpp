#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "moelab/calibration.hpp"
#include "moelab/errors.hpp"
#include "moelab/linalg.hpp"
#include "moelab/model.hpp"

namespace moelab {

enum class Family { Weight, Inference, Activation, Gradient };
enum class Direction { Min, Max };

inline std::string to_string(Direction d) { return d == Direction::Min ? "min" : "max"; }
inline std::string to_string(Family f) {
  switch (f) {
    case Family::Weight: return "weight";
    case Family::Inference: return "inference";
    case Family::Activation: return "activation";
    default: return "gradient";
  }
}

inline Direction parse_direction(const std::string& s) {
  if (s == "min") return Direction::Min;
  if (s == "max") return Direction::Max;
  throw ValidationError("direction must be 'min' or 'max', got '" + s + "'");
}

struct CriterionInfo {
  const char* name;
  Family family;
  bool needs_stats;
  bool needs_gradients;
  bool pairwise;             // drop candidate comes from an extreme matrix pair
  Direction default_direction;
  bool direction_from_paper; // stated default vs artifact default
};

inline const std::vector<CriterionInfo>& criterion_registry() {
  static const std::vector<CriterionInfo> table = {
      {"EWS", Family::Weight, false, false, false, Direction::Max, false},
      {"RWN", Family::Weight, false, false, false, Direction::Max, true},
      {"WSR", Family::Weight, false, false, false, Direction::Min, false},
      {"EWN", Family::Weight, false, false, false, Direction::Min, false},
      {"EUF", Family::Inference, true, false, false, Direction::Min, false},
      {"ECC", Family::Inference, true, false, true, Direction::Max, false},
      {"EVTC", Family::Inference, true, false, false, Direction::Min, false},
      {"ETS", Family::Inference, true, false, true, Direction::Max, true},
      {"EAS", Family::Activation, true, false, false, Direction::Max, false},
      {"EAE", Family::Activation, true, false, false, Direction::Min, false},
      {"EAO", Family::Activation, true, false, false, Direction::Min, false},
      {"EAN", Family::Activation, true, false, false, Direction::Min, true},
      {"EGS", Family::Gradient, true, true, false, Direction::Max, false},
      {"EGE", Family::Gradient, true, true, false, Direction::Min, true},
      {"EGO", Family::Gradient, true, true, false, Direction::Min, false},
      {"EGN", Family::Gradient, true, true, false, Direction::Min, false},
  };
  return table;
}

inline const CriterionInfo& criterion_info(const std::string& name) {
  for (const auto& c : criterion_registry()) {
    if (name == c.name) return c;
  }
  std::ostringstream os;
  os << "unknown criterion '" << name << "'; valid names:";
  for (const auto& c : criterion_registry()) os << ' ' << c.name;
  throw ValidationError(os.str());
}

struct CriterionId {
  std::string name;
  Direction direction;

  static CriterionId resolve(const std::string& name, const std::string& direction) {
    const auto& info = criterion_info(name);
    if (direction.empty()) return {info.name, info.default_direction};
    return {info.name, parse_direction(direction)};
  }
};

struct ScoreOptions {
  enum class EaoMode { PerDimension, PerToken };
  EaoMode eao_mode = EaoMode::PerDimension;  // statistic orientation for EAO
};

// ---- weight-guided ----

inline Vector score_EWS(const MoEModel& model, std::size_t layer) {
  const auto& experts = model.layers[layer].experts;
  const std::size_t n = experts.size();
  std::vector<Vector> flat(n);
  for (std::size_t p = 0; p < n; ++p) flat[p] = flatten_expert(experts[p]);
  Vector score(n, 0.0);
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t q = 0; q < n; ++q) {
      if (q == p) continue;
      score[p] += cosine(flat[p], flat[q]);
    }
  }
  return score;
}

inline Vector score_RWN(const MoEModel& model, std::size_t layer) {
  const Matrix& wg = model.layers[layer].router.w_gate;
  Vector score(wg.cols, 0.0);
  for (std::size_t p = 0; p < wg.cols; ++p) {
    Vector col(wg.rows);
    for (std::size_t i = 0; i < wg.rows; ++i) col[i] = wg.at(i, p);
    score[p] = l2_norm(col);
  }
  return score;
}

inline Vector score_WSR(const MoEModel& model, std::size_t layer) {
  const auto& experts = model.layers[layer].experts;
  Vector score(experts.size(), 0.0);
  for (std::size_t p = 0; p < experts.size(); ++p) {
    const std::string id = "layer " + std::to_string(layer) + " expert slot " +
                           std::to_string(p);
    score[p] = stable_rank(experts[p].w_up, id + " w_up") +
               stable_rank(experts[p].w_down, id + " w_down");
  }
  return score;
}

inline Vector score_EWN(const MoEModel& model, std::size_t layer) {
  const auto& experts = model.layers[layer].experts;
  Vector score(experts.size(), 0.0);
  for (std::size_t p = 0; p < experts.size(); ++p) {
    score[p] = l2_norm(flatten_expert(experts[p]));
  }
  return score;
}

// ---- inference-guided ----

namespace detail {
inline const CalibrationStats& need_stats(const CalibrationStats* stats,
                                          const char* criterion) {
  if (!stats) {
    throw ValidationError(std::string(criterion) + ": calibration stats required");
  }
  return *stats;
}
inline void need_gradients(const CalibrationStats& stats, const char* criterion) {
  if (!stats.has_gradients) {
    throw ValidationError(std::string(criterion) +
                          ": stats were collected without gradients");
  }
}
}  // namespace detail

inline Vector score_EUF(const CalibrationStats& stats, std::size_t layer) {
  const auto& usage = stats.layers[layer].usage;
  Vector score(usage.size());
  const double t = static_cast<double>(stats.token_total);
  for (std::size_t p = 0; p < usage.size(); ++p)
    score[p] = static_cast<double>(usage[p]) / t;
  return score;
}

// Row sum of off-diagonal collaboration counts (reporting score; the drop
// candidate is resolved from the extreme pair).
inline Vector score_ECC(const CalibrationStats& stats, std::size_t layer) {
  const CountMatrix& m = collaboration_pair_stats(stats, layer);
  Vector score(m.rows, 0.0);
  for (std::size_t p = 0; p < m.rows; ++p)
    for (std::size_t q = 0; q < m.cols; ++q)
      if (q != p) score[p] += static_cast<double>(m.at(p, q));
  return score;
}

inline Vector score_EVTC(const CalibrationStats& stats, std::size_t layer,
                         std::size_t vocab_size) {
  const auto& ids = stats.layers[layer].routed_ids;
  Vector score(ids.size());
  for (std::size_t p = 0; p < ids.size(); ++p)
    score[p] = static_cast<double>(ids[p].size()) / static_cast<double>(vocab_size);
  return score;
}

inline Vector score_ETS(const CalibrationStats& stats, std::size_t layer) {
  const CountMatrix m = token_similarity_matrix(stats, layer);
  Vector score(m.rows, 0.0);
  for (std::size_t p = 0; p < m.rows; ++p)
    for (std::size_t q = 0; q < m.cols; ++q)
      if (q != p) score[p] += static_cast<double>(m.at(p, q));
  return score;
}

// ---- activation-guided ----

inline constexpr double kLogStdFloor = 1e-12;

// Mean pairwise cosine over the sampled activation sets (reservoir-capped);
// an empty set contributes 0 similarity.
inline Matrix activation_similarity_matrix(const CalibrationStats& stats,
                                           std::size_t layer) {
  const auto& res = stats.layers[layer].reservoir;
  const std::size_t n = res.size();
  Matrix sim(n, n);
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t q = p; q < n; ++q) {
      double acc = 0.0;
      const std::size_t np = res[p].size(), nq = res[q].size();
      if (np == 0 || nq == 0) {
        sim.at(p, q) = 0.0;
        sim.at(q, p) = 0.0;
        continue;
      }
      for (const auto& a : res[p])
        for (const auto& b : res[q]) acc += cosine(a, b);
      const double v = acc / static_cast<double>(np * nq);
      sim.at(p, q) = v;
      sim.at(q, p) = v;
    }
  }
  return sim;
}

inline Vector score_EAS(const CalibrationStats& stats, std::size_t layer) {
  const Matrix sim = activation_similarity_matrix(stats, layer);
  Vector score(sim.rows, 0.0);
  for (std::size_t p = 0; p < sim.rows; ++p)
    for (std::size_t q = 0; q < sim.cols; ++q)
      if (q != p) score[p] += sim.at(p, q);
  return score;
}

// Σ_j log(max(σ_j, floor)) over output dimensions, from the exact running
// accumulators covering all routed tokens.
inline Vector score_EAE(const CalibrationStats& stats, std::size_t layer) {
  const auto& ls = stats.layers[layer];
  const std::size_t n = ls.usage.size();
  Vector score(n, 0.0);
  for (std::size_t p = 0; p < n; ++p) {
    const double cnt = static_cast<double>(ls.usage[p]);
    const std::size_t d = ls.act_sum[p].size();
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      double sigma = 0.0;
      if (cnt > 0.0) {
        const double mean = ls.act_sum[p][j] / cnt;
        const double var = std::max(ls.act_sumsq[p][j] / cnt - mean * mean, 0.0);
        sigma = std::sqrt(var);
      }
      acc += std::log(std::max(sigma, kLogStdFloor));
    }
    score[p] = acc;
  }
  return score;
}

inline Vector score_EAO(const CalibrationStats& stats, std::size_t layer,
                        const ScoreOptions& opts = {}) {
  const auto& ls = stats.layers[layer];
  if (ls.dump.empty()) {
    throw ValidationError("EAO: activation dump not collected in these stats");
  }
  const std::size_t n = ls.usage.size();
  const double c = 3.0;
  Vector score(n, 0.0);
  for (std::size_t p = 0; p < n; ++p) {
    const auto& samples = ls.dump[p];
    if (samples.size() < 2) continue;
    std::size_t count = 0;
    if (opts.eao_mode == ScoreOptions::EaoMode::PerDimension) {
      const std::size_t d = samples[0].size();
      Vector series(samples.size());
      for (std::size_t j = 0; j < d; ++j) {
        for (std::size_t t = 0; t < samples.size(); ++t) series[t] = samples[t][j];
        count += outlier_count(series, c);
      }
    } else {
      for (const auto& s : samples) count += outlier_count(s, c);
    }
    score[p] = static_cast<double>(count);
  }
  return score;
}

// Σ_j ||dimension-j series||₂ over all routed tokens, exact via running
// per-dimension sums of squares.
inline Vector score_EAN(const CalibrationStats& stats, std::size_t layer) {
  const auto& ls = stats.layers[layer];
  Vector score(ls.usage.size(), 0.0);
  for (std::size_t p = 0; p < ls.usage.size(); ++p) {
    double acc = 0.0;
    for (double sq : ls.act_sumsq[p]) acc += std::sqrt(sq);
    score[p] = acc;
  }
  return score;
}

// ---- gradient-guided ----

inline Vector score_EGS(const CalibrationStats& stats, std::size_t layer) {
  detail::need_gradients(stats, "EGS");
  const auto& ls = stats.layers[layer];
  const std::size_t n = ls.grad_up_sum.size();
  std::vector<Vector> flat(n);
  for (std::size_t p = 0; p < n; ++p)
    flat[p] = flatten_concat(ls.grad_up_sum[p], ls.grad_down_sum[p]);
  Vector score(n, 0.0);
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t q = 0; q < n; ++q)
      if (q != p) score[p] += cosine(flat[p], flat[q]);
  return score;
}

// Hidden-dimension convention: g_up (d x dh) stacked over g_downᵀ (d x dh);
// σ_j is the population std of column j (one column per hidden unit).
inline Vector score_EGE(const CalibrationStats& stats, std::size_t layer) {
  detail::need_gradients(stats, "EGE");
  const auto& ls = stats.layers[layer];
  const std::size_t n = ls.grad_up_sum.size();
  Vector score(n, 0.0);
  for (std::size_t p = 0; p < n; ++p) {
    const Matrix& gu = ls.grad_up_sum[p];    // d x dh
    const Matrix& gd = ls.grad_down_sum[p];  // dh x d
    const std::size_t d = gu.rows, dh = gu.cols;
    double acc = 0.0;
    for (std::size_t j = 0; j < dh; ++j) {
      Vector col;
      col.reserve(2 * d);
      for (std::size_t i = 0; i < d; ++i) col.push_back(gu.at(i, j));
      for (std::size_t i = 0; i < d; ++i) col.push_back(gd.at(j, i));
      double mean = 0.0;
      for (double x : col) mean += x;
      mean /= static_cast<double>(col.size());
      double var = 0.0;
      for (double x : col) {
        const double dev = x - mean;
        var += dev * dev;
      }
      const double sigma = std::sqrt(var / static_cast<double>(col.size()));
      acc += std::log(std::max(sigma, kLogStdFloor));
    }
    score[p] = acc;
  }
  return score;
}

// Outliers of the flattened gradient entries around the global mean, c = 3.
inline Vector score_EGO(const CalibrationStats& stats, std::size_t layer) {
  detail::need_gradients(stats, "EGO");
  const auto& ls = stats.layers[layer];
  Vector score(ls.grad_up_sum.size(), 0.0);
  for (std::size_t p = 0; p < ls.grad_up_sum.size(); ++p) {
    Vector flat = flatten_concat(ls.grad_up_sum[p], ls.grad_down_sum[p]);
    score[p] = static_cast<double>(outlier_count(flat, 3.0));
  }
  return score;
}

inline Vector score_EGN(const CalibrationStats& stats, std::size_t layer) {
  detail::need_gradients(stats, "EGN");
  const auto& ls = stats.layers[layer];
  Vector score(ls.grad_up_sum.size(), 0.0);
  for (std::size_t p = 0; p < ls.grad_up_sum.size(); ++p) {
    score[p] = l2_norm(flatten_concat(ls.grad_up_sum[p], ls.grad_down_sum[p]));
  }
  return score;
}

// ---- dispatch ----

inline Vector score_layer(const std::string& name, const MoEModel& model,
                          const CalibrationStats* stats, std::size_t layer,
                          const ScoreOptions& opts = {}) {
  const auto& info = criterion_info(name);
  if (info.needs_stats) detail::need_stats(stats, info.name);
  if (name == "EWS") return score_EWS(model, layer);
  if (name == "RWN") return score_RWN(model, layer);
  if (name == "WSR") return score_WSR(model, layer);
  if (name == "EWN") return score_EWN(model, layer);
  if (name == "EUF") return score_EUF(*stats, layer);
  if (name == "ECC") return score_ECC(*stats, layer);
  if (name == "EVTC") return score_EVTC(*stats, layer, model.config.vocab_size);
  if (name == "ETS") return score_ETS(*stats, layer);
  if (name == "EAS") return score_EAS(*stats, layer);
  if (name == "EAE") return score_EAE(*stats, layer);
  if (name == "EAO") return score_EAO(*stats, layer, opts);
  if (name == "EAN") return score_EAN(*stats, layer);
  if (name == "EGS") return score_EGS(*stats, layer);
  if (name == "EGE") return score_EGE(*stats, layer);
  if (name == "EGO") return score_EGO(*stats, layer);
  if (name == "EGN") return score_EGN(*stats, layer);
  throw ValidationError("score_layer: unhandled criterion " + name);
}

struct ScoreTable {
  std::string criterion;
  Direction direction;
  std::vector<Vector> scores;                      // per layer, per retained slot
  std::vector<std::vector<std::size_t>> expert_ids;  // per layer
  std::string model_digest;
  std::string stats_digest;

  std::string digest() const {
    Fnv64 h;
    h.update_str(criterion);
    h.update_u64(direction == Direction::Min ? 0 : 1);
    for (const auto& layer : scores)
      for (double s : layer) h.update_double(s);
    return h.hex();
  }
};

inline ScoreTable build_score_table(const CriterionId& id, const MoEModel& model,
                                    const CalibrationStats* stats,
                                    const ScoreOptions& opts = {}) {
  ScoreTable t;
  t.criterion = id.name;
  t.direction = id.direction;
  if (stats) t.stats_digest = stats->digest();
  for (std::size_t l = 0; l < model.config.n_layers; ++l) {
    t.scores.push_back(score_layer(id.name, model, stats, l, opts));
    t.expert_ids.push_back(model.layers[l].expert_ids);
  }
  return t;
}

// ---- drop selection ----

// The m most-extreme slots per direction; ties break to the lower slot
// (retained slots stay in ascending original-id order, so this is the
// lowest-original-index rule).
inline std::vector<std::size_t> select_drop(const Vector& scores, Direction direction,
                                            const std::set<std::size_t>& exclude,
                                            std::size_t m, std::size_t top_k) {
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (!exclude.count(i)) candidates.push_back(i);
  if (m > candidates.size()) {
    throw ValidationError("select_drop: m=" + std::to_string(m) +
                          " exceeds selectable experts " + std::to_string(candidates.size()));
  }
  if (scores.size() - m < top_k) {
    throw ValidationError("select_drop: dropping " + std::to_string(m) +
                          " would leave fewer than top_k=" + std::to_string(top_k) +
                          " experts");
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [&](std::size_t a, std::size_t b) {
                     if (scores[a] != scores[b]) {
                       return direction == Direction::Min ? scores[a] < scores[b]
                                                          : scores[a] > scores[b];
                     }
                     return a < b;
                   });
  candidates.resize(m);
  return candidates;
}

// Pair-based selection for ECC / ETS: pick the extreme off-diagonal pair,
// drop the member with lower usage frequency (usage tie: lower slot), repeat.
// Pair ties resolve to the lexicographically smallest (p, q).
inline std::vector<std::size_t> select_drop_pairwise(
    const CountMatrix& matrix, const std::vector<std::int64_t>& usage,
    Direction direction, const std::set<std::size_t>& exclude, std::size_t m,
    std::size_t top_k) {
  const std::size_t n = matrix.rows;
  std::set<std::size_t> dead = exclude;
  if (n - m < top_k || m + exclude.size() > n) {
    throw ValidationError("select_drop_pairwise: invalid drop count");
  }
  std::vector<std::size_t> out;
  for (std::size_t round = 0; round < m; ++round) {
    bool found = false;
    std::size_t best_p = 0, best_q = 0;
    std::int64_t best_v = 0;
    for (std::size_t p = 0; p < n; ++p) {
      if (dead.count(p)) continue;
      for (std::size_t q = p + 1; q < n; ++q) {
        if (dead.count(q)) continue;
        const std::int64_t v = matrix.at(p, q);
        const bool better =
            !found || (direction == Direction::Max ? v > best_v : v < best_v);
        if (better) {
          found = true;
          best_p = p;
          best_q = q;
          best_v = v;
        }
      }
    }
    if (!found) {
      throw ValidationError("select_drop_pairwise: no selectable pair left");
    }
    std::size_t victim;
    if (usage[best_p] != usage[best_q]) {
      victim = usage[best_p] < usage[best_q] ? best_p : best_q;
    } else {
      victim = std::min(best_p, best_q);
    }
    dead.insert(victim);
    out.push_back(victim);
  }
  return out;
}

}  // namespace moelab

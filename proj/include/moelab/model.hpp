#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "moelab/errors.hpp"
#include "moelab/linalg.hpp"
#include "moelab/rng.hpp"

namespace moelab {

struct ModelConfig {
  std::size_t vocab_size = 256;  // byte-level
  std::size_t d_model = 64;
  std::size_t n_layers = 4;
  std::size_t n_experts = 8;
  std::size_t top_k = 2;
  std::size_t d_hidden = 128;
  std::size_t seq_len = 256;
  bool renormalize_topk = false;
  std::uint64_t seed = 0;

  void validate() const {
    if (vocab_size < 2) throw ValidationError("ModelConfig.vocab_size: must be >= 2");
    if (d_model < 1) throw ValidationError("ModelConfig.d_model: must be >= 1");
    if (n_layers < 1) throw ValidationError("ModelConfig.n_layers: must be >= 1");
    if (n_experts < 1) throw ValidationError("ModelConfig.n_experts: must be >= 1");
    if (top_k < 1 || top_k > n_experts)
      throw ValidationError("ModelConfig.top_k: must satisfy 1 <= top_k <= n_experts");
    if (d_hidden < 1) throw ValidationError("ModelConfig.d_hidden: must be >= 1");
    if (seq_len < 2) throw ValidationError("ModelConfig.seq_len: must be >= 2");
  }

  // Closed-form parameter count of the freshly initialized model (documented
  // in the README): tied output head, no biases.
  std::size_t param_count() const {
    const std::size_t per_layer = 4 * d_model * d_model        // wq wk wv wo
                                  + 2 * 2 * d_model            // two layer norms
                                  + d_model * n_experts        // router
                                  + n_experts * 2 * d_model * d_hidden;
    return vocab_size * d_model + seq_len * d_model + n_layers * per_layer +
           2 * d_model;
  }
};

struct Expert {
  Matrix w_up;    // d_model x d_hidden
  Matrix w_down;  // d_hidden x d_model
};

struct Router {
  Matrix w_gate;  // d_model x n_active
};

struct LayerNormParams {
  Vector gamma;
  Vector beta;
};

struct TransformerLayer {
  Matrix wq, wk, wv, wo;  // d_model x d_model each
  LayerNormParams ln1, ln2;
  Router router;
  std::vector<Expert> experts;           // retained experts, slot order
  std::vector<std::size_t> expert_ids;   // retained slot -> original expert index
};

struct MoEModel {
  ModelConfig config;
  Matrix tok_embed;  // vocab x d_model (tied output head)
  Matrix pos_embed;  // seq_len x d_model
  std::vector<TransformerLayer> layers;
  LayerNormParams ln_final;

  std::size_t n_active(std::size_t layer) const {
    return layers[layer].experts.size();
  }
};

inline constexpr double kLayerNormEps = 1e-5;

namespace detail {

inline Matrix init_matrix(Rng& rng, std::size_t rows, std::size_t cols,
                          std::size_t fan_in) {
  Matrix m(rows, cols);
  const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& x : m.data) x = scale * rng.normal();
  return m;
}

inline LayerNormParams init_ln(std::size_t d) {
  return LayerNormParams{Vector(d, 1.0), Vector(d, 0.0)};
}

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

inline double silu_grad(double x) {
  const double s = 1.0 / (1.0 + std::exp(-x));
  return s * (1.0 + x * (1.0 - s));
}

// In-place stable softmax.
inline void softmax_inplace(Vector& v) {
  double mx = v[0];
  for (double x : v) mx = std::max(mx, x);
  double sum = 0.0;
  for (auto& x : v) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (auto& x : v) x /= sum;
}

}  // namespace detail

// Deterministic initialization: a fixed draw order makes identical seeds
// produce bit-identical models.
inline MoEModel init_model(const ModelConfig& config) {
  config.validate();
  Rng rng(derive_seed(config.seed, /*tag=*/1));
  MoEModel m;
  m.config = config;
  const std::size_t d = config.d_model, dh = config.d_hidden;
  m.tok_embed = detail::init_matrix(rng, config.vocab_size, d, d);
  m.pos_embed = detail::init_matrix(rng, config.seq_len, d, d);
  m.layers.resize(config.n_layers);
  for (auto& layer : m.layers) {
    layer.wq = detail::init_matrix(rng, d, d, d);
    layer.wk = detail::init_matrix(rng, d, d, d);
    layer.wv = detail::init_matrix(rng, d, d, d);
    layer.wo = detail::init_matrix(rng, d, d, d);
    layer.ln1 = detail::init_ln(d);
    layer.ln2 = detail::init_ln(d);
    layer.router.w_gate = detail::init_matrix(rng, d, config.n_experts, d);
    layer.experts.resize(config.n_experts);
    for (auto& e : layer.experts) {
      e.w_up = detail::init_matrix(rng, d, dh, d);
      e.w_down = detail::init_matrix(rng, dh, d, dh);
    }
    layer.expert_ids.resize(config.n_experts);
    std::iota(layer.expert_ids.begin(), layer.expert_ids.end(), std::size_t{0});
  }
  m.ln_final = detail::init_ln(d);
  return m;
}

struct GatingOutput {
  std::vector<std::size_t> selected_slots;  // positions in the retained-slot order
  std::vector<std::size_t> selected_ids;    // original expert identities
  Vector affinities;                        // aligned with selected_*
  Vector softmax_full;                      // over all active slots
};

// Softmax over all active experts first, then top-k of the softmax values.
// Ties break toward the lower original expert index. Affinities are the raw
// softmax values unless `renormalize` rescales them to sum to 1.
inline GatingOutput gate_logits(const Vector& logits,
                                const std::vector<std::size_t>& expert_ids,
                                std::size_t k, bool renormalize) {
  const std::size_t n = logits.size();
  if (k > n) {
    throw ValidationError("gate: top_k " + std::to_string(k) +
                          " exceeds active expert count " + std::to_string(n));
  }
  GatingOutput out;
  out.softmax_full = logits;
  detail::softmax_inplace(out.softmax_full);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (out.softmax_full[a] != out.softmax_full[b])
      return out.softmax_full[a] > out.softmax_full[b];
    return expert_ids[a] < expert_ids[b];
  });
  out.selected_slots.assign(order.begin(), order.begin() + k);
  out.affinities.resize(k);
  out.selected_ids.resize(k);
  for (std::size_t i = 0; i < k; ++i) {
    out.affinities[i] = out.softmax_full[out.selected_slots[i]];
    out.selected_ids[i] = expert_ids[out.selected_slots[i]];
  }
  if (renormalize) {
    double s = 0.0;
    for (double a : out.affinities) s += a;
    for (auto& a : out.affinities) a /= s;
  }
  return out;
}

inline GatingOutput gate(const Router& router, const std::vector<std::size_t>& expert_ids,
                         const Vector& x, std::size_t k, bool renormalize = false) {
  Vector logits(router.w_gate.cols, 0.0);
  add_vec_mat(x.data(), router.w_gate, logits.data());
  return gate_logits(logits, expert_ids, k, renormalize);
}

// ---- forward pass with full trace ----

struct SelectedExpertTrace {
  std::size_t slot;
  Vector pre;  // w_up pre-activation (d_hidden)
  Vector act;  // silu(pre)
  Vector out;  // expert output (d_model), before affinity weighting
};

struct LayerTrace {
  std::vector<GatingOutput> gating;                     // per token
  std::vector<Vector> ln1_xhat, ln2_xhat;               // per token
  Vector ln1_inv_std, ln2_inv_std;                      // per token
  std::vector<Vector> h1, h2;                           // post-LN inputs
  std::vector<Vector> q, k, v, ctx;                     // attention caches
  std::vector<Vector> attn;                             // row i: probs over j<=i
  std::vector<std::vector<SelectedExpertTrace>> sel;    // per token
  std::vector<Vector> moe_mixed;                        // y_i
};

struct ForwardResult {
  std::size_t T = 0;
  Matrix logits;  // T x vocab
  std::vector<LayerTrace> layers;
  std::vector<Vector> final_xhat;
  Vector final_inv_std;
  std::vector<Vector> final_h;  // post final layer norm
};

namespace detail {

// Returns the normalized output; records xhat and 1/std for backward.
inline Vector layer_norm_fwd(const Vector& x, const LayerNormParams& p,
                             Vector& xhat_out, double& inv_std_out) {
  const std::size_t d = x.size();
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(d);
  double var = 0.0;
  for (double v : x) {
    const double c = v - mean;
    var += c * c;
  }
  var /= static_cast<double>(d);
  const double inv_std = 1.0 / std::sqrt(var + kLayerNormEps);
  xhat_out.resize(d);
  Vector y(d);
  for (std::size_t j = 0; j < d; ++j) {
    xhat_out[j] = (x[j] - mean) * inv_std;
    y[j] = p.gamma[j] * xhat_out[j] + p.beta[j];
  }
  inv_std_out = inv_std;
  return y;
}

// dL/dx for layer norm given dL/dy; accumulates parameter grads.
inline Vector layer_norm_bwd(const Vector& dy, const Vector& xhat, double inv_std,
                             const LayerNormParams& p, Vector& dgamma, Vector& dbeta) {
  const std::size_t d = dy.size();
  Vector dxhat(d);
  double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    dgamma[j] += dy[j] * xhat[j];
    dbeta[j] += dy[j];
    dxhat[j] = dy[j] * p.gamma[j];
    sum_dxhat += dxhat[j];
    sum_dxhat_xhat += dxhat[j] * xhat[j];
  }
  const double inv_d = 1.0 / static_cast<double>(d);
  Vector dx(d);
  for (std::size_t j = 0; j < d; ++j) {
    dx[j] = inv_std * (dxhat[j] - inv_d * sum_dxhat - xhat[j] * inv_d * sum_dxhat_xhat);
  }
  return dx;
}

}  // namespace detail

inline ForwardResult forward(const MoEModel& model,
                             const std::vector<std::uint8_t>& tokens) {
  const auto& cfg = model.config;
  const std::size_t T = tokens.size();
  const std::size_t d = cfg.d_model;
  if (T == 0 || T > cfg.seq_len) {
    throw ValidationError("forward: sequence length " + std::to_string(T) +
                          " out of range [1, " + std::to_string(cfg.seq_len) + "]");
  }
  for (std::size_t i = 0; i < T; ++i) {
    if (tokens[i] >= cfg.vocab_size) {
      throw ValidationError("forward: token id " + std::to_string(tokens[i]) +
                            " out of range at position " + std::to_string(i));
    }
  }

  ForwardResult res;
  res.T = T;
  res.layers.resize(cfg.n_layers);

  std::vector<Vector> x(T);
  for (std::size_t i = 0; i < T; ++i) {
    x[i].resize(d);
    const double* te = model.tok_embed.row(tokens[i]);
    const double* pe = model.pos_embed.row(i);
    for (std::size_t j = 0; j < d; ++j) x[i][j] = te[j] + pe[j];
  }

  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(d));

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& layer = model.layers[l];
    auto& tr = res.layers[l];
    tr.ln1_xhat.resize(T);
    tr.ln2_xhat.resize(T);
    tr.ln1_inv_std.resize(T);
    tr.ln2_inv_std.resize(T);
    tr.h1.resize(T);
    tr.h2.resize(T);
    tr.q.resize(T);
    tr.k.resize(T);
    tr.v.resize(T);
    tr.ctx.resize(T);
    tr.attn.resize(T);
    tr.gating.resize(T);
    tr.sel.resize(T);
    tr.moe_mixed.resize(T);

    // attention block (pre-norm, single head, causal)
    for (std::size_t i = 0; i < T; ++i) {
      tr.h1[i] = detail::layer_norm_fwd(x[i], layer.ln1, tr.ln1_xhat[i],
                                        tr.ln1_inv_std[i]);
      tr.q[i].assign(d, 0.0);
      tr.k[i].assign(d, 0.0);
      tr.v[i].assign(d, 0.0);
      add_vec_mat(tr.h1[i].data(), layer.wq, tr.q[i].data());
      add_vec_mat(tr.h1[i].data(), layer.wk, tr.k[i].data());
      add_vec_mat(tr.h1[i].data(), layer.wv, tr.v[i].data());
    }
    for (std::size_t i = 0; i < T; ++i) {
      Vector scores(i + 1);
      for (std::size_t j = 0; j <= i; ++j) {
        scores[j] = attn_scale * dot(tr.q[i], tr.k[j]);
      }
      detail::softmax_inplace(scores);
      tr.attn[i] = scores;
      tr.ctx[i].assign(d, 0.0);
      for (std::size_t j = 0; j <= i; ++j) {
        const double p = scores[j];
        const double* vj = tr.v[j].data();
        for (std::size_t c = 0; c < d; ++c) tr.ctx[i][c] += p * vj[c];
      }
      Vector attn_out(d, 0.0);
      add_vec_mat(tr.ctx[i].data(), layer.wo, attn_out.data());
      for (std::size_t c = 0; c < d; ++c) x[i][c] += attn_out[c];
    }

    // MoE block
    for (std::size_t i = 0; i < T; ++i) {
      tr.h2[i] = detail::layer_norm_fwd(x[i], layer.ln2, tr.ln2_xhat[i],
                                        tr.ln2_inv_std[i]);
      tr.gating[i] = gate(layer.router, layer.expert_ids, tr.h2[i], cfg.top_k,
                          cfg.renormalize_topk);
      const auto& g = tr.gating[i];
      tr.moe_mixed[i].assign(d, 0.0);
      tr.sel[i].reserve(cfg.top_k);
      for (std::size_t s = 0; s < g.selected_slots.size(); ++s) {
        const std::size_t slot = g.selected_slots[s];
        const auto& exp = layer.experts[slot];
        SelectedExpertTrace et;
        et.slot = slot;
        et.pre.assign(cfg.d_hidden, 0.0);
        add_vec_mat(tr.h2[i].data(), exp.w_up, et.pre.data());
        et.act.resize(cfg.d_hidden);
        for (std::size_t c = 0; c < cfg.d_hidden; ++c)
          et.act[c] = detail::silu(et.pre[c]);
        et.out.assign(d, 0.0);
        add_vec_mat(et.act.data(), exp.w_down, et.out.data());
        const double aff = g.affinities[s];
        for (std::size_t c = 0; c < d; ++c) tr.moe_mixed[i][c] += aff * et.out[c];
        tr.sel[i].push_back(std::move(et));
      }
      for (std::size_t c = 0; c < d; ++c) x[i][c] += tr.moe_mixed[i][c];
    }
  }

  // final norm + tied output head
  res.final_xhat.resize(T);
  res.final_inv_std.resize(T);
  res.final_h.resize(T);
  res.logits = Matrix(T, cfg.vocab_size);
  for (std::size_t i = 0; i < T; ++i) {
    res.final_h[i] = detail::layer_norm_fwd(x[i], model.ln_final, res.final_xhat[i],
                                            res.final_inv_std[i]);
  }
  // logits[i][v] = final_h[i] . tok_embed[v]
  for (std::size_t i = 0; i < T; ++i) {
    const double* f = res.final_h[i].data();
    for (std::size_t vtok = 0; vtok < cfg.vocab_size; ++vtok) {
      const double* e = model.tok_embed.row(vtok);
      double acc = 0.0;
      for (std::size_t c = 0; c < d; ++c) acc += f[c] * e[c];
      res.logits.at(i, vtok) = acc;
    }
  }
  return res;
}

// Mean token-level cross-entropy with a numerically stable log-softmax.
inline double loss(const Matrix& logits, const std::vector<std::uint8_t>& targets) {
  if (logits.rows != targets.size()) {
    throw ValidationError("loss: logits rows " + std::to_string(logits.rows) +
                          " vs targets " + std::to_string(targets.size()));
  }
  double total = 0.0;
  for (std::size_t i = 0; i < logits.rows; ++i) {
    const double* row = logits.row(i);
    double mx = row[0];
    for (std::size_t v = 0; v < logits.cols; ++v) mx = std::max(mx, row[v]);
    double lse = 0.0;
    for (std::size_t v = 0; v < logits.cols; ++v) lse += std::exp(row[v] - mx);
    lse = mx + std::log(lse);
    total += lse - row[targets[i]];
  }
  return total / static_cast<double>(logits.rows);
}

enum class GradReduction { Sum, Mean };

struct LayerGrads {
  Matrix wq, wk, wv, wo;
  Vector ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
  Matrix w_gate;
  std::vector<Matrix> g_up, g_down;  // per retained expert
};

struct GradientBundle {
  Matrix tok_embed, pos_embed;
  std::vector<LayerGrads> layers;
  Vector lnf_gamma, lnf_beta;
};

inline GradientBundle make_zero_grads(const MoEModel& model) {
  GradientBundle g;
  g.tok_embed = Matrix(model.tok_embed.rows, model.tok_embed.cols);
  g.pos_embed = Matrix(model.pos_embed.rows, model.pos_embed.cols);
  g.lnf_gamma.assign(model.config.d_model, 0.0);
  g.lnf_beta.assign(model.config.d_model, 0.0);
  g.layers.resize(model.layers.size());
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& layer = model.layers[l];
    auto& lg = g.layers[l];
    const std::size_t d = model.config.d_model;
    lg.wq = Matrix(d, d);
    lg.wk = Matrix(d, d);
    lg.wv = Matrix(d, d);
    lg.wo = Matrix(d, d);
    lg.ln1_gamma.assign(d, 0.0);
    lg.ln1_beta.assign(d, 0.0);
    lg.ln2_gamma.assign(d, 0.0);
    lg.ln2_beta.assign(d, 0.0);
    lg.w_gate = Matrix(layer.router.w_gate.rows, layer.router.w_gate.cols);
    lg.g_up.resize(layer.experts.size());
    lg.g_down.resize(layer.experts.size());
    for (std::size_t e = 0; e < layer.experts.size(); ++e) {
      lg.g_up[e] = Matrix(layer.experts[e].w_up.rows, layer.experts[e].w_up.cols);
      lg.g_down[e] = Matrix(layer.experts[e].w_down.rows, layer.experts[e].w_down.cols);
    }
  }
  return g;
}

// Exact reverse-mode gradients of the cross-entropy, accumulated into `grads`.
// Sum reduction differentiates the summed per-token loss; Mean divides by T.
inline void backward_into(const MoEModel& model, const std::vector<std::uint8_t>& tokens,
                          const std::vector<std::uint8_t>& targets,
                          const ForwardResult& fwd, GradientBundle& grads,
                          GradReduction reduction = GradReduction::Sum) {
  const auto& cfg = model.config;
  const std::size_t T = fwd.T;
  const std::size_t d = cfg.d_model;
  if (targets.size() != T) {
    throw ValidationError("backward: targets size mismatch");
  }
  const double scale = reduction == GradReduction::Mean
                           ? 1.0 / static_cast<double>(T)
                           : 1.0;

  // d(loss)/d(final_h) and tied-embedding contribution from the output head
  std::vector<Vector> dx(T, Vector(d, 0.0));
  for (std::size_t i = 0; i < T; ++i) {
    Vector dlogits(cfg.vocab_size);
    const double* row = fwd.logits.row(i);
    double mx = row[0];
    for (std::size_t v = 0; v < cfg.vocab_size; ++v) mx = std::max(mx, row[v]);
    double sum = 0.0;
    for (std::size_t v = 0; v < cfg.vocab_size; ++v) {
      dlogits[v] = std::exp(row[v] - mx);
      sum += dlogits[v];
    }
    for (std::size_t v = 0; v < cfg.vocab_size; ++v) dlogits[v] /= sum;
    dlogits[targets[i]] -= 1.0;
    for (auto& gval : dlogits) gval *= scale;

    Vector dfh(d, 0.0);
    // dfh = Σ_v dlogits[v] * tok_embed[v]; dE[v] += dlogits[v] * final_h[i]
    add_vec_mat(dlogits.data(), model.tok_embed, dfh.data());
    for (std::size_t v = 0; v < cfg.vocab_size; ++v) {
      const double gl = dlogits[v];
      if (gl == 0.0) continue;
      double* er = grads.tok_embed.row(v);
      const double* f = fwd.final_h[i].data();
      for (std::size_t c = 0; c < d; ++c) er[c] += gl * f[c];
    }
    dx[i] = detail::layer_norm_bwd(dfh, fwd.final_xhat[i], fwd.final_inv_std[i],
                                   model.ln_final, grads.lnf_gamma, grads.lnf_beta);
  }

  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(d));

  for (std::size_t li = model.layers.size(); li-- > 0;) {
    const auto& layer = model.layers[li];
    const auto& tr = fwd.layers[li];
    auto& lg = grads.layers[li];

    // ---- MoE block backward ----
    for (std::size_t i = 0; i < T; ++i) {
      const auto& g = tr.gating[i];
      const Vector& dy = dx[i];  // gradient wrt layer output; residual passthrough kept in dx
      Vector dh2(d, 0.0);
      const std::size_t ksel = g.selected_slots.size();
      Vector daff(ksel, 0.0);
      for (std::size_t s = 0; s < ksel; ++s) {
        const auto& et = tr.sel[i][s];
        const auto& exp = layer.experts[et.slot];
        const double aff = g.affinities[s];
        // d out
        Vector dout(d);
        for (std::size_t c = 0; c < d; ++c) dout[c] = aff * dy[c];
        daff[s] = dot(et.out, dy);
        // expert weights
        add_outer(et.act.data(), dout.data(), lg.g_down[et.slot]);
        Vector dact(cfg.d_hidden, 0.0);
        add_mat_vec(exp.w_down, dout.data(), dact.data());
        Vector dpre(cfg.d_hidden);
        for (std::size_t c = 0; c < cfg.d_hidden; ++c)
          dpre[c] = dact[c] * detail::silu_grad(et.pre[c]);
        add_outer(tr.h2[i].data(), dpre.data(), lg.g_up[et.slot]);
        add_mat_vec(exp.w_up, dpre.data(), dh2.data());
      }
      // affinity -> softmax gradient (top-k selection treated as constant set)
      const std::size_t n_act = g.softmax_full.size();
      Vector dsoft(n_act, 0.0);
      if (cfg.renormalize_topk) {
        double ssum = 0.0;
        for (std::size_t s = 0; s < ksel; ++s) ssum += g.softmax_full[g.selected_slots[s]];
        double inner = 0.0;
        for (std::size_t s = 0; s < ksel; ++s) inner += daff[s] * g.affinities[s];
        for (std::size_t s = 0; s < ksel; ++s)
          dsoft[g.selected_slots[s]] = (daff[s] - inner) / ssum;
      } else {
        for (std::size_t s = 0; s < ksel; ++s) dsoft[g.selected_slots[s]] = daff[s];
      }
      // softmax backward to router logits
      double gdot = 0.0;
      for (std::size_t m = 0; m < n_act; ++m) gdot += g.softmax_full[m] * dsoft[m];
      Vector dlogit(n_act);
      for (std::size_t m = 0; m < n_act; ++m)
        dlogit[m] = g.softmax_full[m] * (dsoft[m] - gdot);
      add_outer(tr.h2[i].data(), dlogit.data(), lg.w_gate);
      add_mat_vec(layer.router.w_gate, dlogit.data(), dh2.data());

      Vector dxmid = detail::layer_norm_bwd(dh2, tr.ln2_xhat[i], tr.ln2_inv_std[i],
                                            layer.ln2, lg.ln2_gamma, lg.ln2_beta);
      for (std::size_t c = 0; c < d; ++c) dx[i][c] += dxmid[c];
    }

    // ---- attention block backward ----
    std::vector<Vector> dq(T, Vector(d, 0.0)), dk(T, Vector(d, 0.0)),
        dv(T, Vector(d, 0.0));
    for (std::size_t i = 0; i < T; ++i) {
      // x_mid = x_in + ctx·Wo ; dx[i] currently holds d(x_mid)
      add_outer(tr.ctx[i].data(), dx[i].data(), lg.wo);
      Vector dctx(d, 0.0);
      add_mat_vec(layer.wo, dx[i].data(), dctx.data());

      const std::size_t span = i + 1;
      Vector dp(span);
      for (std::size_t j = 0; j < span; ++j) dp[j] = dot(dctx, tr.v[j]);
      double pdot = 0.0;
      for (std::size_t j = 0; j < span; ++j) pdot += tr.attn[i][j] * dp[j];
      for (std::size_t j = 0; j < span; ++j) {
        const double ds = tr.attn[i][j] * (dp[j] - pdot);
        const double p = tr.attn[i][j];
        const double* vj = tr.v[j].data();
        const double* kj = tr.k[j].data();
        const double* qi = tr.q[i].data();
        for (std::size_t c = 0; c < d; ++c) {
          dv[j][c] += p * dctx[c];
          dq[i][c] += ds * attn_scale * kj[c];
          dk[j][c] += ds * attn_scale * qi[c];
        }
      }
    }
    for (std::size_t i = 0; i < T; ++i) {
      Vector dh1(d, 0.0);
      add_outer(tr.h1[i].data(), dq[i].data(), lg.wq);
      add_mat_vec(layer.wq, dq[i].data(), dh1.data());
      add_outer(tr.h1[i].data(), dk[i].data(), lg.wk);
      add_mat_vec(layer.wk, dk[i].data(), dh1.data());
      add_outer(tr.h1[i].data(), dv[i].data(), lg.wv);
      add_mat_vec(layer.wv, dv[i].data(), dh1.data());
      Vector dxin = detail::layer_norm_bwd(dh1, tr.ln1_xhat[i], tr.ln1_inv_std[i],
                                           layer.ln1, lg.ln1_gamma, lg.ln1_beta);
      for (std::size_t c = 0; c < d; ++c) dx[i][c] += dxin[c];
    }
  }

  // embeddings
  for (std::size_t i = 0; i < T; ++i) {
    double* te = grads.tok_embed.row(tokens[i]);
    double* pe = grads.pos_embed.row(i);
    for (std::size_t c = 0; c < d; ++c) {
      te[c] += dx[i][c];
      pe[c] += dx[i][c];
    }
  }
}

inline GradientBundle backward(const MoEModel& model,
                               const std::vector<std::uint8_t>& tokens,
                               const std::vector<std::uint8_t>& targets,
                               GradReduction reduction = GradReduction::Sum) {
  ForwardResult fwd = forward(model, tokens);
  GradientBundle grads = make_zero_grads(model);
  backward_into(model, tokens, targets, fwd, grads, reduction);
  return grads;
}

// flatten(W_Ep): row-major w_up then w_down.
inline Vector flatten_expert(const Expert& e) {
  return flatten_concat(e.w_up, e.w_down);
}

}  // namespace moelab

#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "moelab/calibration.hpp"
#include "moelab/corpus.hpp"
#include "moelab/errors.hpp"
#include "moelab/eval.hpp"
#include "moelab/model.hpp"
#include "moelab/rng.hpp"

namespace moelab {

struct FinetuneSpec {
  std::int64_t base_budget = 50000;  // tokens for round 1
  bool doubling = true;
  double max_lr = 1e-3;
  double weight_decay = 0.01;
  std::size_t batch_size = 8;
  enum class Scope { AllParameters, RouterOnly } scope = Scope::AllParameters;
  std::uint64_t seed = 0;
  bool allow_reuse = false;  // recycle corpus windows when the budget outruns them

  void validate() const {
    if (base_budget < 0) throw ValidationError("FinetuneSpec.base_budget: must be >= 0");
    if (max_lr <= 0.0) throw ValidationError("FinetuneSpec.max_lr: must be > 0");
    if (batch_size < 1) throw ValidationError("FinetuneSpec.batch_size: must be >= 1");
  }

  std::int64_t budget_for_round(std::size_t round_index) const {
    if (!doubling || round_index <= 1) return base_budget;
    return base_budget << (round_index - 1);
  }
};

struct LossPoint {
  std::int64_t step;
  std::int64_t tokens;
  double loss;
  double lr;
};

struct FinetuneReport {
  std::int64_t tokens_consumed = 0;
  double loss_initial = 0.0;
  double loss_final = 0.0;
  double ppl_initial = 0.0;
  double ppl_final = 0.0;
  std::vector<double> cv_before, cv_after;  // per layer expert-load CV
  bool reused_data = false;
  std::vector<LossPoint> curve;
};

struct LoadDistribution {
  std::vector<std::vector<std::int64_t>> loads;  // per layer, per retained expert
  std::vector<double> cv;                        // population std / mean
};

// load[e] = calibration tokens routed to e; CV over retained experts.
inline LoadDistribution load_distribution(const MoEModel& model,
                                          const CalibrationSet& calset) {
  LoadDistribution out;
  out.loads.assign(model.config.n_layers, {});
  for (std::size_t l = 0; l < model.config.n_layers; ++l)
    out.loads[l].assign(model.n_active(l), 0);
  for (std::size_t s = 0; s < calset.sequences.size(); ++s) {
    ForwardResult fwd = forward(model, calset.tokens(s));
    for (std::size_t l = 0; l < model.config.n_layers; ++l) {
      for (std::size_t i = 0; i < fwd.T; ++i) {
        for (const auto& sel : fwd.layers[l].sel[i]) out.loads[l][sel.slot] += 1;
      }
    }
  }
  out.cv.resize(model.config.n_layers);
  for (std::size_t l = 0; l < model.config.n_layers; ++l) {
    const auto& v = out.loads[l];
    double mean = 0.0;
    for (auto x : v) mean += static_cast<double>(x);
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (auto x : v) {
      const double d = static_cast<double>(x) - mean;
      var += d * d;
    }
    const double sd = std::sqrt(var / static_cast<double>(v.size()));
    out.cv[l] = mean > 0.0 ? sd / mean : 0.0;
  }
  return out;
}

namespace detail {

struct ParamRef {
  double* w;
  double* g;
  std::size_t n;
  bool router;
};

inline std::vector<ParamRef> param_refs(MoEModel& m, GradientBundle& g) {
  std::vector<ParamRef> refs;
  auto add = [&](Vector& w, Vector& gr, bool router = false) {
    refs.push_back({w.data(), gr.data(), w.size(), router});
  };
  auto addm = [&](Matrix& w, Matrix& gr, bool router = false) {
    refs.push_back({w.data.data(), gr.data.data(), w.data.size(), router});
  };
  addm(m.tok_embed, g.tok_embed);
  addm(m.pos_embed, g.pos_embed);
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    auto& layer = m.layers[l];
    auto& lg = g.layers[l];
    addm(layer.wq, lg.wq);
    addm(layer.wk, lg.wk);
    addm(layer.wv, lg.wv);
    addm(layer.wo, lg.wo);
    add(layer.ln1.gamma, lg.ln1_gamma);
    add(layer.ln1.beta, lg.ln1_beta);
    add(layer.ln2.gamma, lg.ln2_gamma);
    add(layer.ln2.beta, lg.ln2_beta);
    addm(layer.router.w_gate, lg.w_gate, /*router=*/true);
    for (std::size_t e = 0; e < layer.experts.size(); ++e) {
      addm(layer.experts[e].w_up, lg.g_up[e]);
      addm(layer.experts[e].w_down, lg.g_down[e]);
    }
  }
  add(m.ln_final.gamma, g.lnf_gamma);
  add(m.ln_final.beta, g.lnf_beta);
  return refs;
}

// Adam with decoupled weight decay; state is created fresh per round.
struct AdamW {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay;
  std::vector<Vector> m, v;
  std::int64_t step = 0;

  explicit AdamW(const std::vector<ParamRef>& refs, double wd) : weight_decay(wd) {
    m.reserve(refs.size());
    v.reserve(refs.size());
    for (const auto& r : refs) {
      m.emplace_back(r.n, 0.0);
      v.emplace_back(r.n, 0.0);
    }
  }

  void update(const std::vector<ParamRef>& refs, double lr, bool router_only) {
    ++step;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    for (std::size_t p = 0; p < refs.size(); ++p) {
      const auto& r = refs[p];
      if (router_only && !r.router) continue;
      for (std::size_t i = 0; i < r.n; ++i) {
        const double grad = r.g[i];
        m[p][i] = beta1 * m[p][i] + (1.0 - beta1) * grad;
        v[p][i] = beta2 * v[p][i] + (1.0 - beta2) * grad * grad;
        const double mhat = m[p][i] / bc1;
        const double vhat = v[p][i] / bc2;
        r.w[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * r.w[i]);
      }
    }
  }
};

// Seeded shuffled pool of disjoint training-region windows.
struct WindowPool {
  const Corpus& corpus;
  std::size_t window;
  std::vector<std::size_t> order;
  std::size_t next = 0;
  bool wrapped = false;

  WindowPool(const Corpus& c, std::size_t seq_len, std::uint64_t seed)
      : corpus(c), window(seq_len + 1) {
    const std::size_t n_slots = corpus.train_end / window;
    if (n_slots == 0) throw ValidationError("corpus training region smaller than one window");
    order.resize(n_slots);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(seed, /*tag=*/23));
    for (std::size_t i = n_slots - 1; i > 0; --i) {
      const std::size_t j = rng.below(i + 1);
      std::swap(order[i], order[j]);
    }
  }

  std::vector<std::uint8_t> take(bool allow_reuse) {
    if (next >= order.size()) {
      if (!allow_reuse) {
        throw ValidationError(
            "finetune: corpus exhausted after " + std::to_string(order.size()) +
            " windows; pass allow_reuse to recycle data");
      }
      next = 0;
      wrapped = true;
    }
    const std::size_t start = order[next++] * window;
    return {corpus.bytes.begin() + static_cast<std::ptrdiff_t>(start),
            corpus.bytes.begin() + static_cast<std::ptrdiff_t>(start + window)};
  }
};

}  // namespace detail

// Core next-token training loop shared by pretraining and budget finetuning.
// Gradients use mean-over-tokens semantics within a step.
inline FinetuneReport run_training(MoEModel& model, const Corpus& corpus,
                                   std::int64_t token_budget, double max_lr,
                                   double weight_decay, std::size_t batch_size,
                                   std::uint64_t seed,
                                   FinetuneSpec::Scope scope = FinetuneSpec::Scope::AllParameters,
                                   bool allow_reuse = false,
                                   std::size_t curve_every = 16) {
  FinetuneReport report;
  const std::size_t seq_len = model.config.seq_len;
  const std::int64_t tokens_per_step =
      static_cast<std::int64_t>(batch_size * seq_len);
  const std::int64_t steps =
      token_budget > 0 ? (token_budget + tokens_per_step - 1) / tokens_per_step : 0;
  if (steps == 0) return report;

  detail::WindowPool pool(corpus, seq_len, seed);
  GradientBundle grads = make_zero_grads(model);
  std::vector<detail::ParamRef> refs = detail::param_refs(model, grads);
  detail::AdamW opt(refs, weight_decay);
  const bool router_only = scope == FinetuneSpec::Scope::RouterOnly;

  for (std::int64_t step = 0; step < steps; ++step) {
    for (auto& r : refs)
      for (std::size_t i = 0; i < r.n; ++i) r.g[i] = 0.0;
    double batch_loss = 0.0;
    for (std::size_t b = 0; b < batch_size; ++b) {
      const auto seq = pool.take(allow_reuse);
      std::vector<std::uint8_t> toks(seq.begin(), seq.end() - 1);
      std::vector<std::uint8_t> tgts(seq.begin() + 1, seq.end());
      ForwardResult fwd = forward(model, toks);
      batch_loss += loss(fwd.logits, tgts);
      backward_into(model, toks, tgts, fwd, grads, GradReduction::Sum);
    }
    batch_loss /= static_cast<double>(batch_size);
    if (!std::isfinite(batch_loss)) {
      throw NumericalError("training diverged: non-finite loss at step " +
                           std::to_string(step));
    }
    const double inv = 1.0 / static_cast<double>(tokens_per_step);
    for (auto& r : refs)
      for (std::size_t i = 0; i < r.n; ++i) r.g[i] *= inv;
    const double lr =
        max_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(step) /
                                       static_cast<double>(steps)));
    opt.update(refs, lr, router_only);
    report.tokens_consumed += tokens_per_step;
    if (step == 0) report.loss_initial = batch_loss;
    report.loss_final = batch_loss;
    if (step % static_cast<std::int64_t>(curve_every) == 0 || step + 1 == steps) {
      report.curve.push_back({step, report.tokens_consumed, batch_loss, lr});
    }
  }
  report.reused_data = pool.wrapped;
  return report;
}

// One round of task-agnostic budget finetuning: fresh optimizer state, cosine
// decay to zero over the round, budget doubling by round when enabled.
inline FinetuneReport finetune_round(MoEModel& model, const Corpus& corpus,
                                     const FinetuneSpec& spec, std::size_t round_index,
                                     const CalibrationSet* calset_for_report = nullptr) {
  spec.validate();
  const std::int64_t budget = spec.budget_for_round(round_index);
  FinetuneReport pre;
  if (calset_for_report) {
    pre.ppl_initial = calibration_perplexity(model, *calset_for_report);
    pre.cv_before = load_distribution(model, *calset_for_report).cv;
  }
  FinetuneReport report = run_training(
      model, corpus, budget, spec.max_lr, spec.weight_decay, spec.batch_size,
      derive_seed(spec.seed, 1000 + round_index), spec.scope, spec.allow_reuse);
  report.ppl_initial = pre.ppl_initial;
  report.cv_before = pre.cv_before;
  if (calset_for_report) {
    report.ppl_final = calibration_perplexity(model, *calset_for_report);
    report.cv_after = load_distribution(model, *calset_for_report).cv;
  }
  if (budget == 0 && calset_for_report) {
    report.ppl_final = report.ppl_initial;
    report.cv_after = report.cv_before;
  }
  return report;
}

// Independent finetunes from the same start checkpoint, one per budget.
// The (budget, perplexity) table is reported, not asserted monotone.
inline std::vector<std::pair<std::int64_t, double>> budget_sufficiency_sweep(
    const MoEModel& start, const Corpus& corpus, const std::vector<std::int64_t>& budgets,
    const FinetuneSpec& spec, const EvalSplit& split) {
  for (std::size_t i = 1; i < budgets.size(); ++i) {
    if (budgets[i] < budgets[i - 1]) {
      throw ValidationError("budget_sufficiency_sweep: budgets must be ascending");
    }
  }
  std::vector<std::pair<std::int64_t, double>> out;
  for (std::int64_t budget : budgets) {
    MoEModel model = start;
    FinetuneSpec s = spec;
    s.base_budget = budget;
    s.doubling = false;
    finetune_round(model, corpus, s, 1, nullptr);
    out.emplace_back(budget, evaluate(model, split).perplexity);
  }
  return out;
}

}  // namespace moelab

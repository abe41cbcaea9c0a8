#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "moelab/calibration.hpp"
#include "moelab/corpus.hpp"
#include "moelab/digest.hpp"
#include "moelab/errors.hpp"
#include "moelab/model.hpp"

namespace moelab {

// Held-out token windows. Only make_eval_split can mark a split as coming
// from the evaluation region (the fixed 10% corpus tail), which is what
// evaluate() checks to rule out train/eval overlap.
struct EvalSplit {
  std::vector<std::vector<std::uint8_t>> sequences;  // seq_len + 1 each
  std::size_t seq_len = 0;
  std::string corpus_digest;
  bool from_eval_region = false;

  std::string digest() const {
    Fnv64 h;
    h.update_str(corpus_digest);
    h.update_u64(seq_len);
    h.update_u64(sequences.size());
    for (const auto& s : sequences) h.update(s.data(), s.size());
    return h.hex();
  }
};

// Consecutive disjoint windows tiling the evaluation tail of the corpus.
inline EvalSplit make_eval_split(const Corpus& corpus, std::size_t seq_len) {
  EvalSplit split;
  split.seq_len = seq_len;
  split.corpus_digest = corpus.digest;
  split.from_eval_region = true;
  const std::size_t window = seq_len + 1;
  std::size_t start = corpus.train_end;
  while (start + window <= corpus.size()) {
    split.sequences.emplace_back(corpus.bytes.begin() + static_cast<std::ptrdiff_t>(start),
                                 corpus.bytes.begin() + static_cast<std::ptrdiff_t>(start + window));
    start += window;
  }
  if (split.sequences.empty()) {
    throw ValidationError("make_eval_split: evaluation tail smaller than one window");
  }
  return split;
}

struct EvalResult {
  std::string split_digest;
  std::int64_t token_count = 0;
  double mean_nll = 0.0;
  double perplexity = 1.0;
};

// Teacher-forced NLL over every target token; perplexity = exp(mean NLL).
inline EvalResult evaluate(const MoEModel& model, const EvalSplit& split) {
  if (!split.from_eval_region) {
    throw ValidationError("evaluate: split overlaps the training region");
  }
  EvalResult res;
  res.split_digest = split.digest();
  double total_nll = 0.0;
  for (const auto& seq : split.sequences) {
    std::vector<std::uint8_t> toks(seq.begin(), seq.end() - 1);
    std::vector<std::uint8_t> tgts(seq.begin() + 1, seq.end());
    ForwardResult fwd = forward(model, toks);
    total_nll += loss(fwd.logits, tgts) * static_cast<double>(toks.size());
    res.token_count += static_cast<std::int64_t>(toks.size());
  }
  res.mean_nll = total_nll / static_cast<double>(res.token_count);
  res.perplexity = std::exp(res.mean_nll);
  return res;
}

// Perplexity over the calibration sequences (used for finetune reports; not
// a held-out measurement, so it bypasses the eval-region gate).
inline double calibration_perplexity(const MoEModel& model, const CalibrationSet& calset) {
  double total_nll = 0.0;
  std::int64_t tokens = 0;
  for (std::size_t s = 0; s < calset.sequences.size(); ++s) {
    const auto toks = calset.tokens(s);
    const auto tgts = calset.targets(s);
    ForwardResult fwd = forward(model, toks);
    total_nll += loss(fwd.logits, tgts) * static_cast<double>(toks.size());
    tokens += static_cast<std::int64_t>(toks.size());
  }
  return std::exp(total_nll / static_cast<double>(tokens));
}

}  // namespace moelab

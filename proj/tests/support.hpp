#pragma once

// Shared fixtures for the unit and acceptance suites: a deterministic
// synthetic text corpus, tiny model builders, and a finite-difference
// gradient oracle.

#include <cctype>
#include <cstdint>
#include <string>
#include <vector>

#include "moelab/moelab.hpp"

namespace support {

// English-like filler text: seeded syllable words composed into sentences.
// Deterministic for a given (seed, n_bytes); byte values stay in ASCII.
inline std::vector<std::uint8_t> synth_text(std::size_t n_bytes, std::uint64_t seed) {
  static const char* onsets[] = {"b",  "br", "c",  "cl", "d",  "dr", "f", "fl",
                                 "g",  "gr", "h",  "j",  "k",  "l",  "m", "n",
                                 "p",  "pl", "r",  "s",  "st", "t",  "tr", "v", "w"};
  static const char* nuclei[] = {"a", "e", "i", "o", "u", "ai", "ea", "ou"};
  static const char* codas[] = {"", "n", "r", "s", "t", "nd", "st", "ck", "ll", "m"};
  moelab::Rng rng(moelab::derive_seed(seed, 77));
  // fixed vocabulary of 240 pseudo-words so byte statistics are stable
  std::vector<std::string> vocab;
  for (std::size_t i = 0; i < 240; ++i) {
    std::string w;
    const std::size_t syllables = 1 + rng.below(3);
    for (std::size_t s = 0; s < syllables; ++s) {
      w += onsets[rng.below(25)];
      w += nuclei[rng.below(8)];
      w += codas[rng.below(10)];
    }
    vocab.push_back(w);
  }
  std::vector<std::uint8_t> out;
  out.reserve(n_bytes + 64);
  while (out.size() < n_bytes) {
    const std::size_t words = 4 + rng.below(10);
    for (std::size_t i = 0; i < words; ++i) {
      std::string w = vocab[rng.below(vocab.size())];
      if (i == 0) w[0] = static_cast<char>(std::toupper(w[0]));
      for (char c : w) out.push_back(static_cast<std::uint8_t>(c));
      out.push_back(i + 1 == words ? '.' : ' ');
    }
    out.push_back(' ');
  }
  out.resize(n_bytes);
  return out;
}

inline moelab::Corpus synth_corpus(std::size_t n_bytes, std::uint64_t seed) {
  return moelab::corpus_from_bytes(synth_text(n_bytes, seed));
}

// 2 layers, 4 experts, top-2, small dims: fast enough for exhaustive oracles.
inline moelab::ModelConfig tiny_config(std::uint64_t seed = 1) {
  moelab::ModelConfig cfg;
  cfg.vocab_size = 256;
  cfg.d_model = 8;
  cfg.n_layers = 2;
  cfg.n_experts = 4;
  cfg.top_k = 2;
  cfg.d_hidden = 6;
  cfg.seq_len = 16;
  cfg.seed = seed;
  return cfg;
}

inline moelab::MoEModel tiny_model(std::uint64_t seed = 1) {
  return moelab::init_model(tiny_config(seed));
}

inline std::vector<std::uint8_t> random_tokens(std::size_t n, std::uint64_t seed,
                                               std::size_t vocab = 256) {
  moelab::Rng rng(moelab::derive_seed(seed, 3));
  std::vector<std::uint8_t> toks(n);
  for (auto& t : toks) t = static_cast<std::uint8_t>(rng.below(vocab));
  return toks;
}

// Central finite difference of the mean-CE loss w.r.t. *slot, h = 1e-5.
inline double fd_loss_grad(moelab::MoEModel& model, const std::vector<std::uint8_t>& toks,
                           const std::vector<std::uint8_t>& tgts, double* slot,
                           double h = 1e-5) {
  const double saved = *slot;
  *slot = saved + h;
  const double up = moelab::loss(moelab::forward(model, toks).logits, tgts);
  *slot = saved - h;
  const double down = moelab::loss(moelab::forward(model, toks).logits, tgts);
  *slot = saved;
  return (up - down) / (2.0 * h);
}

}  // namespace support

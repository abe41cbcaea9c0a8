#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "moelab/digest.hpp"
#include "moelab/errors.hpp"

namespace moelab {

// Raw byte corpus with a fixed train/eval boundary: the last 10% of the file
// (by byte offset) is reserved for evaluation and never sampled for training,
// finetuning or calibration.
struct Corpus {
  std::vector<std::uint8_t> bytes;
  std::string digest;
  std::size_t train_end = 0;  // bytes [0, train_end) usable for training

  std::size_t size() const { return bytes.size(); }
};

inline Corpus load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus file: " + path);
  Corpus c;
  c.bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failure on corpus file: " + path);
  c.digest = fnv64_hex(c.bytes.data(), c.bytes.size());
  c.train_end = c.bytes.size() - c.bytes.size() / 10;
  return c;
}

inline Corpus corpus_from_bytes(std::vector<std::uint8_t> bytes) {
  Corpus c;
  c.bytes = std::move(bytes);
  c.digest = fnv64_hex(c.bytes.data(), c.bytes.size());
  c.train_end = c.bytes.size() - c.bytes.size() / 10;
  return c;
}

}  // namespace moelab

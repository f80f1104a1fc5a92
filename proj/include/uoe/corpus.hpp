#pragma once

// Byte-level corpus handling: raw bytes are the token stream (vocabulary
// 256), training windows are contiguous, non-overlapping spans of l tokens
// whose targets are the same span shifted by one byte.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "uoe/common.hpp"

namespace uoe {

inline std::vector<std::uint8_t> load_corpus_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("corpus: cannot open " + path);
  std::vector<std::uint8_t> bytes(
      (std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.empty()) throw FormatError("corpus: " + path + " is empty");
  return bytes;
}

// A window needs l inputs plus one lookahead byte for the final target.
inline std::size_t window_count(std::size_t corpus_size, std::size_t l) {
  if (l == 0) throw ConfigError("corpus: window length must be positive");
  return corpus_size > l ? (corpus_size - 1) / l : 0;
}

inline void fill_window(const std::vector<std::uint8_t>& bytes, std::size_t l,
                        std::size_t window,
                        std::vector<std::size_t>& inputs,
                        std::vector<std::size_t>& targets) {
  if (window >= window_count(bytes.size(), l))
    throw BoundsError("corpus: window " + std::to_string(window) +
                      " out of range for " + std::to_string(bytes.size()) +
                      " bytes at length " + std::to_string(l));
  const std::size_t start = window * l;
  for (std::size_t i = 0; i < l; ++i) {
    inputs.push_back(bytes[start + i]);
    targets.push_back(bytes[start + i + 1]);
  }
}

// Entropy of the empirical byte distribution, in nats; exp of it is the
// perplexity of the best memoryless predictor and the training baseline.
inline double unigram_entropy(const std::vector<std::uint8_t>& bytes) {
  std::vector<double> counts(256, 0.0);
  for (std::uint8_t b : bytes) counts[b] += 1.0;
  const double total = static_cast<double>(bytes.size());
  double h = 0.0;
  for (double c : counts) {
    if (c == 0.0) continue;
    const double p = c / total;
    h -= p * std::log(p);
  }
  return h;
}

inline double unigram_baseline_ppl(const std::vector<std::uint8_t>& bytes) {
  return std::exp(unigram_entropy(bytes));
}

}  // namespace uoe

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nemelast/rng.hpp"

namespace nemelast {

// Byte-level synthetic token stream. Three generators:
//   markov        order-2 chain over 32 symbols
//   copy          k-token prefix repeated after separators; the copied spans
//                 are predictable only with at least ~2k tokens of context
//   modular_chain running sum mod 17, queried at the end of the sequence
struct CorpusSpec {
  static constexpr int kVocab = 256;
  static constexpr int32_t kSepToken = 0;
  static constexpr int32_t kQueryToken = 1;

  double w_markov = 0.5;
  double w_copy = 0.3;
  double w_modchain = 0.2;
  int seq_len = 64;
  int copy_k_min = 8;
  int copy_k_max = 24;
  uint64_t seed = 0;

  void validate() const;  // weights sum to 1, seq_len >= 8
};

enum class TaskKind { MARKOV, COPY, MODCHAIN };

struct Sample {
  TaskKind kind;
  std::vector<int32_t> tokens;
  // positions (token index) whose prediction is the task's payload: copied
  // spans for COPY, the answer token for MODCHAIN; empty for MARKOV
  std::vector<int> payload_positions;
};

std::vector<Sample> generate(const CorpusSpec& spec, int count);

// Flat next-token batch made of `batch` fresh samples: tokens[b*len + t],
// targets shifted left by one with the final position ignored (-1).
struct Batch {
  int batch = 0;
  int len = 0;
  std::vector<int32_t> tokens;
  std::vector<int32_t> targets;
};

Batch make_batch(const CorpusSpec& spec, int batch, uint64_t stream);

// As make_batch, but targets outside copied spans are masked to -1. Used to
// measure copy-task CE in isolation.
Batch make_copy_eval_batch(const CorpusSpec& spec, int batch, uint64_t stream);

// length-prefixed binary records
void save_corpus(const std::vector<Sample>& samples, const std::string& path);
std::vector<Sample> load_corpus(const std::string& path);

}  // namespace nemelast

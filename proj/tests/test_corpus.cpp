#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>

#include "nemelast/corpus.hpp"

using namespace nemelast;

TEST_CASE("copy task replicates the prefix after each separator") {
  CorpusSpec spec;
  spec.w_markov = 0;
  spec.w_copy = 1;
  spec.w_modchain = 0;
  spec.seq_len = 64;
  spec.copy_k_min = 16;
  spec.copy_k_max = 16;
  spec.seed = 5;
  auto samples = generate(spec, 20);
  for (const Sample& s : samples) {
    REQUIRE(s.kind == TaskKind::COPY);
    // tokens after the first separator equal the first 16 tokens
    CHECK(s.tokens[16] == CorpusSpec::kSepToken);
    for (int i = 0; i < 16; ++i) CHECK(s.tokens[static_cast<size_t>(17 + i)] == s.tokens[static_cast<size_t>(i)]);
    CHECK(!s.payload_positions.empty());
  }
}

TEST_CASE("same seed reproduces the corpus; tokens stay in byte range") {
  CorpusSpec spec;
  spec.seed = 9;
  auto a = generate(spec, 30);
  auto b = generate(spec, 30);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].kind == b[i].kind);
    CHECK(a[i].tokens == b[i].tokens);
    for (int32_t t : a[i].tokens) {
      CHECK(t >= 0);
      CHECK(t <= 255);
    }
  }
}

TEST_CASE("modular chain answer equals the brute-force running sum") {
  CorpusSpec spec;
  spec.w_markov = 0;
  spec.w_copy = 0;
  spec.w_modchain = 1;
  spec.seq_len = 40;
  spec.seed = 11;
  for (const Sample& s : generate(spec, 25)) {
    REQUIRE(s.kind == TaskKind::MODCHAIN);
    int64_t acc = 0;
    for (int t = 0; t < spec.seq_len - 2; ++t) acc += s.tokens[static_cast<size_t>(t)];
    CHECK(s.tokens.back() == static_cast<int32_t>(acc % 17));
    CHECK(s.tokens[static_cast<size_t>(spec.seq_len - 2)] == CorpusSpec::kQueryToken);
  }
}

TEST_CASE("invalid task mixes and lengths are rejected") {
  CorpusSpec spec;
  spec.w_markov = 0.9;  // sums to 1.4
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  CorpusSpec spec2;
  spec2.seq_len = 4;
  CHECK_THROWS_AS(spec2.validate(), std::invalid_argument);
}

TEST_CASE("batches shift targets by one and ignore the final position") {
  CorpusSpec spec;
  spec.seq_len = 16;
  spec.seed = 13;
  Batch b = make_batch(spec, 3, 77);
  CHECK(b.tokens.size() == 48);
  for (int i = 0; i < 3; ++i) {
    for (int t = 0; t < 15; ++t)
      CHECK(b.targets[static_cast<size_t>(i * 16 + t)] == b.tokens[static_cast<size_t>(i * 16 + t + 1)]);
    CHECK(b.targets[static_cast<size_t>(i * 16 + 15)] == -1);
  }
}

TEST_CASE("copy eval batches mask everything but copied spans") {
  CorpusSpec spec;
  spec.seq_len = 48;
  spec.copy_k_min = 12;
  spec.copy_k_max = 12;
  spec.seed = 17;
  Batch b = make_copy_eval_batch(spec, 2, 5);
  int live = 0, masked = 0;
  for (size_t i = 0; i < b.targets.size(); ++i) {
    if (b.targets[i] == -1) {
      ++masked;
      continue;
    }
    ++live;
    // a live target predicts the next token, which must be a copied position
    CHECK(b.targets[i] == b.tokens[i + 1]);
  }
  CHECK(live > 0);
  CHECK(masked > 0);  // at least the prefix and separators are masked
}

TEST_CASE("corpus round-trips through the binary record format") {
  CorpusSpec spec;
  spec.seed = 23;
  auto samples = generate(spec, 12);
  const std::string path = "/tmp/nemelast_corpus_test.bin";
  save_corpus(samples, path);
  auto loaded = load_corpus(path);
  REQUIRE(loaded.size() == samples.size());
  for (size_t i = 0; i < samples.size(); ++i) {
    CHECK(loaded[i].kind == samples[i].kind);
    CHECK(loaded[i].tokens == samples[i].tokens);
    CHECK(loaded[i].payload_positions == samples[i].payload_positions);
  }
  std::remove(path.c_str());
}

#include "nemelast/corpus.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace nemelast {

namespace {

constexpr int kMarkovSymbols = 32;
constexpr int kMarkovBase = 32;  // markov tokens live in [32, 64)
constexpr int kMod = 17;

// Fixed order-2 transition table; each (a,b) row is derived from its own
// substream so the chain is stationary across samples and stages.
int markov_next(Rng& draw_rng, int a, int b) {
  Rng row = Rng::fork(0x51ed, static_cast<uint64_t>(a) * 97 + b);
  double weights[kMarkovSymbols];
  double total = 0.0;
  for (int i = 0; i < kMarkovSymbols; ++i) {
    const double w = row.uniform();
    weights[i] = w * w * w;  // skewed so the chain has learnable structure
    total += weights[i];
  }
  double u = draw_rng.uniform() * total;
  for (int i = 0; i < kMarkovSymbols; ++i) {
    u -= weights[i];
    if (u <= 0.0) return i;
  }
  return kMarkovSymbols - 1;
}

Sample gen_markov(const CorpusSpec& spec, Rng& rng) {
  Sample s;
  s.kind = TaskKind::MARKOV;
  s.tokens.resize(static_cast<size_t>(spec.seq_len));
  int a = rng.uniform_int(kMarkovSymbols);
  int b = rng.uniform_int(kMarkovSymbols);
  s.tokens[0] = kMarkovBase + a;
  s.tokens[1] = kMarkovBase + b;
  for (int t = 2; t < spec.seq_len; ++t) {
    const int c = markov_next(rng, a, b);
    s.tokens[static_cast<size_t>(t)] = kMarkovBase + c;
    a = b;
    b = c;
  }
  return s;
}

Sample gen_copy(const CorpusSpec& spec, Rng& rng) {
  Sample s;
  s.kind = TaskKind::COPY;
  const int k = spec.copy_k_min + rng.uniform_int(spec.copy_k_max - spec.copy_k_min + 1);
  std::vector<int32_t> prefix(static_cast<size_t>(k));
  for (int32_t& v : prefix) v = 2 + rng.uniform_int(CorpusSpec::kVocab - 2);
  s.tokens.reserve(static_cast<size_t>(spec.seq_len));
  for (int32_t v : prefix) {
    if (static_cast<int>(s.tokens.size()) >= spec.seq_len) break;
    s.tokens.push_back(v);
  }
  while (static_cast<int>(s.tokens.size()) < spec.seq_len) {
    s.tokens.push_back(CorpusSpec::kSepToken);
    for (int i = 0; i < k && static_cast<int>(s.tokens.size()) < spec.seq_len; ++i) {
      s.payload_positions.push_back(static_cast<int>(s.tokens.size()));
      s.tokens.push_back(prefix[static_cast<size_t>(i)]);
    }
  }
  // label consistency: every copied position replicates the prefix
  for (size_t i = 0; i < s.payload_positions.size(); ++i) {
    const int pos = s.payload_positions[i];
    int run = 0;
    for (int back = pos; back > 0 && s.tokens[static_cast<size_t>(back - 1)] != CorpusSpec::kSepToken;
         --back)
      ++run;
    if (s.tokens[static_cast<size_t>(pos)] != prefix[static_cast<size_t>(run)])
      throw std::logic_error("corpus: copy span does not replicate its prefix");
  }
  return s;
}

Sample gen_modchain(const CorpusSpec& spec, Rng& rng) {
  Sample s;
  s.kind = TaskKind::MODCHAIN;
  s.tokens.resize(static_cast<size_t>(spec.seq_len));
  int64_t acc = 0;
  for (int t = 0; t < spec.seq_len - 2; ++t) {
    const int32_t v = 2 + rng.uniform_int(CorpusSpec::kVocab - 2);
    s.tokens[static_cast<size_t>(t)] = v;
    acc += v;
  }
  s.tokens[static_cast<size_t>(spec.seq_len - 2)] = CorpusSpec::kQueryToken;
  const int32_t answer = static_cast<int32_t>(acc % kMod);
  s.tokens[static_cast<size_t>(spec.seq_len - 1)] = answer;
  s.payload_positions.push_back(spec.seq_len - 1);
  // label consistency
  int64_t check = 0;
  for (int t = 0; t < spec.seq_len - 2; ++t) check += s.tokens[static_cast<size_t>(t)];
  if (static_cast<int32_t>(check % kMod) != answer)
    throw std::logic_error("corpus: modular-chain answer does not match the running sum");
  return s;
}

Sample gen_one(const CorpusSpec& spec, Rng& rng) {
  const double u = rng.uniform();
  Sample s;
  if (u < spec.w_markov)
    s = gen_markov(spec, rng);
  else if (u < spec.w_markov + spec.w_copy)
    s = gen_copy(spec, rng);
  else
    s = gen_modchain(spec, rng);
  for (int32_t v : s.tokens)
    if (v < 0 || v >= CorpusSpec::kVocab)
      throw std::logic_error("corpus: token outside byte range");
  return s;
}

}  // namespace

void CorpusSpec::validate() const {
  if (std::abs(w_markov + w_copy + w_modchain - 1.0) > 1e-9)
    throw std::invalid_argument("corpus: task mix weights must sum to 1");
  if (seq_len < 8) throw std::invalid_argument("corpus: seq_len must be >= 8");
  if (copy_k_min < 1 || copy_k_max < copy_k_min)
    throw std::invalid_argument("corpus: bad copy_k range");
}

std::vector<Sample> generate(const CorpusSpec& spec, int count) {
  spec.validate();
  Rng rng(spec.seed);
  std::vector<Sample> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(gen_one(spec, rng));
  return out;
}

Batch make_batch(const CorpusSpec& spec, int batch, uint64_t stream) {
  spec.validate();
  Rng rng = Rng::fork(spec.seed, stream);
  Batch b;
  b.batch = batch;
  b.len = spec.seq_len;
  b.tokens.reserve(static_cast<size_t>(batch) * spec.seq_len);
  b.targets.reserve(static_cast<size_t>(batch) * spec.seq_len);
  for (int i = 0; i < batch; ++i) {
    Sample s = gen_one(spec, rng);
    for (int t = 0; t < spec.seq_len; ++t) {
      b.tokens.push_back(s.tokens[static_cast<size_t>(t)]);
      b.targets.push_back(t + 1 < spec.seq_len ? s.tokens[static_cast<size_t>(t + 1)] : -1);
    }
  }
  return b;
}

Batch make_copy_eval_batch(const CorpusSpec& spec, int batch, uint64_t stream) {
  CorpusSpec copy_only = spec;
  copy_only.w_markov = 0.0;
  copy_only.w_copy = 1.0;
  copy_only.w_modchain = 0.0;
  Rng rng = Rng::fork(spec.seed, stream);
  Batch b;
  b.batch = batch;
  b.len = copy_only.seq_len;
  for (int i = 0; i < batch; ++i) {
    Sample s = gen_copy(copy_only, rng);
    std::vector<bool> is_payload(static_cast<size_t>(copy_only.seq_len), false);
    for (int p : s.payload_positions) is_payload[static_cast<size_t>(p)] = true;
    for (int t = 0; t < copy_only.seq_len; ++t) {
      b.tokens.push_back(s.tokens[static_cast<size_t>(t)]);
      const bool next_is_payload = t + 1 < copy_only.seq_len && is_payload[static_cast<size_t>(t + 1)];
      b.targets.push_back(next_is_payload ? s.tokens[static_cast<size_t>(t + 1)] : -1);
    }
  }
  return b;
}

void save_corpus(const std::vector<Sample>& samples, const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("corpus: cannot open " + path + " for writing");
  const uint32_t n = static_cast<uint32_t>(samples.size());
  std::fwrite(&n, sizeof n, 1, f);
  for (const Sample& s : samples) {
    const uint8_t kind = static_cast<uint8_t>(s.kind);
    const uint32_t len = static_cast<uint32_t>(s.tokens.size());
    const uint32_t np = static_cast<uint32_t>(s.payload_positions.size());
    std::fwrite(&kind, 1, 1, f);
    std::fwrite(&len, sizeof len, 1, f);
    std::fwrite(s.tokens.data(), sizeof(int32_t), len, f);
    std::fwrite(&np, sizeof np, 1, f);
    std::fwrite(s.payload_positions.data(), sizeof(int), np, f);
  }
  std::fclose(f);
}

std::vector<Sample> load_corpus(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("corpus: cannot open " + path);
  auto rd = [&](void* p, size_t bytes) {
    if (std::fread(p, 1, bytes, f) != bytes) {
      std::fclose(f);
      throw std::runtime_error("corpus: truncated file " + path);
    }
  };
  uint32_t n = 0;
  rd(&n, sizeof n);
  std::vector<Sample> out(n);
  for (Sample& s : out) {
    uint8_t kind = 0;
    uint32_t len = 0, np = 0;
    rd(&kind, 1);
    rd(&len, sizeof len);
    s.kind = static_cast<TaskKind>(kind);
    s.tokens.resize(len);
    rd(s.tokens.data(), sizeof(int32_t) * len);
    rd(&np, sizeof np);
    s.payload_positions.resize(np);
    rd(s.payload_positions.data(), sizeof(int) * np);
  }
  std::fclose(f);
  return out;
}

}  // namespace nemelast

#pragma once

#include <cstdint>

#include "nemelast/tensor.hpp"

namespace nemelast {

// splitmix64 stream; hand-rolled so sequences are identical across platforms
// and standard-library versions.
class Rng {
 public:
  explicit Rng(uint64_t seed) : s_(seed) {}

  uint64_t next_u64();
  // open interval (0,1), safe for log()
  double uniform();
  double uniform(double lo, double hi);
  // Box-Muller, no caching
  double normal();
  // [0, n)
  int uniform_int(int n);

  // Independent substream derived from (seed, stream id).
  static Rng fork(uint64_t seed, uint64_t stream);

 private:
  uint64_t s_;
};

double gumbel_from_uniform(double u);

Tensor gumbel_sample(const Shape& shape, Rng& rng);
Tensor gumbel_sample(const Shape& shape, uint64_t seed);

Tensor randn(const Shape& shape, Rng& rng, double stddev = 1.0);
Tensor rand_uniform(const Shape& shape, Rng& rng, double lo, double hi);

}  // namespace nemelast

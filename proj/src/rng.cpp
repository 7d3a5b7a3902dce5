#include "nemelast/rng.hpp"

#include <cmath>

namespace nemelast {

uint64_t Rng::next_u64() {
  s_ += 0x9E3779B97F4A7C15ULL;
  uint64_t z = s_;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double Rng::uniform() {
  // 53 random bits, shifted into (0,1)
  return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
  const double u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

int Rng::uniform_int(int n) {
  return static_cast<int>(next_u64() % static_cast<uint64_t>(n));
}

Rng Rng::fork(uint64_t seed, uint64_t stream) {
  Rng mix(seed ^ (stream * 0xD1B54A32D192ED03ULL + 0x8CB92BA72F3D8DD7ULL));
  mix.next_u64();
  return mix;
}

double gumbel_from_uniform(double u) { return -std::log(-std::log(u)); }

Tensor gumbel_sample(const Shape& shape, Rng& rng) {
  Tensor t = Tensor::zeros(shape);
  for (double& v : t.data()) v = gumbel_from_uniform(rng.uniform());
  return t;
}

Tensor gumbel_sample(const Shape& shape, uint64_t seed) {
  Rng rng(seed);
  return gumbel_sample(shape, rng);
}

Tensor randn(const Shape& shape, Rng& rng, double stddev) {
  Tensor t = Tensor::zeros(shape);
  for (double& v : t.data()) v = stddev * rng.normal();
  return t;
}

Tensor rand_uniform(const Shape& shape, Rng& rng, double lo, double hi) {
  Tensor t = Tensor::zeros(shape);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace nemelast

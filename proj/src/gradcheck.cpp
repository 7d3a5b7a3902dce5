#include "nemelast/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

#include "nemelast/rng.hpp"

namespace nemelast {

namespace {

double probe_scalar(const ForwardFn& fn, std::span<const Tensor> inputs,
                    const Tensor& probe) {
  Tensor out = fn(inputs);
  double acc = 0.0;
  const auto ov = out.data();
  const auto pv = probe.data();
  for (size_t i = 0; i < ov.size(); ++i)
    if (std::isfinite(ov[i])) acc += ov[i] * pv[i];
  return acc;
}

}  // namespace

double grad_check_fn(const ForwardFn& fn, std::vector<Tensor> inputs, double step,
                     uint64_t probe_seed) {
  if (!(step > 0.0 && step <= 1e-3))
    throw std::invalid_argument("grad_check: step must be in (0, 1e-3]");

  // analytic pass
  Graph graph;
  Tensor out;
  {
    Recording rec(graph);
    out = fn(inputs);
  }
  Rng prng(probe_seed);
  Tensor probe = rand_uniform(out.shape(), prng, -1.0, 1.0);
  Tensor loss;
  {
    Recording rec(graph);
    loss = sum(mul(zero_nonfinite(out), probe));
  }
  graph.backward(loss);

  double max_rel = 0.0;
  for (Tensor& in : inputs) {
    if (!in.requires_grad()) continue;
    const auto g = in.grad();
    auto vals = in.data();
    for (int64_t i = 0; i < in.size(); ++i) {
      const double keep = vals[i];
      // fourth-order central stencil
      vals[i] = keep + step;
      const double f1 = probe_scalar(fn, inputs, probe);
      vals[i] = keep - step;
      const double f2 = probe_scalar(fn, inputs, probe);
      vals[i] = keep + 2.0 * step;
      const double f3 = probe_scalar(fn, inputs, probe);
      vals[i] = keep - 2.0 * step;
      const double f4 = probe_scalar(fn, inputs, probe);
      vals[i] = keep;
      const double numeric = (8.0 * (f1 - f2) - (f3 - f4)) / (12.0 * step);
      const double analytic = g.empty() ? 0.0 : g[static_cast<size_t>(i)];
      const double rel = std::abs(analytic - numeric) / (std::abs(numeric) + 1e-8);
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

double grad_check(const std::string& op_id, std::vector<Tensor> inputs, double step,
                  const PrimAux& aux) {
  return grad_check_fn(
      [&](std::span<const Tensor> ins) { return primitive_forward(op_id, ins, aux); },
      std::move(inputs), step);
}

}  // namespace nemelast

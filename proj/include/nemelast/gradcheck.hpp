#pragma once

#include <functional>
#include <string>
#include <vector>

#include "nemelast/tensor.hpp"

namespace nemelast {

using ForwardFn = std::function<Tensor(std::span<const Tensor>)>;

// Central-difference check of reverse-mode gradients for an arbitrary
// forward function. The output is reduced to a scalar with a fixed random
// probe so every output element participates. Returns
// max over input elements of |analytic - numeric| / (|numeric| + 1e-8),
// taken over every input that requires grad.
double grad_check_fn(const ForwardFn& fn, std::vector<Tensor> inputs, double step,
                     uint64_t probe_seed = 0x9d5f);

// Same check for a named primitive.
double grad_check(const std::string& op_id, std::vector<Tensor> inputs, double step,
                  const PrimAux& aux = {});

}  // namespace nemelast

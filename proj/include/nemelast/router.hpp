#pragma once

#include <string>
#include <utility>
#include <vector>

#include "nemelast/importance.hpp"
#include "nemelast/model.hpp"
#include "nemelast/rng.hpp"
#include "nemelast/tensor.hpp"

namespace nemelast {

enum class AxisId { EMB = 0, MAMBA = 1, ATTN = 2, FFN = 3, DEPTH = 4 };
constexpr int kNumAxes = 5;

AxisId axis_from_name(const std::string& name);
const char* axis_name(AxisId axis);

enum class AxisMode { HOMOGENEOUS, HETEROGENEOUS };
enum class Integration { MODE1, MODE2 };

// one mamba configuration: retained heads (total) and channels per head
struct MambaChoice {
  int heads;
  int channels;
};

// Candidate retained-count sets per axis, sorted ascending. The depth axis
// has no set: its router emits one logit per possible depth L in [1, N].
struct AxisConfig {
  std::vector<int> emb_counts = {32, 48, 64};
  std::vector<MambaChoice> mamba = {{4, 8}, {6, 12}, {8, 16}};
  std::vector<int> attn_counts = {2, 3, 4};
  std::vector<int> ffn_counts = {128, 192, 256};

  void validate(const ModelConfig& cfg) const;
};

struct AxisRouter {
  AxisMode mode = AxisMode::HOMOGENEOUS;
  int n_out = 0;
  Tensor w1, b1;  // [d_router, n_targets], [d_router]
  Tensor w2, b2;  // [n_out, d_router], [n_out]
};

// Per-axis two-layer routers plus the shared temperature / logit-scale
// schedule state.
struct RouterBank {
  ModelConfig config;
  AxisConfig sets;
  int n_targets = 3;
  int d_router = 64;
  double tau = 1.0;
  double logit_scale = 1.0;
  AxisRouter axes[kNumAxes];

  static RouterBank init(const ModelConfig& cfg, const AxisConfig& sets, int n_targets,
                         int d_router, uint64_t seed,
                         AxisMode mamba_mode = AxisMode::HOMOGENEOUS,
                         AxisMode attn_mode = AxisMode::HOMOGENEOUS,
                         AxisMode ffn_mode = AxisMode::HOMOGENEOUS);

  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  int64_t parameter_count() const;
  void set_requires_grad(bool rg);
  int layer_count(AxisId axis) const;  // N_M / N_A / N_F / N
};

struct BudgetSpec {
  int id = 0;  // one-hot index into the router input
  double target_cost = 0.0;
  std::string label;

  void validate() const;
};

enum class CostMetric { PARAM_COUNT, MEMORY_BYTES };

struct CostModel {
  CostMetric metric = CostMetric::PARAM_COUNT;
  ModelConfig config;
  double dtype_bytes = 8.0;
};

// z = logit_scale * (W2 . LeakyReLU(W1 . e_budget + b1) + b2), flat [n_out]
Tensor router_forward(const RouterBank& bank, AxisId axis, int budget_id);

// pi_i = exp((z_i + g_i)/tau) / sum_j exp((z_j + g_j)/tau) over the last dim;
// deterministic forces g = 0. rng may be null only when deterministic.
Tensor gumbel_softmax(const Tensor& logits, double tau, Rng* rng, bool deterministic);

// Probabilities (and pre-softmax logits, needed for mode-1 scaling) for all
// five axes of one budget. Heterogeneous axes are shaped [n_layers_of_kind,
// |set|]; homogeneous axes are [1, |set|]; depth is [1, N].
struct RouterProbs {
  Tensor probs[kNumAxes];
  Tensor logits[kNumAxes];
};

RouterProbs router_probs(const RouterBank& bank, int budget_id, double tau, Rng* rng,
                         bool deterministic);
// noise off, logit scale forced to 1: the deployment-time invocation
RouterProbs deterministic_probs(const RouterBank& bank, int budget_id);

// argmax decoding of probabilities into retained counts; active layers are
// the top-L of the depth ranking
Selection decode_selection(const RouterBank& bank, const ImportanceRanking& ranking,
                           const RouterProbs& probs);

// Decode every budget deterministically and clamp counts so selections are
// elementwise monotone in target cost; masks and slices of the budget family
// then nest by construction.
std::vector<Selection> decode_nested(const RouterBank& bank, const ImportanceRanking& ranking,
                                     const std::vector<BudgetSpec>& budgets);

// Build the masks a sub-network runs with. Discrete masks select the top
// c components of each axis ranking; mode 1 scales the selected mask by its
// logit, mode 2 blends all candidate masks by their probabilities. Inference
// always uses the discrete argmax mask at scale 1.
MaskSet generate_masks(const RouterBank& bank, const ImportanceRanking& ranking,
                       const RouterProbs& probs, Integration integration,
                       bool inference = false);

// Exact parameter count of the sliced architecture for a selection.
int64_t cost_param_count(const ModelConfig& cfg, const Selection& sel);

double achieved_cost(const CostModel& costs, const Selection& sel);

// Differentiable expected cost under the per-axis probabilities (axes are
// independent, so the expectation factorizes per term).
Tensor expected_cost(const RouterBank& bank, const ImportanceRanking& ranking,
                     const RouterProbs& probs, const CostModel& costs);

// |cost - target| / target. Mode 2 uses the expected cost; mode 1 applies a
// straight-through estimator around the discrete achieved cost.
Tensor router_loss(const RouterBank& bank, const ImportanceRanking& ranking,
                   const RouterProbs& probs, const Selection& sel, const BudgetSpec& budget,
                   const CostModel& costs, Integration integration);

struct AnnealSchedule {
  double tau_start = 1.0;
  double tau_end = 0.05;
  double scale_start = 1.0;
  double scale_end = 10.0;
  int horizon = 1;
};

// linear in step over [0, horizon], constant after
std::pair<double, double> anneal(const AnnealSchedule& sched, int step);

}  // namespace nemelast

#pragma once

#include <string>
#include <vector>

#include "nemelast/importance.hpp"
#include "nemelast/model.hpp"
#include "nemelast/router.hpp"

namespace nemelast {

inline constexpr const char* kCheckpointFormat = "NEMELAST/1";

// In-memory image of a saved checkpoint: the full model, the router bank,
// the budget table seen during training, and the effective rankings
// (post-resort width order plus the depth ranking).
struct Checkpoint {
  HybridModel model;
  RouterBank bank;
  std::vector<BudgetSpec> budgets;
  ImportanceRanking rankings;
  double router_overhead = 0.0;
};

// Binary layout: u32 header length, UTF-8 "key = value" header lines
// (first line carries the format version), u32 tensor count, a directory of
// (name, dtype, rank, extents, offset) entries, then raw row-major payloads.
// save enforces the router-overhead bound (< 2% of model parameter bytes).
void save_checkpoint(const HybridModel& model, const RouterBank& bank,
                     const std::vector<BudgetSpec>& budgets, const ImportanceRanking& rankings,
                     const std::string& path);

Checkpoint load_checkpoint(const std::string& path);

struct SlicedModel {
  HybridModel model;
  Selection selection;
};

// Deterministic router invocation (no noise, unit logit scale, argmax) for
// the requested budget, then a physical copy of the retained rows, columns,
// heads, and layers into a smaller config. Budgets outside the trained table
// are rejected.
SlicedModel extract_submodel(const Checkpoint& ckpt, const std::string& budget_label);

struct EquivalenceReport {
  double max_rel_diff = 0.0;
  double threshold = 0.0;
  bool pass = false;
};

// Runs masked full-model forward and sliced forward on random prompts and
// reports the max relative logit difference (normalized by the largest
// sliced-logit magnitude).
EquivalenceReport verify_equivalence(const Checkpoint& ckpt, const std::string& budget_label,
                                     int n_prompts, int prompt_len, uint64_t seed,
                                     double threshold = 1e-10);

// serialization of rankings alone (the calibrate artifact)
void save_rankings(const ImportanceRanking& rankings, const ModelConfig& cfg,
                   const std::string& path);
ImportanceRanking load_rankings(const ModelConfig& cfg, const std::string& path);

}  // namespace nemelast

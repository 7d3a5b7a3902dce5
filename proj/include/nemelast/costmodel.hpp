#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace nemelast {

enum class FamilyMethod { MINITRON, ELASTIC, PRETRAIN };

// Closed-form training-token and deployment-memory model for a family of n
// nested or independently derived models.
struct FamilyPlan {
  FamilyMethod method = FamilyMethod::ELASTIC;
  int n = 1;
  double tokens_explore = 0.0;     // per model, MINITRON only
  double tokens_kd = 0.0;          // per model, MINITRON only
  double tokens_elastic_kd = 0.0;  // family total, ELASTIC only
  std::vector<double> tokens_pretrain;  // per model, PRETRAIN only
  std::vector<double> sizes;            // parameter counts per model
  double dtype_bytes = 2.0;             // BF16 by default
  double eps_router = 0.0;              // fraction of the largest model

  void validate() const;
};

// MINITRON: n * (explore + kd); ELASTIC: constant; PRETRAIN: sum per model.
double tokens_required(const FamilyPlan& plan);

// Separate checkpoints sum all sizes; nested deployment pays for the largest
// model plus router overhead only.
double deployment_memory(const FamilyPlan& plan);

struct CostRow {
  int n;
  std::string method;
  double tokens;
  double memory_bytes;
};

// n = 1..max_n sweep over all three methods, with per-model costs taken from
// the plan template (sizes/tokens_pretrain are truncated or extended by
// repeating the last entry).
std::vector<CostRow> family_sweep(const FamilyPlan& tmpl, int max_n);

void write_cost_csv(const std::vector<CostRow>& rows, const std::string& path);

}  // namespace nemelast

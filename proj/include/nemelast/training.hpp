#pragma once

#include <string>
#include <vector>

#include "nemelast/corpus.hpp"
#include "nemelast/importance.hpp"
#include "nemelast/model.hpp"
#include "nemelast/router.hpp"

namespace nemelast {

enum class TeacherMode { FROZEN, TRAINABLE };

struct StageConfig {
  int seq_len = 64;
  int64_t token_budget = 0;
  int batch = 8;

  int steps() const;  // ceil(token_budget / (batch * seq_len))
};

struct TrainConfig {
  StageConfig stage1{64, 1'500'000, 16};
  StageConfig stage2{256, 1'000'000, 4};
  std::vector<double> stage2_weights = {0.2, 0.3, 0.5};  // indexed by budget id
  double lr_model = 1e-3;
  double lr_router = 1e-2;
  double momentum = 0.9;
  int warmup_steps = 60;
  double lambda = 1.0;
  double kd_temperature = 1.0;
  TeacherMode teacher_mode = TeacherMode::FROZEN;
  double alpha_ce = 0.1;
  Integration integration = Integration::MODE2;
  uint64_t seed = 0;
  int log_interval = 10;
  int anneal_horizon = 0;  // 0: anneal across all planned steps
  CorpusSpec corpus_stage1;
  CorpusSpec corpus_stage2;

  void validate(int n_budgets) const;
};

struct BudgetSampler {
  int stage = 1;
  std::vector<BudgetSpec> budgets;
  std::vector<double> weights;  // stage 2 only; must sum to 1

  void validate() const;
};

const BudgetSpec& sample_budget(const BudgetSampler& sampler, Rng& rng);

// mean NLL over positions whose target is not -1
Tensor ce_loss(const Tensor& logits, std::span<const int32_t> targets);

// forward KL(teacher || student) at the given temperature, mean over positions
Tensor kd_loss(const Tensor& student_logits, const Tensor& teacher_logits, double temperature);

// FROZEN: KL against precomputed constant teacher logits. TRAINABLE: the
// full-width pass of the same parameters is the teacher and also receives a
// CE anchor (alpha_ce > 0 required when the student budget is the full one,
// otherwise self-distillation is a fixed point).
Tensor task_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                 std::span<const int32_t> targets, TeacherMode mode, double alpha_ce,
                 double kd_temperature, bool budget_is_full);

Tensor total_loss(const Tensor& task, const Tensor& router, double lambda);

double effective_lr(double base, int step, int warmup_steps);

// SGD with momentum over a fixed parameter list
struct SgdState {
  std::vector<Tensor> params;
  std::vector<std::vector<double>> velocity;
  double momentum = 0.9;

  static SgdState init(std::vector<Tensor> params, double momentum);
  void apply(double lr);
  void zero_grads();
};

struct TrainResult {
  std::vector<std::string> metric_rows;  // CSV rows, header excluded
  HybridModel teacher;                   // the frozen copy (FROZEN mode)
  int stage1_steps = 0;
  int stage2_steps = 0;
  double final_tau = 0.0;
  double final_logit_scale = 0.0;
};

inline constexpr const char* kMetricsHeader =
    "step,stage,budget_label,task_loss,router_loss,total_loss,tau,logit_scale,lr_model,"
    "lr_router";

// Two-stage run: short-context uniform sampling, then extended-context
// weighted sampling. Updates model and bank in place; writes the metrics CSV
// when path is nonempty. Non-finite losses abort with the step named.
TrainResult train(HybridModel& model, RouterBank& bank, const ImportanceRanking& rankings,
                  const std::vector<BudgetSpec>& budgets, const TrainConfig& cfg,
                  const std::string& metrics_csv_path);

// evaluation helpers (forward only)
double eval_ce_with_masks(const HybridModel& model, const MaskSet& masks,
                          const std::vector<Batch>& batches);
double eval_kd_with_masks(const HybridModel& student, const MaskSet& masks,
                          const HybridModel& teacher, const std::vector<Batch>& batches,
                          double temperature);

}  // namespace nemelast

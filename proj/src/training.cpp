#include "nemelast/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace nemelast {

namespace {

[[noreturn]] void fail(const std::string& what) {
  throw std::invalid_argument("training: " + what);
}

}  // namespace

int StageConfig::steps() const {
  if (token_budget <= 0) return 0;
  const int64_t per_step = static_cast<int64_t>(batch) * seq_len;
  return static_cast<int>((token_budget + per_step - 1) / per_step);
}

void TrainConfig::validate(int n_budgets) const {
  if (stage1.seq_len < 8 || stage2.seq_len < 8) fail("stage seq_len must be >= 8");
  if (stage2.token_budget > 0 && stage2.seq_len <= stage1.seq_len)
    fail("stage 2 sequence length must exceed stage 1");
  if (lambda <= 0) fail("lambda must be positive");
  if (static_cast<int>(stage2_weights.size()) != n_budgets)
    fail("stage2_weights length " + std::to_string(stage2_weights.size()) + " != budget count " +
         std::to_string(n_budgets));
  double total = 0;
  for (double w : stage2_weights) {
    if (w <= 0) fail("stage2 sampling weights must be positive");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-12) fail("stage2 sampling weights must sum to 1");
  if (lr_model <= 0 || lr_router <= 0) fail("learning rates must be positive");
  if (kd_temperature <= 0) fail("kd_temperature must be positive");
  if (alpha_ce < 0) fail("alpha_ce must be nonnegative");
  if (warmup_steps < 1) fail("warmup_steps must be >= 1");
}

void BudgetSampler::validate() const {
  if (budgets.empty()) fail("sampler has no budgets");
  if (stage == 2) {
    if (weights.size() != budgets.size()) fail("sampler weights length mismatch");
    double total = 0;
    for (double w : weights) total += w;
    if (std::abs(total - 1.0) > 1e-12) fail("sampler weights must sum to 1");
  }
}

const BudgetSpec& sample_budget(const BudgetSampler& sampler, Rng& rng) {
  sampler.validate();
  if (sampler.stage == 1 || sampler.budgets.size() == 1) {
    return sampler.budgets[static_cast<size_t>(
        rng.uniform_int(static_cast<int>(sampler.budgets.size())))];
  }
  double u = rng.uniform();
  for (size_t i = 0; i < sampler.budgets.size(); ++i) {
    u -= sampler.weights[i];
    if (u <= 0.0) return sampler.budgets[i];
  }
  return sampler.budgets.back();
}

Tensor ce_loss(const Tensor& logits, std::span<const int32_t> targets) {
  return cross_entropy(logits, targets, -1);
}

Tensor kd_loss(const Tensor& student_logits, const Tensor& teacher_logits, double temperature) {
  return kl_divergence(teacher_logits, student_logits, temperature);
}

Tensor task_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                 std::span<const int32_t> targets, TeacherMode mode, double alpha_ce,
                 double kd_temperature, bool budget_is_full) {
  if (mode == TeacherMode::FROZEN)
    return kd_loss(student_logits, teacher_logits, kd_temperature);
  if (budget_is_full && alpha_ce <= 0.0)
    fail("trainable teacher with the full budget needs alpha_ce > 0 (self-distillation "
         "fixed point)");
  Tensor kd = kd_loss(student_logits, teacher_logits, kd_temperature);
  if (alpha_ce == 0.0) return kd;
  return add(kd, scale(ce_loss(teacher_logits, targets), alpha_ce));
}

Tensor total_loss(const Tensor& task, const Tensor& router, double lambda) {
  return add(task, scale(router, lambda));
}

double effective_lr(double base, int step, int warmup_steps) {
  if (step >= warmup_steps) return base;
  return base * static_cast<double>(step + 1) / warmup_steps;
}

SgdState SgdState::init(std::vector<Tensor> params, double momentum) {
  SgdState s;
  s.params = std::move(params);
  s.momentum = momentum;
  s.velocity.resize(s.params.size());
  for (size_t i = 0; i < s.params.size(); ++i)
    s.velocity[i].assign(static_cast<size_t>(s.params[i].size()), 0.0);
  return s;
}

void SgdState::apply(double lr) {
  for (size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) continue;
    auto g = params[i].grad();
    auto v = velocity[i].data();
    auto p = params[i].data();
    for (size_t k = 0; k < g.size(); ++k) {
      v[k] = momentum * v[k] + g[k];
      p[k] -= lr * v[k];
    }
  }
}

void SgdState::zero_grads() {
  for (Tensor& p : params)
    if (p.has_grad()) p.zero_grad();
}

namespace {

std::string format_row(int step, int stage, const std::string& label, double task, double router,
                       double total, double tau, double logit_scale, double lr_m, double lr_r) {
  char buf[320];
  std::snprintf(buf, sizeof buf, "%d,%d,%s,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", step,
                stage, label.c_str(), task, router, total, tau, logit_scale, lr_m, lr_r);
  return buf;
}

}  // namespace

TrainResult train(HybridModel& model, RouterBank& bank, const ImportanceRanking& rankings,
                  const std::vector<BudgetSpec>& budgets, const TrainConfig& cfg,
                  const std::string& metrics_csv_path) {
  cfg.validate(static_cast<int>(budgets.size()));
  rankings.validate(model.config);
  if (budgets.empty()) fail("no budgets configured");
  for (const BudgetSpec& b : budgets) b.validate();
  if (cfg.corpus_stage1.seq_len != cfg.stage1.seq_len ||
      cfg.corpus_stage2.seq_len != cfg.stage2.seq_len)
    fail("corpus seq_len does not match the stage seq_len");

  const int steps1 = cfg.stage1.steps();
  const int steps2 = cfg.stage2.steps();
  const int total_steps = steps1 + steps2;
  AnnealSchedule sched;
  sched.horizon = cfg.anneal_horizon > 0 ? cfg.anneal_horizon : std::max(total_steps, 1);

  TrainResult result;
  result.stage1_steps = steps1;
  result.stage2_steps = steps2;
  result.teacher = model.clone();
  result.teacher.set_requires_grad(false);

  model.set_requires_grad(true);
  bank.set_requires_grad(true);
  SgdState model_opt = SgdState::init(model.parameters(), cfg.momentum);
  std::vector<Tensor> router_params;
  for (auto& [name, t] : bank.named_parameters()) router_params.push_back(t);
  SgdState router_opt = SgdState::init(router_params, cfg.momentum);

  CostModel costs;
  costs.config = model.config;
  MaskSet teacher_masks = MaskSet::all_ones(model.config);

  BudgetSampler sampler1{1, budgets, {}};
  BudgetSampler sampler2{2, budgets, cfg.stage2_weights};

  double final_tau = sched.tau_start;
  double final_scale = sched.scale_start;
  double max_target = 0.0;
  for (const BudgetSpec& b : budgets) max_target = std::max(max_target, b.target_cost);

  for (int step = 0; step < total_steps; ++step) {
    const bool in_stage2 = step >= steps1;
    const int stage = in_stage2 ? 2 : 1;
    const StageConfig& sc = in_stage2 ? cfg.stage2 : cfg.stage1;
    const CorpusSpec& corpus = in_stage2 ? cfg.corpus_stage2 : cfg.corpus_stage1;

    auto [tau, logit_scale] = anneal(sched, step);
    bank.tau = tau;
    bank.logit_scale = logit_scale;
    final_tau = tau;
    final_scale = logit_scale;

    Rng budget_rng = Rng::fork(cfg.seed, 0xb0000000ULL + static_cast<uint64_t>(step));
    const BudgetSpec& budget =
        sample_budget(in_stage2 ? sampler2 : sampler1, budget_rng);
    Batch batch = make_batch(corpus, sc.batch, 0xda7a0000ULL + static_cast<uint64_t>(step));

    // teacher sees the same batch; no gradients, no tape
    Tensor teacher_logits;
    if (cfg.teacher_mode == TeacherMode::FROZEN)
      teacher_logits =
          stack_forward(result.teacher, teacher_masks, batch.tokens, batch.batch, batch.len);

    Graph graph;
    Tensor total;
    double task_v = 0, router_v = 0;
    {
      Recording rec(graph);
      Rng gumbel_rng = Rng::fork(cfg.seed, 0x60000000ULL + static_cast<uint64_t>(step));
      RouterProbs probs = router_probs(bank, budget.id, tau, &gumbel_rng, false);
      MaskSet masks = generate_masks(bank, rankings, probs, cfg.integration);
      Tensor student_logits = stack_forward(model, masks, batch.tokens, batch.batch, batch.len);
      if (cfg.teacher_mode == TeacherMode::TRAINABLE)
        teacher_logits = stack_forward(model, teacher_masks, batch.tokens, batch.batch, batch.len);
      const bool is_full = budget.target_cost == max_target;
      Tensor task = task_loss(student_logits, teacher_logits, batch.targets, cfg.teacher_mode,
                              cfg.alpha_ce, cfg.kd_temperature, is_full);
      Selection sel = decode_selection(bank, rankings, probs);
      Tensor rloss = router_loss(bank, rankings, probs, sel, budget, costs, cfg.integration);
      total = total_loss(task, rloss, cfg.lambda);
      task_v = task.item();
      router_v = rloss.item();
    }
    if (!std::isfinite(total.item()))
      throw std::runtime_error("training: non-finite loss at step " + std::to_string(step) +
                               " (stage " + std::to_string(stage) + ", budget " + budget.label +
                               ")");
    graph.backward(total);

    const double lr_m = effective_lr(cfg.lr_model, step, cfg.warmup_steps);
    const double lr_r = effective_lr(cfg.lr_router, step, cfg.warmup_steps);
    model_opt.apply(lr_m);
    router_opt.apply(lr_r);
    model_opt.zero_grads();
    router_opt.zero_grads();

    if (step % cfg.log_interval == 0 || step + 1 == total_steps)
      result.metric_rows.push_back(format_row(step, stage, budget.label, task_v, router_v,
                                              total.item(), tau, logit_scale, lr_m, lr_r));
  }

  result.final_tau = final_tau;
  result.final_logit_scale = final_scale;

  if (!metrics_csv_path.empty()) {
    FILE* f = std::fopen(metrics_csv_path.c_str(), "w");
    if (!f) throw std::runtime_error("training: cannot open " + metrics_csv_path);
    std::fprintf(f, "%s\n", kMetricsHeader);
    for (const std::string& row : result.metric_rows) std::fprintf(f, "%s\n", row.c_str());
    std::fclose(f);
  }
  return result;
}

double eval_ce_with_masks(const HybridModel& model, const MaskSet& masks,
                          const std::vector<Batch>& batches) {
  if (batches.empty()) fail("eval needs at least one batch");
  double acc = 0;
  for (const Batch& b : batches) {
    Tensor logits = stack_forward(model, masks, b.tokens, b.batch, b.len);
    acc += ce_loss(logits, b.targets).item();
  }
  return acc / static_cast<double>(batches.size());
}

double eval_kd_with_masks(const HybridModel& student, const MaskSet& masks,
                          const HybridModel& teacher, const std::vector<Batch>& batches,
                          double temperature) {
  if (batches.empty()) fail("eval needs at least one batch");
  MaskSet ones = MaskSet::all_ones(teacher.config);
  double acc = 0;
  for (const Batch& b : batches) {
    Tensor s = stack_forward(student, masks, b.tokens, b.batch, b.len);
    Tensor t = stack_forward(teacher, ones, b.tokens, b.batch, b.len);
    acc += kd_loss(s, t, temperature).item();
  }
  return acc / static_cast<double>(batches.size());
}

}  // namespace nemelast

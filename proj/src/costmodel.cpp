#include "nemelast/costmodel.hpp"

#include <algorithm>
#include <cstdio>
#include <stdexcept>

namespace nemelast {

namespace {

const char* method_name(FamilyMethod m) {
  switch (m) {
    case FamilyMethod::MINITRON: return "minitron";
    case FamilyMethod::ELASTIC: return "elastic";
    case FamilyMethod::PRETRAIN: return "pretrain";
  }
  return "?";
}

}  // namespace

void FamilyPlan::validate() const {
  if (n < 0) throw std::invalid_argument("costmodel: n must be nonnegative");
  if (tokens_explore < 0 || tokens_kd < 0 || tokens_elastic_kd < 0)
    throw std::invalid_argument("costmodel: token counts must be nonnegative");
  for (double s : sizes)
    if (s < 0) throw std::invalid_argument("costmodel: sizes must be nonnegative");
  for (double t : tokens_pretrain)
    if (t < 0) throw std::invalid_argument("costmodel: pretrain tokens must be nonnegative");
  if (!(eps_router < 0.02))
    throw std::invalid_argument("costmodel: eps_router must be < 0.02");
}

double tokens_required(const FamilyPlan& plan) {
  plan.validate();
  switch (plan.method) {
    case FamilyMethod::MINITRON:
      if (plan.n > 0 && plan.tokens_explore == 0 && plan.tokens_kd == 0)
        throw std::invalid_argument("costmodel: MINITRON plan needs tokens_explore/tokens_kd");
      return plan.n * (plan.tokens_explore + plan.tokens_kd);
    case FamilyMethod::ELASTIC:
      if (plan.tokens_elastic_kd == 0)
        throw std::invalid_argument("costmodel: ELASTIC plan needs tokens_elastic_kd");
      return plan.tokens_elastic_kd;
    case FamilyMethod::PRETRAIN: {
      if (static_cast<int>(plan.tokens_pretrain.size()) < plan.n)
        throw std::invalid_argument("costmodel: PRETRAIN plan needs per-model token counts");
      double total = 0.0;
      for (int i = 0; i < plan.n; ++i) total += plan.tokens_pretrain[static_cast<size_t>(i)];
      return total;
    }
  }
  throw std::invalid_argument("costmodel: unknown method");
}

double deployment_memory(const FamilyPlan& plan) {
  plan.validate();
  if (plan.sizes.empty()) throw std::invalid_argument("costmodel: sizes must be nonempty");
  if (plan.method == FamilyMethod::ELASTIC) {
    const double mx = *std::max_element(plan.sizes.begin(), plan.sizes.end());
    return mx * plan.dtype_bytes * (1.0 + plan.eps_router);
  }
  double total = 0.0;
  for (double s : plan.sizes) total += s;
  return total * plan.dtype_bytes;
}

std::vector<CostRow> family_sweep(const FamilyPlan& tmpl, int max_n) {
  std::vector<CostRow> rows;
  for (int n = 1; n <= max_n; ++n) {
    for (FamilyMethod m : {FamilyMethod::MINITRON, FamilyMethod::ELASTIC, FamilyMethod::PRETRAIN}) {
      FamilyPlan p = tmpl;
      p.method = m;
      p.n = n;
      auto extend = [n](std::vector<double>& v) {
        if (v.empty()) return;
        while (static_cast<int>(v.size()) < n) v.push_back(v.back());
        v.resize(static_cast<size_t>(n));
      };
      extend(p.sizes);
      extend(p.tokens_pretrain);
      rows.push_back({n, method_name(m), tokens_required(p), deployment_memory(p)});
    }
  }
  return rows;
}

void write_cost_csv(const std::vector<CostRow>& rows, const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw std::runtime_error("costmodel: cannot open " + path + " for writing");
  std::fprintf(f, "n,method,tokens,memory_bytes\n");
  for (const CostRow& r : rows)
    std::fprintf(f, "%d,%s,%.17g,%.17g\n", r.n, r.method.c_str(), r.tokens, r.memory_bytes);
  std::fclose(f);
}

}  // namespace nemelast

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "nemelast/costmodel.hpp"

using namespace nemelast;

namespace {

FamilyPlan paper_plan() {
  FamilyPlan p;
  p.tokens_explore = 240e9;
  p.tokens_kd = 135e9;
  p.tokens_elastic_kd = 110e9;
  p.tokens_pretrain = {20e12, 20e12};
  p.sizes = {6e9, 9e9, 12e9};
  p.dtype_bytes = 2.0;
  p.eps_router = 0.0;
  return p;
}

}  // namespace

TEST_CASE("token costs reproduce the published family numbers") {
  FamilyPlan p = paper_plan();
  p.method = FamilyMethod::MINITRON;
  p.n = 2;
  CHECK(tokens_required(p) == 750e9);  // 480 B exploratory + 270 B final
  p.method = FamilyMethod::ELASTIC;
  for (int n : {1, 2, 5}) {
    p.n = n;
    CHECK(tokens_required(p) == 110e9);
  }
  p.method = FamilyMethod::PRETRAIN;
  p.n = 2;
  CHECK(tokens_required(p) == 40e12);
  p.method = FamilyMethod::MINITRON;
  p.n = 0;
  CHECK(tokens_required(p) == 0.0);
}

TEST_CASE("elastic over minitron token ratio is about 7x") {
  FamilyPlan p = paper_plan();
  p.method = FamilyMethod::MINITRON;
  p.n = 2;
  const double minitron = tokens_required(p);
  p.method = FamilyMethod::ELASTIC;
  const double elastic = tokens_required(p);
  CHECK(minitron / elastic == doctest::Approx(6.8).epsilon(0.01));
}

TEST_CASE("deployment memory reproduces the published comparison") {
  FamilyPlan p = paper_plan();
  p.method = FamilyMethod::ELASTIC;  // nested: 6B + 9B + 12B in one checkpoint
  p.n = 3;
  CHECK(deployment_memory(p) == 24e9);
  FamilyPlan sep = paper_plan();
  sep.method = FamilyMethod::MINITRON;
  sep.n = 2;
  sep.sizes = {9e9, 12e9};
  CHECK(deployment_memory(sep) == 42e9);
  CHECK((42e9 - 24e9) / 42e9 == doctest::Approx(0.43).epsilon(0.01));
}

TEST_CASE("single model: separate equals nested at zero router overhead") {
  FamilyPlan p = paper_plan();
  p.sizes = {9e9};
  p.n = 1;
  p.method = FamilyMethod::ELASTIC;
  const double nested = deployment_memory(p);
  p.method = FamilyMethod::PRETRAIN;
  CHECK(deployment_memory(p) == nested);
}

TEST_CASE("elastic tokens are constant in n; minitron tokens are linear") {
  FamilyPlan tmpl = paper_plan();
  auto rows = family_sweep(tmpl, 10);
  double elastic_ref = -1;
  for (const CostRow& r : rows) {
    if (r.method == "elastic") {
      if (elastic_ref < 0) elastic_ref = r.tokens;
      CHECK(r.tokens == elastic_ref);
    }
    if (r.method == "minitron")
      CHECK(r.tokens == r.n * (tmpl.tokens_explore + tmpl.tokens_kd));
  }
}

TEST_CASE("nested memory depends only on the largest model") {
  FamilyPlan p = paper_plan();
  p.method = FamilyMethod::ELASTIC;
  p.n = 3;
  const double base = deployment_memory(p);
  p.sizes = {1e9, 2e9, 12e9};  // smaller siblings changed
  CHECK(deployment_memory(p) == base);
  p.eps_router = 0.015;
  CHECK(deployment_memory(p) == 12e9 * 2.0 * 1.015);
}

TEST_CASE("router overhead fraction beyond the bound is rejected") {
  FamilyPlan p = paper_plan();
  p.eps_router = 0.02;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  p.eps_router = 0.019;
  CHECK_NOTHROW(p.validate());
}

TEST_CASE("missing method fields are rejected") {
  FamilyPlan p;
  p.method = FamilyMethod::ELASTIC;
  p.sizes = {1e9};
  CHECK_THROWS_AS(tokens_required(p), std::invalid_argument);
  p.method = FamilyMethod::PRETRAIN;
  p.n = 2;
  p.tokens_pretrain = {1e9};
  CHECK_THROWS_AS(tokens_required(p), std::invalid_argument);
}

#include "doctest.h"
#include "gradcheck_suite.hpp"

using namespace pisco;

TEST_CASE("quadratic form gradient matches finite differences") {
  std::mt19937_64 rng(7);
  Parameter x("x", gradcheck_suite::random_tensor({1, 6}, rng));
  Parameter a("a", gradcheck_suite::random_tensor({6, 6}, rng));
  std::vector<Parameter*> ps{&x, &a};
  GradCheckOptions opts;
  opts.eps = 1e-5;
  opts.samples_per_param = 64;
  auto report = grad_check(
      [&](Tape& t) {
        Var xv = t.param(x);
        return sum(mul(matmul(xv, t.param(a)), xv));
      },
      ps, opts);
  CHECK(report.checked > 0);
  CHECK(report.max_rel_error < 1e-6);
}

TEST_CASE("every primitive passes a gradient check at ten random points") {
  for (const auto& r : gradcheck_suite::primitive_checks(10)) {
    INFO(r.name << ": " << r.worst);
    CHECK(r.checked > 0);
    CHECK(r.max_rel_error < 1e-3);
  }
}

TEST_CASE("attention block gradient check") {
  const auto r = gradcheck_suite::attention_block_check();
  INFO(r.worst);
  CHECK(r.max_rel_error < 1e-3);
}

TEST_CASE("two-layer model with adapters gradient check") {
  const auto r = gradcheck_suite::model_check();
  INFO(r.worst);
  CHECK(r.checked > 0);
  CHECK(r.max_rel_error < 1e-3);
}

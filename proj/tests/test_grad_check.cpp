#include <doctest.h>

#include <cmath>

#include "polyv/error.hpp"
#include "polyv/grad_check.hpp"
#include "polyv/rng.hpp"
#include "polyv/tape.hpp"
#include "polyv/tensor.hpp"

using namespace polyv;

namespace {

// Quadratic with a gradient known in closed form (2(w - a)); self-test that
// the checker itself agrees with an exactly analyzable objective.
struct QuadraticFixture {
  Tensor w, a;
  QuadraticFixture() {
    Rng rng(101);
    w = Tensor::randn({3, 4}, rng);
    a = Tensor::randn({3, 4}, rng);
  }
  Objective objective() {
    return [this](bool back) {
      Tape tape;
      NodeId loss = tape.mse(tape.param(w), tape.constant(a));
      if (back) tape.backward(loss);
      return tape.value(loss).item();
    };
  }
};

}  // namespace

TEST_CASE("gradient checker validates a closed-form quadratic") {
  QuadraticFixture fx;
  GradCheckResult res = grad_check(fx.objective(), {{"w", &fx.w}});
  CHECK(res.max_rel_err < 1e-8);
  CHECK(res.coords_checked == 12);
  CHECK(res.worst_param == "w");
}

TEST_CASE("analytic quadratic gradient is exactly 2(w - a)") {
  QuadraticFixture fx;
  fx.w.zero_grad();
  fx.objective()(true);
  for (std::size_t i = 0; i < fx.w.numel(); ++i) {
    CHECK(fx.w.grad()[i] == 2.0 * (fx.w.at(i) - fx.a.at(i)));
  }
}

TEST_CASE("step size outside the supported range is rejected") {
  QuadraticFixture fx;
  GradCheckOptions opts;
  opts.eps = 1e-9;
  CHECK_THROWS_AS(grad_check(fx.objective(), {{"w", &fx.w}}, opts), ParameterError);
  opts.eps = 1e-2;
  CHECK_THROWS_AS(grad_check(fx.objective(), {{"w", &fx.w}}, opts), ParameterError);
}

TEST_CASE("non-deterministic objectives are detected, not silently checked") {
  Tensor w({2}, {1.0, 2.0});
  int calls = 0;
  Objective flaky = [&](bool back) {
    Tape tape;
    NodeId loss = tape.sum(tape.mul(tape.param(w), tape.param(w)));
    if (back) tape.backward(loss);
    return tape.value(loss).item() + 1e-9 * static_cast<double>(calls++);
  };
  CHECK_THROWS_AS(grad_check(flaky, {{"w", &w}}), OracleError);
}

TEST_CASE("a corrupted backward pass fails the check loudly") {
  QuadraticFixture fx;
  set_backward_corruption("mse");
  GradCheckResult res = grad_check(fx.objective(), {{"w", &fx.w}});
  set_backward_corruption("");
  CHECK(res.max_rel_err > 1e-3);  // 1% skew dwarfs the fd error floor
}

TEST_CASE("coordinate subsampling caps work per parameter") {
  QuadraticFixture fx;  // 12 coordinates
  GradCheckOptions opts;
  opts.max_coords_per_param = 5;
  opts.subsample_seed = 7;
  GradCheckResult res = grad_check(fx.objective(), {{"w", &fx.w}}, opts);
  CHECK(res.coords_checked == 5);
  CHECK(res.max_rel_err < 1e-8);

  // Different seeds pick different coordinates but all must pass.
  opts.subsample_seed = 8;
  GradCheckResult res2 = grad_check(fx.objective(), {{"w", &fx.w}}, opts);
  CHECK(res2.coords_checked == 5);
  CHECK(res2.max_rel_err < 1e-8);
}

TEST_CASE("multiple parameters are each visited") {
  Rng rng(55);
  Tensor u = Tensor::randn({2, 3}, rng), v = Tensor::randn({3, 2}, rng);
  Objective f = [&](bool back) {
    Tape tape;
    NodeId prod = tape.matmul(tape.param(u), tape.param(v));
    NodeId loss = tape.mse(prod, tape.constant(Tensor::zeros({2, 2})));
    if (back) tape.backward(loss);
    return tape.value(loss).item();
  };
  GradCheckResult res = grad_check(f, {{"u", &u}, {"v", &v}});
  CHECK(res.coords_checked == 12);
  CHECK(res.max_rel_err < 1e-7);
}

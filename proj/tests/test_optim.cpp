//
// Copyright 2026 The fedcal Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//

#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "fedcal/optim.hpp"
#include "fedcal/rng.hpp"

namespace fedcal {
namespace {

TEST(Adam, ZeroGradientGivesZeroDelta) {
  const auto st = AdamState::zeros(3);
  const std::vector<double> g(3, 0.0), lr(3, 0.1);
  const auto r = adam_step(st, g, lr);
  for (double d : r.delta) EXPECT_EQ(d, 0.0);
  EXPECT_EQ(r.state.t, 1);
}

TEST(Adam, FirstStepIsBiasCorrected) {
  // m_hat = 1 and v_hat = 1 at t = 1, so delta = lr / (1 + eps).
  const auto st = AdamState::zeros(1);
  const std::vector<double> g{1.0}, lr{0.1};
  const auto r = adam_step(st, g, lr);
  EXPECT_NEAR(r.delta[0], 0.1 / (1.0 + st.eps), 1e-16);
  EXPECT_GT(r.delta[0], 0.0);  // ascent
}

TEST(Adam, SecondStepMatchesHandComputation) {
  const std::vector<double> lr{0.05};
  const auto r1 = adam_step(AdamState::zeros(1), std::vector<double>{2.0}, lr);
  const auto r2 = adam_step(r1.state, std::vector<double>{-1.0}, lr);
  const double m = 0.9 * 0.2 + 0.1 * -1.0;
  const double v = 0.999 * 0.004 + 0.001 * 1.0;
  const double expected = 0.05 * (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.999 * 0.999)) + 1e-8);
  EXPECT_NEAR(r2.delta[0], expected, 1e-15);
}

TEST(Adam, UsesOneRatePerCoordinate) {
  const std::vector<double> g{1.0, 1.0, 1.0}, lr{0.1, 0.2, 0.3};
  const auto r = adam_step(AdamState::zeros(3), g, lr);
  EXPECT_NEAR(r.delta[1] / r.delta[0], 2.0, 1e-12);
  EXPECT_NEAR(r.delta[2] / r.delta[0], 3.0, 1e-12);
}

TEST(Adam, ZeroMomentsReduceToSignAscent) {
  auto st = AdamState::zeros(4);
  st.beta1 = 0.0;
  st.beta2 = 0.0;
  const std::vector<double> g{3.0, -0.5, 1e-3, -70.0}, lr(4, 0.2);
  auto r = adam_step(st, g, lr);
  for (int rep = 0; rep < 3; ++rep) {
    for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(r.delta[i], 0.2 * (g[i] > 0 ? 1.0 : -1.0), 1e-5);
    r = adam_step(r.state, g, lr);
  }
}

TEST(Adam, DeterministicAndSecondMomentNonnegative) {
  Rng rng(5);
  auto st = AdamState::zeros(6);
  const std::vector<double> lr(6, 0.01);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> g(6);
    for (double& x : g) x = rng.normal();
    const auto a = adam_step(st, g, lr);
    const auto b = adam_step(st, g, lr);
    EXPECT_EQ(a.delta, b.delta);
    EXPECT_EQ(a.state.m, b.state.m);
    for (double v : a.state.v) EXPECT_GE(v, 0.0);
    st = a.state;
  }
}

TEST(Adam, DimensionMismatchIsContractError) {
  const auto st = AdamState::zeros(2);
  EXPECT_THROW(adam_step(st, std::vector<double>{1.0}, std::vector<double>{0.1}), ContractError);
  EXPECT_THROW(adam_step(st, std::vector<double>{1.0, 2.0}, std::vector<double>{0.1}), ContractError);
}

BfgsOptions opts(double tol, int max_iter = 500) {
  BfgsOptions o;
  o.tol = tol;
  o.max_iter = max_iter;
  return o;
}

Evaluation quadratic_1d(std::span<const double> x) { return {-(x[0] - 3) * (x[0] - 3), {-2 * (x[0] - 3)}}; }

TEST(Bfgs, ConcaveQuadraticOptimum) {
  const auto r = bfgs_maximize(quadratic_1d, {0.0}, opts(1e-8));
  EXPECT_TRUE(r.converged);
  EXPECT_NEAR(r.x[0], 3.0, 1e-8);
}

TEST(Bfgs, IllConditionedQuadraticConvergesQuickly) {
  // f = -(100 (x - 1)^2 + (y + 2)^2), condition number 100.
  const Oracle f = [](std::span<const double> x) {
    return Evaluation{-(100 * (x[0] - 1) * (x[0] - 1) + (x[1] + 2) * (x[1] + 2)),
                      {-200 * (x[0] - 1), -2 * (x[1] + 2)}};
  };
  const auto r = bfgs_maximize(f, {0.0, 0.0}, opts(1e-6));
  EXPECT_TRUE(r.converged);
  EXPECT_LT(r.iterations, 50);
  EXPECT_NEAR(r.x[0], 1.0, 1e-6);
  EXPECT_NEAR(r.x[1], -2.0, 1e-5);
}

TEST(Bfgs, AlreadyConvergedReturnsStart) {
  const auto r = bfgs_maximize(quadratic_1d, {3.0}, opts(1e-4));
  EXPECT_TRUE(r.converged);
  EXPECT_EQ(r.iterations, 0);
  EXPECT_EQ(r.evaluations, 1);
  EXPECT_EQ(r.x[0], 3.0);
}

TEST(Bfgs, MaxIterationsIsFlagged) {
  const Oracle f = [](std::span<const double> x) {
    // Rosenbrock, negated.
    const double a = 1 - x[0], b = x[1] - x[0] * x[0];
    return Evaluation{-(a * a + 100 * b * b), {2 * a + 400 * x[0] * b, -200 * b}};
  };
  const auto r = bfgs_maximize(f, {-1.2, 1.0}, opts(1e-12, 3));
  EXPECT_FALSE(r.converged);
  EXPECT_EQ(r.iterations, 3);
}

TEST(Bfgs, ObjectiveIsMonotoneAlongAcceptedSteps) {
  const Oracle f = [](std::span<const double> x) {
    const double a = 1 - x[0], b = x[1] - x[0] * x[0];
    return Evaluation{-(a * a + 100 * b * b), {2 * a + 400 * x[0] * b, -200 * b}};
  };
  std::vector<double> values;
  BfgsOptions opt = opts(1e-8, 500);
  opt.observer = [&](int, const Evaluation& e) { values.push_back(e.value); };
  const auto r = bfgs_maximize(f, {-1.2, 1.0}, opt);
  EXPECT_TRUE(r.converged);
  EXPECT_NEAR(r.x[0], 1.0, 1e-6);
  for (std::size_t i = 1; i < values.size(); ++i) EXPECT_GE(values[i], values[i - 1]);
}

TEST(Bfgs, ProjectionIsAppliedToTrialPoints) {
  // Unconstrained optimum at -2 but x is floored at 0.5: the search stalls at the bound.
  const Oracle f = [](std::span<const double> x) {
    return Evaluation{-(x[0] + 2) * (x[0] + 2), {-2 * (x[0] + 2)}};
  };
  BfgsOptions opt = opts(1e-8, 50);
  opt.project = [](std::vector<double>& x) { x[0] = std::max(x[0], 0.5); };
  const auto r = bfgs_maximize(f, {4.0}, opt);
  EXPECT_FALSE(r.converged);
  EXPECT_DOUBLE_EQ(r.x[0], 0.5);
}

TEST(Bfgs, FallbackStepRescuesBadCurvature) {
  // A concave function whose curvature jumps makes the quasi-Newton
  // direction overshoot; the result must still be the optimum.
  const Oracle f = [](std::span<const double> x) {
    const double d = x[0] - 1;
    const double k = d > 0 ? 1000.0 : 1.0;
    return Evaluation{-k * d * d, {-2 * k * d}};
  };
  const auto r = bfgs_maximize(f, {-5.0}, opts(1e-6, 200));
  EXPECT_TRUE(r.converged);
  EXPECT_NEAR(r.x[0], 1.0, 1e-5);
}

TEST(Bfgs, RejectsNonPositiveTolerance) {
  EXPECT_THROW(bfgs_maximize(quadratic_1d, {0.0}, opts(0.0)), ConfigError);
}

TEST(BfgsStateTest, StaysSymmetricAndHonorsCurvatureGuard) {
  Rng rng(7);
  BfgsState h(5);
  for (int it = 0; it < 40; ++it) {
    std::vector<double> s(5), y(5);
    for (int i = 0; i < 5; ++i) {
      s[i] = rng.normal();
      y[i] = (i + 1) * s[i] + 0.1 * rng.normal();
    }
    h.update(s, y);
    for (int i = 0; i < 5; ++i) {
      for (int j = 0; j < 5; ++j) EXPECT_EQ(h.at(i, j), h.at(j, i));
    }
  }
  const int before = h.updates();
  const std::vector<double> s{1, 0, 0, 0, 0}, y{-1, 0, 0, 0, 0};
  EXPECT_FALSE(h.update(s, y));
  const std::vector<double> tiny{1e-11, 0, 0, 0, 0};
  EXPECT_FALSE(h.update(s, tiny));
  EXPECT_EQ(h.updates(), before);
}

TEST(Bfgs, Deterministic) {
  const Oracle f = [](std::span<const double> x) {
    const double a = 1 - x[0], b = x[1] - x[0] * x[0];
    return Evaluation{-(a * a + 100 * b * b), {2 * a + 400 * x[0] * b, -200 * b}};
  };
  const auto a = bfgs_maximize(f, {-1.2, 1.0});
  const auto b = bfgs_maximize(f, {-1.2, 1.0});
  EXPECT_EQ(a.x, b.x);
  EXPECT_EQ(a.evaluations, b.evaluations);
}

}  // namespace
}  // namespace fedcal

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

#include "fedcal/accountant.hpp"
#include "fedcal/rng.hpp"

namespace fedcal {
namespace {

// mpmath, 50 digits, binomial sum for (q, sigma, alpha) = (0.1, 2, 8).
constexpr double kRdpReference = 0.013725430103219918;
// min over alpha in 2..64 of alpha/2 + ln(1e6)/(alpha - 1), attained at alpha = 6.
constexpr double kWorkedEpsilon = 5.763102111592855;

TEST(Rdp, FullSamplingIsGaussianMechanism) {
  for (double sigma : {0.5, 1.0, 2.0, 7.5}) {
    for (int a = 2; a <= 64; ++a) {
      EXPECT_NEAR(rdp_subsampled_gaussian(1.0, sigma, a), a / (2 * sigma * sigma), 1e-12);
    }
  }
}

TEST(Rdp, ZeroSamplingIsFree) { EXPECT_EQ(rdp_subsampled_gaussian(0.0, 1.0, 10), 0.0); }

TEST(Rdp, HighPrecisionReference) {
  EXPECT_NEAR(rdp_subsampled_gaussian(0.1, 2.0, 8), kRdpReference, 1e-15);
}

TEST(Rdp, MonotoneInRateAndOrder) {
  Rng rng(1);
  for (int rep = 0; rep < 300; ++rep) {
    const double q = rng.uniform(0.01, 0.99);
    const double sigma = rng.uniform(0.5, 5.0);
    const int a = 2 + static_cast<int>(rng.below(60));
    const double v = rdp_subsampled_gaussian(q, sigma, a);
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, rdp_subsampled_gaussian(std::min(1.0, q + 0.01), sigma, a) + 1e-15);
    EXPECT_LE(v, rdp_subsampled_gaussian(q, sigma, a + 1) + 1e-15);
  }
}

TEST(Rdp, LargeOrdersStayFinite) {
  EXPECT_TRUE(std::isfinite(rdp_subsampled_gaussian(0.5, 0.3, 64)));
}

TEST(Rdp, RejectsBadArguments) {
  EXPECT_THROW(rdp_subsampled_gaussian(0.5, 1.0, 1), ContractError);
  EXPECT_THROW(rdp_subsampled_gaussian(1.5, 1.0, 2), ContractError);
  EXPECT_THROW(rdp_subsampled_gaussian(0.5, 0.0, 2), ContractError);
}

TEST(Compose, IdentityLinearityAndOrderIndependence) {
  const auto a = rdp_curve(0.3, 1.2);
  const auto b = rdp_curve(0.7, 2.0);
  const auto c = rdp_curve(0.1, 0.8);
  const std::vector<RdpCurve> one{a};
  EXPECT_EQ(compose(one).eps, a.eps);
  const std::vector<RdpCurve> five(5, a);
  const auto f = compose(five);
  for (std::size_t i = 0; i < a.eps.size(); ++i) EXPECT_NEAR(f.eps[i], 5 * a.eps[i], 1e-12 * f.eps[i]);
  const std::vector<RdpCurve> abc{a, b, c}, cab{c, a, b};
  const auto x = compose(abc), y = compose(cab);
  for (std::size_t i = 0; i < a.eps.size(); ++i) EXPECT_NEAR(x.eps[i], y.eps[i], 1e-14 * x.eps[i]);
  const std::vector<RdpCurve> ab{a, b};
  const std::vector<RdpCurve> ab_c{compose(ab), c};
  const auto z = compose(ab_c);
  for (std::size_t i = 0; i < a.eps.size(); ++i) EXPECT_NEAR(x.eps[i], z.eps[i], 1e-14 * x.eps[i]);
}

TEST(Compose, MismatchedGridsAreRejected) {
  const std::vector<RdpCurve> bad{rdp_curve(0.3, 1.0), rdp_curve(0.3, 1.0, {2, 3, 4})};
  EXPECT_THROW(compose(bad), ContractError);
  EXPECT_THROW(compose(std::vector<RdpCurve>{}), ContractError);
}

TEST(EpsDelta, WorkedExample) {
  const auto curve = rdp_curve(1.0, 1.0);
  EXPECT_NEAR(to_eps_delta(curve, 1e-6), kWorkedEpsilon, 1e-9);
  EXPECT_NEAR(kWorkedEpsilon, 3.0 + std::log(1e6) / 5.0, 1e-15);
}

TEST(EpsDelta, DeltaNearOneApproachesSmallestRdp) {
  const auto curve = rdp_curve(0.2, 1.5);
  const double eps = to_eps_delta(curve, 1.0 - 1e-12);
  EXPECT_NEAR(eps, curve.eps.front(), 1e-9);
}

TEST(EpsDelta, DoublingTheCurveIncreasesEpsilon) {
  auto curve = rdp_curve(0.4, 1.1);
  const double before = to_eps_delta(curve, 1e-5);
  for (double& e : curve.eps) e *= 2;
  EXPECT_GT(to_eps_delta(curve, 1e-5), before);
  EXPECT_THROW(to_eps_delta(curve, 0.0), ContractError);
  EXPECT_THROW(to_eps_delta(curve, 1.0), ContractError);
}

TEST(Ledger, ComposedIsSumOfRounds) {
  PrivacyLedger ledger(1e-6);
  EXPECT_EQ(ledger.rounds(), 0);
  EXPECT_EQ(ledger.epsilon(), 0.0);
  ledger.record_round(0.5, 1.0);
  ledger.record_round(0.5, 1.0);
  ledger.record_round(0.2, 2.0);
  const auto one = rdp_curve(0.5, 1.0), two = rdp_curve(0.2, 2.0);
  const auto c = ledger.composed();
  for (std::size_t i = 0; i < c.eps.size(); ++i) EXPECT_NEAR(c.eps[i], 2 * one.eps[i] + two.eps[i], 1e-13);
  EXPECT_DOUBLE_EQ(ledger.epsilon(), to_eps_delta(c, 1e-6));
  EXPECT_EQ(ledger.rounds(), 3);
}

TEST(Ledger, EpsilonMonotoneOverRandomConfigs) {
  Rng rng(2);
  for (int rep = 0; rep < 1000; ++rep) {
    const double q = rng.uniform(0.01, 0.9);
    const double sigma = rng.uniform(0.5, 4.0);
    const int rounds = 1 + static_cast<int>(rng.below(50));
    const double eps = ledger_for(q, sigma, rounds, 1e-6).epsilon();
    EXPECT_GE(ledger_for(q, sigma * 0.9, rounds, 1e-6).epsilon(), eps - 1e-12);
    EXPECT_GE(ledger_for(q + 0.05, sigma, rounds, 1e-6).epsilon(), eps - 1e-12);
    EXPECT_GE(ledger_for(q, sigma, rounds + 1, 1e-6).epsilon(), eps - 1e-12);
  }
}

}  // namespace
}  // namespace fedcal

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

#pragma once

// Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//
// Per round, for integer order alpha >= 2 we use the binomial upper bound
//   eps(alpha) = log( sum_k C(alpha,k) (1-q)^(alpha-k) q^k exp((k^2-k)/(2 sigma^2)) ) / (alpha-1)
// evaluated as a log-sum-exp over log-terms. Curves compose by summation and
// convert to (eps, delta) with eps = min_alpha eps(alpha) + log(1/delta)/(alpha-1).

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "fedcal/errors.hpp"
#include "fedcal/numeric.hpp"

namespace fedcal {

inline std::vector<int> default_rdp_orders() {
  std::vector<int> orders;
  for (int a = 2; a <= 64; ++a) orders.push_back(a);
  return orders;
}

struct RdpCurve {
  std::vector<int> orders;
  std::vector<double> eps;

  static RdpCurve zeros(std::vector<int> orders) {
    RdpCurve c;
    c.eps.assign(orders.size(), 0.0);
    c.orders = std::move(orders);
    return c;
  }
};

inline double log_binomial(int n, int k) {
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

inline double rdp_subsampled_gaussian(double q, double sigma, int alpha) {
  if (alpha < 2) throw ContractError("RDP order must be an integer >= 2");
  if (!(q >= 0.0 && q <= 1.0)) throw ContractError("sampling rate must be in [0, 1]");
  if (!(sigma > 0.0)) throw ContractError("noise multiplier must be positive");
  if (q == 0.0) return 0.0;
  const double log_q = std::log(q);
  const double log_1mq = q < 1.0 ? std::log1p(-q) : -std::numeric_limits<double>::infinity();
  std::vector<double> terms;
  terms.reserve(alpha + 1);
  for (int k = 0; k <= alpha; ++k) {
    if (q == 1.0 && k < alpha) continue;
    const double lt = (k < alpha ? log_binomial(alpha, k) + (alpha - k) * log_1mq : 0.0) +
                      k * log_q + (static_cast<double>(k) * k - k) / (2.0 * sigma * sigma);
    terms.push_back(lt);
  }
  const double v = log_sum_exp(terms) / (alpha - 1);
  return v > 0.0 ? v : 0.0;  // the sum is >= 1 analytically
}

inline RdpCurve rdp_curve(double q, double sigma, std::vector<int> orders = default_rdp_orders()) {
  RdpCurve c;
  c.eps.reserve(orders.size());
  for (int a : orders) c.eps.push_back(rdp_subsampled_gaussian(q, sigma, a));
  c.orders = std::move(orders);
  return c;
}

inline RdpCurve compose(std::span<const RdpCurve> curves) {
  if (curves.empty()) throw ContractError("compose needs at least one curve");
  RdpCurve out = RdpCurve::zeros(curves.front().orders);
  for (const auto& c : curves) {
    if (c.orders != out.orders || c.eps.size() != out.eps.size()) {
      throw ContractError("RDP curves have different order grids");
    }
    for (std::size_t i = 0; i < c.eps.size(); ++i) out.eps[i] += c.eps[i];
  }
  return out;
}

inline double to_eps_delta(const RdpCurve& curve, double delta) {
  if (!(delta > 0.0 && delta < 1.0)) throw ContractError("delta must be in (0, 1)");
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < curve.orders.size(); ++i) {
    const double v = curve.eps[i] - std::log(delta) / (curve.orders[i] - 1);
    if (v < best) best = v;
  }
  return best;
}

// Per-round spend of one DP calibration. Only rounds that released a noisy
// aggregate are recorded; with no rounds the guarantee is epsilon = 0.
class PrivacyLedger {
 public:
  explicit PrivacyLedger(double delta = 1e-6, std::vector<int> orders = default_rdp_orders())
      : delta_(delta), orders_(std::move(orders)) {}

  void record_round(double q, double sigma) { rounds_.push_back(rdp_curve(q, sigma, orders_)); }

  int rounds() const { return static_cast<int>(rounds_.size()); }
  double delta() const { return delta_; }
  const std::vector<RdpCurve>& per_round() const { return rounds_; }

  RdpCurve composed() const {
    if (rounds_.empty()) return RdpCurve::zeros(orders_);
    return compose(rounds_);
  }

  double epsilon() const {
    if (rounds_.empty()) return 0.0;
    return to_eps_delta(composed(), delta_);
  }

 private:
  double delta_;
  std::vector<int> orders_;
  std::vector<RdpCurve> rounds_;
};

// Ledger for `rounds` identical rounds, as reported by the accountant command.
inline PrivacyLedger ledger_for(double q, double sigma, int rounds, double delta) {
  if (rounds < 0) throw ContractError("rounds must be nonnegative");
  PrivacyLedger ledger(delta);
  for (int r = 0; r < rounds; ++r) ledger.record_round(q, sigma);
  return ledger;
}

}  // namespace fedcal

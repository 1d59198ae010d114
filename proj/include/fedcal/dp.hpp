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

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "fedcal/errors.hpp"
#include "fedcal/numeric.hpp"
#include "fedcal/rng.hpp"

namespace fedcal {

struct DPConfig {
  double sample_rate = 0.5;  // Poisson inclusion probability q_s
  double clip_norm = 1.0;    // C
  double noise_multiplier = 1.0;  // sigma; noise SD is sigma * C
  double delta = 1e-6;
  int max_rounds = 300;
  double tau_a = 1.0;
  double tau_beta = 1.0;
  double tau_s = 1.0;

  void validate() const {
    if (!(sample_rate > 0.0 && sample_rate <= 1.0)) throw ConfigError("dp.q_s must be in (0, 1]");
    if (!(clip_norm > 0.0)) throw ConfigError("dp.C must be positive");
    if (!(noise_multiplier > 0.0)) throw ConfigError("dp.sigma must be positive");
    if (!(delta > 0.0 && delta < 1.0)) throw ConfigError("dp.delta must be in (0, 1)");
    if (max_rounds < 1) throw ConfigError("dp.R must be at least 1");
    if (!(tau_a > 0.0 && tau_beta > 0.0 && tau_s > 0.0)) throw ConfigError("dp taus must be positive");
  }
};

// Indices kept by independent Bernoulli(q) draws, one uniform per index.
inline std::vector<std::size_t> poisson_subsample(std::size_t n, double q, Rng& rng) {
  if (!(q > 0.0 && q <= 1.0)) throw ContractError("sampling rate must be in (0, 1]");
  std::vector<std::size_t> kept;
  kept.reserve(static_cast<std::size_t>(q * static_cast<double>(n)) + 1);
  for (std::size_t i = 0; i < n; ++i) {
    if (rng.bernoulli(q)) kept.push_back(i);
  }
  return kept;
}

// Scales g onto the l2 ball of radius c; leaves it untouched when inside.
inline void clip_in_place(std::span<double> g, double c) {
  if (!(c > 0.0)) throw ContractError("clip norm must be positive");
  const double norm = l2_norm(g);
  if (norm <= c) return;
  const double scale = c / norm;
  for (double& x : g) x *= scale;
}

inline std::vector<double> clip(std::span<const double> g, double c) {
  std::vector<double> out(g.begin(), g.end());
  clip_in_place(out, c);
  return out;
}

// G + N(0, (sigma C)^2 I)
inline std::vector<double> gaussian_mechanism(std::span<const double> g, double sigma, double c,
                                              Rng& rng) {
  if (!(sigma > 0.0) || !(c > 0.0)) throw ContractError("sigma and C must be positive");
  const double sd = sigma * c;
  std::vector<double> out(g.begin(), g.end());
  for (double& x : out) x += sd * rng.normal();
  return out;
}

// Ridge term (a / tau_a^2, beta / tau_beta^2, s / tau_s^2) laid out like the
// gradient. The MAP gradient is the noisy sum minus this vector.
inline std::vector<double> map_penalty(std::span<const double> a, std::span<const double> beta,
                                       std::span<const double> s, double tau_a, double tau_beta,
                                       double tau_s) {
  std::vector<double> out;
  out.reserve(a.size() + beta.size() + s.size());
  for (double x : a) out.push_back(x / (tau_a * tau_a));
  for (double x : beta) out.push_back(x / (tau_beta * tau_beta));
  for (double x : s) out.push_back(x / (tau_s * tau_s));
  return out;
}

}  // namespace fedcal

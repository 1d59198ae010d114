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
#include <functional>
#include <span>
#include <vector>

#include "fedcal/errors.hpp"
#include "fedcal/numeric.hpp"

namespace fedcal {

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState zeros(std::size_t dim) {
    AdamState s;
    s.m.assign(dim, 0.0);
    s.v.assign(dim, 0.0);
    return s;
  }
};

struct AdamStep {
  std::vector<double> delta;
  AdamState state;
};

// One bias-corrected Adam step for maximization: the returned delta is to be
// ADDED to the parameters. lr holds one rate per coordinate.
inline AdamStep adam_step(const AdamState& state, std::span<const double> grad,
                          std::span<const double> lr) {
  if (grad.size() != state.m.size() || grad.size() != state.v.size() || lr.size() != grad.size()) {
    throw ContractError("adam_step: dimension mismatch");
  }
  AdamStep out{std::vector<double>(grad.size()), state};
  AdamState& s = out.state;
  s.t += 1;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.t));
  for (std::size_t i = 0; i < grad.size(); ++i) {
    s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * grad[i];
    s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * grad[i] * grad[i];
    const double m_hat = s.m[i] / c1;
    const double v_hat = s.v[i] / c2;
    out.delta[i] = lr[i] * m_hat / (std::sqrt(v_hat) + s.eps);
  }
  return out;
}

struct Evaluation {
  double value = 0.0;
  std::vector<double> gradient;
};

using Oracle = std::function<Evaluation(std::span<const double>)>;

// Dense inverse-Hessian approximation of the negated objective.
class BfgsState {
 public:
  explicit BfgsState(std::size_t dim = 0) { reset(dim); }

  void reset(std::size_t dim) {
    dim_ = dim;
    h_.assign(dim * dim, 0.0);
    for (std::size_t i = 0; i < dim; ++i) h_[i * dim + i] = 1.0;
    updates_ = 0;
  }

  std::size_t dim() const { return dim_; }
  double at(std::size_t i, std::size_t j) const { return h_[i * dim_ + j]; }
  int updates() const { return updates_; }

  // Ascent direction H * g.
  std::vector<double> direction(std::span<const double> g) const {
    std::vector<double> d(dim_, 0.0);
    for (std::size_t i = 0; i < dim_; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < dim_; ++j) acc += h_[i * dim_ + j] * g[j];
      d[i] = acc;
    }
    return d;
  }

  // step = x_new - x_old; y = g_old - g_new (gradient of the negated
  // objective). Returns false when the curvature guard skips the update.
  bool update(std::span<const double> step, std::span<const double> y, double guard = 1e-10) {
    double sy = 0.0;
    for (std::size_t i = 0; i < dim_; ++i) sy += step[i] * y[i];
    if (!(sy > guard)) return false;
    const double rho = 1.0 / sy;
    if (updates_ == 0) {
      // Scale the identity before the first update.
      double yy = 0.0;
      for (std::size_t i = 0; i < dim_; ++i) yy += y[i] * y[i];
      const double gamma = sy / yy;
      for (double& h : h_) h *= gamma;
    }
    std::vector<double> hy(dim_, 0.0);
    for (std::size_t i = 0; i < dim_; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < dim_; ++j) acc += h_[i * dim_ + j] * y[j];
      hy[i] = acc;
    }
    double yhy = 0.0;
    for (std::size_t i = 0; i < dim_; ++i) yhy += y[i] * hy[i];
    // H+ = H - rho (s hy' + hy s') + (rho^2 y'Hy + rho) s s'
    const double coef = rho * rho * yhy + rho;
    for (std::size_t i = 0; i < dim_; ++i) {
      for (std::size_t j = i; j < dim_; ++j) {
        const double v = h_[i * dim_ + j] - rho * (step[i] * hy[j] + hy[i] * step[j]) +
                         coef * step[i] * step[j];
        h_[i * dim_ + j] = v;
        h_[j * dim_ + i] = v;
      }
    }
    ++updates_;
    return true;
  }

 private:
  std::size_t dim_ = 0;
  std::vector<double> h_;
  int updates_ = 0;
};

struct BfgsOptions {
  double tol = 1e-4;  // on the sup-norm of the gradient
  int max_iter = 500;
  double initial_step = 1.0;
  double shrink = 0.5;
  double armijo = 1e-4;
  int max_backtracks = 20;
  double curvature_guard = 1e-10;
  // Applied to every trial point (bounds, identification constraints).
  std::function<void(std::vector<double>&)> project;
  // Called after every accepted step.
  std::function<void(int iteration, const Evaluation&)> observer;
};

struct BfgsResult {
  std::vector<double> x;
  Evaluation at;
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
  int fallback_steps = 0;     // iterations that needed the gradient fallback
  bool stalled = false;       // even the fallback could not increase the objective
  BfgsState state;
};

namespace detail {

// Backtracking along d; returns true and fills (x_out, eval_out) on success.
inline bool armijo_search(const Oracle& f, const BfgsOptions& opt, std::span<const double> x,
                          const Evaluation& cur, std::span<const double> d, double t0,
                          std::vector<double>& x_out, Evaluation& eval_out, int& evaluations) {
  double slope = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) slope += cur.gradient[i] * d[i];
  if (!(slope > 0.0)) return false;
  double t = t0;
  for (int k = 0; k <= opt.max_backtracks; ++k, t *= opt.shrink) {
    x_out.assign(x.begin(), x.end());
    for (std::size_t i = 0; i < x.size(); ++i) x_out[i] += t * d[i];
    if (opt.project) opt.project(x_out);
    eval_out = f(x_out);
    ++evaluations;
    if (std::isfinite(eval_out.value) && eval_out.value >= cur.value + opt.armijo * t * slope) {
      return true;
    }
  }
  return false;
}

}  // namespace detail

// Quasi-Newton maximization with Armijo backtracking. When the BFGS
// direction fails the line search, the inverse Hessian is reset and a
// scaled gradient step is tried instead; if that also fails the run stops
// with stalled = true.
inline BfgsResult bfgs_maximize(const Oracle& f, std::vector<double> x0,
                                const BfgsOptions& opt = {}) {
  if (!(opt.tol > 0.0)) throw ConfigError("bfgs tolerance must be positive");
  BfgsResult res;
  res.state.reset(x0.size());
  if (opt.project) opt.project(x0);
  res.x = std::move(x0);
  res.at = f(res.x);
  res.evaluations = 1;
  if (res.at.gradient.size() != res.x.size()) throw ContractError("oracle gradient has wrong size");

  std::vector<double> x_new;
  Evaluation e_new;
  while (true) {
    if (sup_norm(res.at.gradient) < opt.tol) {
      res.converged = true;
      break;
    }
    if (res.iterations >= opt.max_iter) break;

    auto d = res.state.direction(res.at.gradient);
    bool ok = detail::armijo_search(f, opt, res.x, res.at, d, opt.initial_step, x_new, e_new,
                                    res.evaluations);
    if (!ok) {
      ++res.fallback_steps;
      res.state.reset(res.x.size());
      d = res.at.gradient;
      const double t0 = 0.1 / std::max(sup_norm(d), 1.0);
      ok = detail::armijo_search(f, opt, res.x, res.at, d, t0, x_new, e_new, res.evaluations);
      if (!ok) {
        res.stalled = true;
        break;
      }
    }
    ++res.iterations;

    std::vector<double> step(res.x.size());
    std::vector<double> y(res.x.size());
    for (std::size_t i = 0; i < step.size(); ++i) {
      step[i] = x_new[i] - res.x[i];
      y[i] = res.at.gradient[i] - e_new.gradient[i];
    }
    res.state.update(step, y, opt.curvature_guard);
    res.x = x_new;
    res.at = e_new;
    if (opt.observer) opt.observer(res.iterations, res.at);
  }
  return res;
}

}  // namespace fedcal

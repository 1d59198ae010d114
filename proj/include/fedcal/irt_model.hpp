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

// Measurement-model math for dichotomous (2PL) and polytomous (partial
// credit) items with an additive school effect on the latent scale.
//
// Every likelihood is evaluated over a fixed quadrature grid. Per-node item
// quantities are computed once per (items, s, grid) triple in a node table;
// the per-student routines then only index into the table, which is what
// makes school-side gradient passes cheap.

#include <cmath>
#include <concepts>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "fedcal/errors.hpp"
#include "fedcal/numeric.hpp"

namespace fedcal {

struct ItemParams2PL {
  double alpha = 1.0;  // discrimination
  double beta = 0.0;   // difficulty
};

// Partial credit item with C = steps.size() + 1 ordered categories.
struct ItemParamsPCM {
  double alpha = 1.0;
  std::vector<double> steps;

  int categories() const { return static_cast<int>(steps.size()) + 1; }
};

enum class AlphaScale {
  kNatural,  // gradient with respect to alpha
  kLog,      // gradient with respect to a = log(alpha)
};

namespace detail {

inline void require_finite(double x, const char* what) {
  if (!std::isfinite(x)) throw DomainError(std::string(what) + " must be finite");
}

inline void require_alpha(double alpha) {
  require_finite(alpha, "alpha");
  if (alpha <= 0.0) throw DomainError("alpha must be positive");
}

}  // namespace detail

// P(x = 1 | theta) = sigmoid(alpha * (theta + s - beta)).
inline double prob_2pl(double alpha, double beta, double s, double theta) {
  detail::require_alpha(alpha);
  detail::require_finite(beta, "beta");
  detail::require_finite(s, "s");
  detail::require_finite(theta, "theta");
  return sigmoid(alpha * (theta + s - beta));
}

// Category probabilities of a partial credit item. The score-z numerator is
// exp(sum_{h<=z} alpha * (theta + s - step_h)), with the empty sum for z = 0.
inline std::vector<double> prob_pcm(const ItemParamsPCM& item, double s, double theta) {
  detail::require_alpha(item.alpha);
  detail::require_finite(s, "s");
  detail::require_finite(theta, "theta");
  if (item.steps.empty()) throw DomainError("partial credit item needs at least one step");
  std::vector<double> eta(item.steps.size() + 1, 0.0);
  for (std::size_t h = 0; h < item.steps.size(); ++h) {
    detail::require_finite(item.steps[h], "step");
    eta[h + 1] = eta[h] + item.alpha * (theta + s - item.steps[h]);
  }
  const double lse = log_sum_exp(eta);
  for (double& e : eta) e = std::exp(e - lse);
  return eta;
}

// Equally spaced ability nodes on [-theta0, theta0] with weights equal to
// the standard normal mass of each node's cell. Weights are deliberately not
// renormalized; they sum to slightly less than one.
struct QuadratureGrid {
  double theta0 = 4.0;
  std::vector<double> nodes;
  std::vector<double> weights;
  std::vector<double> log_weights;

  std::size_t size() const { return nodes.size(); }
  double spacing() const { return 2.0 * theta0 / static_cast<double>(nodes.size() - 1); }
};

inline QuadratureGrid build_grid(double theta0 = 4.0, int q = 21) {
  if (q < 2) throw ConfigError("quadrature grid needs at least 2 nodes");
  if (!(theta0 > 0.0) || !std::isfinite(theta0)) throw ConfigError("theta0 must be positive");
  QuadratureGrid g;
  g.theta0 = theta0;
  const double h = 2.0 * theta0 / static_cast<double>(q - 1);
  g.nodes.resize(q);
  g.weights.resize(q);
  g.log_weights.resize(q);
  for (int n = 0; n < q; ++n) {
    const double v = n == q - 1 ? theta0 : -theta0 + h * n;
    g.nodes[n] = v;
    // Difference on the tail closer to v keeps relative precision far out.
    const double lo = v - h / 2.0;
    const double hi = v + h / 2.0;
    const double a = v > 0.0 ? normal_cdf(-lo) - normal_cdf(-hi) : normal_cdf(hi) - normal_cdf(lo);
    g.weights[n] = a;
    g.log_weights[n] = std::log(a);
  }
  return g;
}

// One school's responses: N x J integer matrix, row-major.
class ResponseMatrix {
 public:
  ResponseMatrix() = default;

  explicit ResponseMatrix(std::vector<int> categories) : categories_(std::move(categories)) {
    for (int c : categories_) {
      if (c < 2) throw ContractError("every item needs at least 2 categories");
    }
  }

  ResponseMatrix(std::vector<int> categories, std::vector<int> data)
      : ResponseMatrix(std::move(categories)) {
    if (!categories_.empty() && data.size() % categories_.size() != 0) {
      throw ContractError("response data is not rectangular");
    }
    if (categories_.empty() && !data.empty()) throw ContractError("response data without items");
    data_ = std::move(data);
    for (std::size_t i = 0; i < rows(); ++i) check_row(row(i));
  }

  static ResponseMatrix dichotomous(std::size_t n_items, std::vector<int> data = {}) {
    return ResponseMatrix(std::vector<int>(n_items, 2), std::move(data));
  }

  std::size_t rows() const { return categories_.empty() ? 0 : data_.size() / categories_.size(); }
  std::size_t items() const { return categories_.size(); }
  const std::vector<int>& categories() const { return categories_; }
  const std::vector<int>& data() const { return data_; }

  std::span<const int> row(std::size_t i) const {
    return std::span<const int>(data_).subspan(i * items(), items());
  }
  int at(std::size_t i, std::size_t j) const { return data_[i * items() + j]; }

  void add_row(std::span<const int> r) {
    check_row(r);
    data_.insert(data_.end(), r.begin(), r.end());
  }

  void set_row(std::size_t i, std::span<const int> r) {
    check_row(r);
    std::copy(r.begin(), r.end(), data_.begin() + static_cast<std::ptrdiff_t>(i * items()));
  }

  void check_row(std::span<const int> r) const {
    if (r.size() != items()) throw ContractError("row length does not match item count");
    for (std::size_t j = 0; j < r.size(); ++j) {
      if (r[j] < 0 || r[j] >= categories_[j]) throw ContractError("response out of category range");
    }
  }

 private:
  std::vector<int> categories_;
  std::vector<int> data_;
};

// Per-student score vector. For partial credit items d_beta is the
// concatenation of every item's step gradients.
struct PerStudentGradient {
  std::vector<double> d_alpha;
  std::vector<double> d_beta;
  double d_s = 0.0;
  AlphaScale scale = AlphaScale::kNatural;

  // [d_alpha | d_beta | d_s]
  std::vector<double> flatten() const {
    std::vector<double> out(d_alpha);
    out.insert(out.end(), d_beta.begin(), d_beta.end());
    out.push_back(d_s);
    return out;
  }
};

// Per-(item, node) quantities of the 2PL model for a fixed school effect.
class NodeTable2PL {
 public:
  NodeTable2PL(std::span<const ItemParams2PL> items, double s, const QuadratureGrid& grid)
      : n_items_(items.size()), n_nodes_(grid.size()), s_(s), grid_(&grid) {
    detail::require_finite(s, "s");
    const std::size_t cells = n_items_ * n_nodes_;
    alpha_.resize(n_items_);
    prob_.resize(cells);
    log_p1_.resize(cells);
    log_p0_.resize(cells);
    centered_.resize(cells);
    for (std::size_t j = 0; j < n_items_; ++j) {
      detail::require_alpha(items[j].alpha);
      detail::require_finite(items[j].beta, "beta");
      alpha_[j] = items[j].alpha;
      for (std::size_t n = 0; n < n_nodes_; ++n) {
        const std::size_t c = j * n_nodes_ + n;
        centered_[c] = grid.nodes[n] + s - items[j].beta;
        const double t = items[j].alpha * centered_[c];
        prob_[c] = sigmoid(t);
        log_p1_[c] = log_sigmoid(t);
        log_p0_[c] = log_sigmoid(-t);
      }
    }
  }

  std::size_t items() const { return n_items_; }
  std::size_t nodes() const { return n_nodes_; }
  std::size_t beta_size() const { return n_items_; }
  const QuadratureGrid& grid() const { return *grid_; }
  double school_effect() const { return s_; }
  double alpha(std::size_t j) const { return alpha_[j]; }

  double log_prob(std::size_t j, std::size_t n, int x) const {
    const std::size_t c = j * n_nodes_ + n;
    return x == 1 ? log_p1_[c] : log_p0_[c];
  }
  double prob(std::size_t j, std::size_t n) const { return prob_[j * n_nodes_ + n]; }
  double centered(std::size_t j, std::size_t n) const { return centered_[j * n_nodes_ + n]; }

  void check_row(std::span<const int> row) const {
    if (row.size() != n_items_) throw ContractError("row length does not match item count");
    for (int x : row) {
      if (x != 0 && x != 1) throw ContractError("2PL responses must be 0 or 1");
    }
  }

 private:
  std::size_t n_items_;
  std::size_t n_nodes_;
  double s_;
  const QuadratureGrid* grid_;
  std::vector<double> alpha_;
  std::vector<double> prob_;
  std::vector<double> log_p1_;
  std::vector<double> log_p0_;
  std::vector<double> centered_;
};

// Per-(item, node) quantities of the partial credit model. Besides category
// log-probabilities it keeps the moments needed by the analytic score:
//   cum(c)  = sum_{h<=c} (V + s - step_h)   (d eta_c / d alpha)
//   E[c], E[cum], and tail(h) = P(score >= h).
class NodeTablePCM {
 public:
  NodeTablePCM(std::span<const ItemParamsPCM> items, double s, const QuadratureGrid& grid)
      : n_items_(items.size()), n_nodes_(grid.size()), s_(s), grid_(&grid) {
    detail::require_finite(s, "s");
    cat_offset_.resize(n_items_ + 1, 0);
    step_offset_.resize(n_items_ + 1, 0);
    alpha_.resize(n_items_);
    categories_.resize(n_items_);
    for (std::size_t j = 0; j < n_items_; ++j) {
      detail::require_alpha(items[j].alpha);
      if (items[j].steps.empty()) throw DomainError("partial credit item needs at least one step");
      for (double b : items[j].steps) detail::require_finite(b, "step");
      alpha_[j] = items[j].alpha;
      categories_[j] = items[j].categories();
      cat_offset_[j + 1] = cat_offset_[j] + categories_[j] * n_nodes_;
      step_offset_[j + 1] = step_offset_[j] + (categories_[j] - 1);
    }
    log_prob_.resize(cat_offset_.back());
    cum_.resize(cat_offset_.back());
    tail_.resize(step_offset_.back() * n_nodes_);
    mean_score_.resize(n_items_ * n_nodes_);
    mean_cum_.resize(n_items_ * n_nodes_);

    std::vector<double> eta;
    for (std::size_t j = 0; j < n_items_; ++j) {
      const int cats = categories_[j];
      eta.assign(cats, 0.0);
      for (std::size_t n = 0; n < n_nodes_; ++n) {
        const std::size_t base = cat_offset_[j] + n * cats;
        cum_[base] = 0.0;
        for (int c = 1; c < cats; ++c) {
          const double centered = grid.nodes[n] + s - items[j].steps[c - 1];
          cum_[base + c] = cum_[base + c - 1] + centered;
          eta[c] = eta[c - 1] + items[j].alpha * centered;
        }
        const double lse = log_sum_exp(eta);
        double e_score = 0.0;
        double e_cum = 0.0;
        for (int c = 0; c < cats; ++c) {
          log_prob_[base + c] = eta[c] - lse;
          const double p = std::exp(eta[c] - lse);
          e_score += c * p;
          e_cum += p * cum_[base + c];
        }
        mean_score_[j * n_nodes_ + n] = e_score;
        mean_cum_[j * n_nodes_ + n] = e_cum;
        // tail(h) accumulated from the top category down
        double tail = 0.0;
        for (int h = cats - 1; h >= 1; --h) {
          tail += std::exp(log_prob_[base + h]);
          tail_[(step_offset_[j] + h - 1) * n_nodes_ + n] = tail;
        }
      }
    }
  }

  std::size_t items() const { return n_items_; }
  std::size_t nodes() const { return n_nodes_; }
  std::size_t beta_size() const { return step_offset_.back(); }
  std::size_t step_offset(std::size_t j) const { return step_offset_[j]; }
  int categories(std::size_t j) const { return categories_[j]; }
  const QuadratureGrid& grid() const { return *grid_; }
  double school_effect() const { return s_; }
  double alpha(std::size_t j) const { return alpha_[j]; }

  double log_prob(std::size_t j, std::size_t n, int x) const {
    return log_prob_[cat_offset_[j] + n * categories_[j] + x];
  }
  double cum(std::size_t j, std::size_t n, int c) const {
    return cum_[cat_offset_[j] + n * categories_[j] + c];
  }
  double mean_score(std::size_t j, std::size_t n) const { return mean_score_[j * n_nodes_ + n]; }
  double mean_cum(std::size_t j, std::size_t n) const { return mean_cum_[j * n_nodes_ + n]; }
  // P(score >= h | V(n)) for h = 1..C_j - 1
  double tail(std::size_t j, int h, std::size_t n) const {
    return tail_[(step_offset_[j] + h - 1) * n_nodes_ + n];
  }

  void check_row(std::span<const int> row) const {
    if (row.size() != n_items_) throw ContractError("row length does not match item count");
    for (std::size_t j = 0; j < n_items_; ++j) {
      if (row[j] < 0 || row[j] >= categories_[j]) {
        throw ContractError("response out of category range");
      }
    }
  }

 private:
  std::size_t n_items_;
  std::size_t n_nodes_;
  double s_;
  const QuadratureGrid* grid_;
  std::vector<double> alpha_;
  std::vector<int> categories_;
  std::vector<std::size_t> cat_offset_;
  std::vector<std::size_t> step_offset_;
  std::vector<double> log_prob_;
  std::vector<double> cum_;
  std::vector<double> tail_;
  std::vector<double> mean_score_;
  std::vector<double> mean_cum_;
};

template <class Table>
concept NodeTable = requires(const Table& t, std::size_t j, std::size_t n, int x) {
  { t.log_prob(j, n, x) } -> std::convertible_to<double>;
  { t.items() } -> std::convertible_to<std::size_t>;
  { t.nodes() } -> std::convertible_to<std::size_t>;
  { t.grid() } -> std::convertible_to<const QuadratureGrid&>;
};

// out[n] = log p(row | V(n)) + log A(n); returns the log marginal.
template <NodeTable Table>
double log_joint_at_nodes(std::span<const int> row, const Table& table, std::span<double> out) {
  table.check_row(row);
  const auto& lw = table.grid().log_weights;
  for (std::size_t n = 0; n < table.nodes(); ++n) {
    double acc = lw[n];
    for (std::size_t j = 0; j < table.items(); ++j) acc += table.log_prob(j, n, row[j]);
    out[n] = acc;
  }
  return log_sum_exp(out.first(table.nodes()));
}

// log p~(row) = log sum_n p(row | V(n)) A(n)
template <NodeTable Table>
double marginal_loglik(std::span<const int> row, const Table& table) {
  std::vector<double> joint(table.nodes());
  return log_joint_at_nodes(row, table, joint);
}

// Writes the bin posterior into post and returns the log marginal.
template <NodeTable Table>
double bin_posterior_into(std::span<const int> row, const Table& table, std::span<double> post) {
  const double lm = log_joint_at_nodes(row, table, post);
  for (std::size_t n = 0; n < table.nodes(); ++n) post[n] = std::exp(post[n] - lm);
  return lm;
}

template <NodeTable Table>
std::vector<double> bin_posterior(std::span<const int> row, const Table& table) {
  std::vector<double> post(table.nodes());
  bin_posterior_into(row, table, post);
  return post;
}

struct EapScore {
  double theta = 0.0;
  double posterior_sd = 0.0;
};

template <NodeTable Table>
EapScore eap_ability(std::span<const int> row, const Table& table) {
  const auto post = bin_posterior(row, table);
  const auto& v = table.grid().nodes;
  EapScore out;
  for (std::size_t n = 0; n < post.size(); ++n) out.theta += v[n] * post[n];
  double var = 0.0;
  for (std::size_t n = 0; n < post.size(); ++n) var += (v[n] - out.theta) * (v[n] - out.theta) * post[n];
  out.posterior_sd = std::sqrt(var);
  return out;
}

// Flat per-student score [d_alpha (J) | d_beta (J) | d_s] written into out,
// which must hold 2J + 1 values. Returns the student's log marginal.
inline double student_score_into(std::span<const int> row, const NodeTable2PL& table,
                                 AlphaScale scale, std::span<double> out) {
  const std::size_t J = table.items();
  const std::size_t q = table.nodes();
  if (out.size() != 2 * J + 1) throw ContractError("gradient buffer must hold 2J+1 values");
  std::vector<double> post(q);
  const double lm = bin_posterior_into(row, table, post);
  double d_s = 0.0;
  for (std::size_t j = 0; j < J; ++j) {
    const double x = row[j];
    double weighted_resid = 0.0;   // sum_n (x - pi) p(n)
    double weighted_slope = 0.0;   // sum_n (x - pi)(V + s - beta) p(n)
    for (std::size_t n = 0; n < q; ++n) {
      const double r = (x - table.prob(j, n)) * post[n];
      weighted_resid += r;
      weighted_slope += r * table.centered(j, n);
    }
    const double alpha = table.alpha(j);
    const double d_alpha = weighted_slope;
    out[j] = scale == AlphaScale::kLog ? alpha * d_alpha : d_alpha;
    out[J + j] = -alpha * weighted_resid;
    d_s += alpha * weighted_resid;
  }
  out[2 * J] = d_s;
  return lm;
}

// Partial credit analogue: [d_alpha (J) | d_steps (sum C_j - 1) | d_s].
inline double student_score_into(std::span<const int> row, const NodeTablePCM& table,
                                 AlphaScale scale, std::span<double> out) {
  const std::size_t J = table.items();
  const std::size_t q = table.nodes();
  const std::size_t B = table.beta_size();
  if (out.size() != J + B + 1) throw ContractError("gradient buffer must hold J+B+1 values");
  std::vector<double> post(q);
  const double lm = bin_posterior_into(row, table, post);
  double d_s = 0.0;
  for (std::size_t j = 0; j < J; ++j) {
    const int x = row[j];
    const double alpha = table.alpha(j);
    double d_alpha = 0.0;
    double score_resid = 0.0;  // sum_n (x - E[c]) p(n)
    for (std::size_t n = 0; n < q; ++n) {
      d_alpha += (table.cum(j, n, x) - table.mean_cum(j, n)) * post[n];
      score_resid += (x - table.mean_score(j, n)) * post[n];
    }
    out[j] = scale == AlphaScale::kLog ? alpha * d_alpha : d_alpha;
    for (int h = 1; h < table.categories(j); ++h) {
      const double reached = x >= h ? 1.0 : 0.0;
      double acc = 0.0;
      for (std::size_t n = 0; n < q; ++n) acc += (reached - table.tail(j, h, n)) * post[n];
      out[J + table.step_offset(j) + h - 1] = -alpha * acc;
    }
    d_s += alpha * score_resid;
  }
  out[J + B] = d_s;
  return lm;
}

template <NodeTable Table>
PerStudentGradient unflatten_gradient(std::span<const double> flat, const Table& table,
                                      AlphaScale scale) {
  const std::size_t J = table.items();
  PerStudentGradient g;
  g.scale = scale;
  g.d_alpha.assign(flat.begin(), flat.begin() + J);
  g.d_beta.assign(flat.begin() + J, flat.end() - 1);
  g.d_s = flat.back();
  return g;
}

inline PerStudentGradient student_gradient_2pl(std::span<const int> row, const NodeTable2PL& table,
                                               AlphaScale scale = AlphaScale::kNatural) {
  std::vector<double> flat(2 * table.items() + 1);
  student_score_into(row, table, scale, flat);
  return unflatten_gradient(flat, table, scale);
}

inline PerStudentGradient student_gradient_2pl(std::span<const int> row,
                                               std::span<const ItemParams2PL> items, double s,
                                               const QuadratureGrid& grid,
                                               AlphaScale scale = AlphaScale::kNatural) {
  return student_gradient_2pl(row, NodeTable2PL(items, s, grid), scale);
}

inline PerStudentGradient student_gradient_pcm(std::span<const int> row, const NodeTablePCM& table) {
  std::vector<double> flat(table.items() + table.beta_size() + 1);
  student_score_into(row, table, AlphaScale::kNatural, flat);
  return unflatten_gradient(flat, table, AlphaScale::kNatural);
}

inline PerStudentGradient student_gradient_pcm(std::span<const int> row,
                                               std::span<const ItemParamsPCM> items, double s,
                                               const QuadratureGrid& grid) {
  return student_gradient_pcm(row, NodeTablePCM(items, s, grid));
}

inline double marginal_loglik(std::span<const int> row, std::span<const ItemParams2PL> items,
                              double s, const QuadratureGrid& grid) {
  return marginal_loglik(row, NodeTable2PL(items, s, grid));
}

inline double marginal_loglik(std::span<const int> row, std::span<const ItemParamsPCM> items,
                              double s, const QuadratureGrid& grid) {
  return marginal_loglik(row, NodeTablePCM(items, s, grid));
}

inline std::vector<double> bin_posterior(std::span<const int> row,
                                         std::span<const ItemParams2PL> items, double s,
                                         const QuadratureGrid& grid) {
  return bin_posterior(row, NodeTable2PL(items, s, grid));
}

inline EapScore eap_ability(std::span<const int> row, std::span<const ItemParams2PL> items,
                            double s, const QuadratureGrid& grid) {
  return eap_ability(row, NodeTable2PL(items, s, grid));
}

inline EapScore eap_ability(std::span<const int> row, std::span<const ItemParamsPCM> items,
                            double s, const QuadratureGrid& grid) {
  return eap_ability(row, NodeTablePCM(items, s, grid));
}

}  // namespace fedcal

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

// Model-agnostic item parameters plus the school-level score pass shared by
// the federated school node and the pooled (central) engine.
//
// Flat parameter layout used everywhere in the engine:
//   [alpha (J) | beta (J for 2PL, sum_j (C_j - 1) step parameters for PCM) | s]

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fedcal/dp.hpp"
#include "fedcal/errors.hpp"
#include "fedcal/irt_model.hpp"
#include "fedcal/rng.hpp"

namespace fedcal {

enum class ModelKind { k2PL, kPCM };

inline std::string to_string(ModelKind m) { return m == ModelKind::k2PL ? "2pl" : "pcm"; }

inline ModelKind parse_model_kind(const std::string& s) {
  if (s == "2pl") return ModelKind::k2PL;
  if (s == "pcm") return ModelKind::kPCM;
  throw ConfigError("unknown model '" + s + "' (expected 2pl or pcm)");
}

struct ItemBank {
  ModelKind kind = ModelKind::k2PL;
  std::vector<double> alpha;
  std::vector<std::vector<double>> steps;  // one entry per item for 2PL

  // alpha = 1 and all step parameters 0.
  static ItemBank initial(ModelKind kind, std::span<const int> categories) {
    ItemBank b;
    b.kind = kind;
    for (int c : categories) {
      if (kind == ModelKind::k2PL && c != 2) throw ConfigError("2pl items must have 2 categories");
      if (c < 2) throw ConfigError("items need at least 2 categories");
      b.alpha.push_back(1.0);
      b.steps.emplace_back(static_cast<std::size_t>(c - 1), 0.0);
    }
    return b;
  }

  std::size_t items() const { return alpha.size(); }

  std::size_t beta_size() const {
    std::size_t n = 0;
    for (const auto& s : steps) n += s.size();
    return n;
  }

  std::vector<int> categories() const {
    std::vector<int> c;
    for (const auto& s : steps) c.push_back(static_cast<int>(s.size()) + 1);
    return c;
  }

  std::vector<double> flat_beta() const {
    std::vector<double> out;
    for (const auto& s : steps) out.insert(out.end(), s.begin(), s.end());
    return out;
  }

  void set_flat_beta(std::span<const double> flat) {
    std::size_t k = 0;
    for (auto& s : steps) {
      for (double& b : s) b = flat[k++];
    }
  }

  std::vector<ItemParams2PL> as_2pl() const {
    std::vector<ItemParams2PL> out;
    for (std::size_t j = 0; j < items(); ++j) out.push_back({alpha[j], steps[j].front()});
    return out;
  }

  std::vector<ItemParamsPCM> as_pcm() const {
    std::vector<ItemParamsPCM> out;
    for (std::size_t j = 0; j < items(); ++j) out.push_back({alpha[j], steps[j]});
    return out;
  }

  static ItemBank from_2pl(std::span<const ItemParams2PL> items) {
    ItemBank b;
    for (const auto& it : items) {
      b.alpha.push_back(it.alpha);
      b.steps.push_back({it.beta});
    }
    return b;
  }
};

struct SchoolScore {
  double loglik = 0.0;
  std::vector<double> grad;  // [alpha | beta | d_s]
};

namespace detail {

template <class Table>
SchoolScore score_rows(const ResponseMatrix& x, const Table& table, AlphaScale scale) {
  const std::size_t dim = table.items() + table.beta_size() + 1;
  SchoolScore out{0.0, std::vector<double>(dim, 0.0)};
  std::vector<double> g(dim);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    out.loglik += student_score_into(x.row(i), table, scale, g);
    for (std::size_t c = 0; c < dim; ++c) out.grad[c] += g[c];
  }
  return out;
}

}  // namespace detail

inline void check_compatible(const ResponseMatrix& x, const ItemBank& bank) {
  if (x.items() != bank.items()) throw ContractError("item count differs from parameter broadcast");
  const auto cats = bank.categories();
  for (std::size_t j = 0; j < cats.size(); ++j) {
    if (x.categories()[j] > cats[j]) throw ContractError("data has more categories than the model");
  }
}

// Sum over the school's students of log p~(x) and the per-student scores.
inline SchoolScore score_school(const ResponseMatrix& x, const ItemBank& bank, double s,
                                const QuadratureGrid& grid,
                                AlphaScale scale = AlphaScale::kNatural) {
  check_compatible(x, bank);
  if (bank.kind == ModelKind::k2PL) {
    const auto items = bank.as_2pl();
    return detail::score_rows(x, NodeTable2PL(items, s, grid), scale);
  }
  const auto items = bank.as_pcm();
  return detail::score_rows(x, NodeTablePCM(items, s, grid), scale);
}

// Poisson-subsampled, per-student clipped sum of log-alpha scores (2PL).
// Output layout [d_a (J) | d_beta (J) | d_s]; the d_s coordinate is zeroed
// before clipping when the school effect is not estimated.
struct ClippedSum {
  std::vector<double> sum;
  std::size_t sampled = 0;
  double max_norm = 0.0;  // largest per-student norm after clipping
};

inline ClippedSum clipped_school_sum(const ResponseMatrix& x, std::span<const ItemParams2PL> items,
                                     double s, const QuadratureGrid& grid, double sample_rate,
                                     double clip_norm, bool include_s, Rng& rng) {
  const NodeTable2PL table(items, s, grid);
  const std::size_t dim = 2 * items.size() + 1;
  ClippedSum out{std::vector<double>(dim, 0.0), 0, 0.0};
  std::vector<double> g(dim);
  for (std::size_t i : poisson_subsample(x.rows(), sample_rate, rng)) {
    student_score_into(x.row(i), table, AlphaScale::kLog, g);
    if (!include_s) g.back() = 0.0;
    clip_in_place(g, clip_norm);
    const double norm = l2_norm(g);
    if (norm > clip_norm * (1.0 + 1e-12)) throw std::logic_error("clipped gradient exceeds C");
    out.max_norm = std::max(out.max_norm, norm);
    for (std::size_t c = 0; c < dim; ++c) out.sum[c] += g[c];
    ++out.sampled;
  }
  return out;
}

}  // namespace fedcal

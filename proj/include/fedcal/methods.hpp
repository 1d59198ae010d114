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

// Estimation methods over a set of schools: pooled central fit, plain and DP
// federation (run in-process), per-school meta-analysis, and the
// random-effect variants that fix s = 0 and score schools by mean EAP.

#include <exception>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "fedcal/errors.hpp"
#include "fedcal/federation/center.hpp"
#include "fedcal/federation/school.hpp"
#include "fedcal/federation/transport.hpp"
#include "fedcal/item_bank.hpp"
#include "fedcal/irt_model.hpp"

namespace fedcal {

enum class Method { kCentral, kFederated, kFederatedDp, kMeta, kRandomEffect, kRandomEffectDp };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::kCentral: return "central";
    case Method::kFederated: return "federated";
    case Method::kFederatedDp: return "federated-dp";
    case Method::kMeta: return "meta";
    case Method::kRandomEffect: return "random-effect";
    case Method::kRandomEffectDp: return "random-effect-dp";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  for (Method m : {Method::kCentral, Method::kFederated, Method::kFederatedDp, Method::kMeta,
                   Method::kRandomEffect, Method::kRandomEffectDp}) {
    if (s == to_string(m)) return m;
  }
  throw ConfigError("unknown mode '" + s + "'");
}

inline bool is_dp(Method m) { return m == Method::kFederatedDp || m == Method::kRandomEffectDp; }

// How in-process federations connect the center to its schools: direct
// calls, byte pipes with one thread per school, or localhost TCP sockets
// with one thread per school.
enum class InProcess { kDirect, kLoopback, kTcp };

struct MethodOptions {
  PlainFitOptions plain;
  DpFitOptions dp;
  InProcess link = InProcess::kDirect;
  Millis timeout = kDefaultTimeout;
  std::string host = "127.0.0.1";
  int port = 0;  // kTcp; 0 picks a free port
};

struct Estimate {
  Method method = Method::kCentral;
  ItemBank items;
  std::vector<double> s;
  FitReport report;
  std::optional<PrivacyLedger> ledger;
  std::vector<FitReport> local_reports;  // meta: one per school
};

using CenterRoutine = std::function<FitResult(CenterSession&)>;

// Runs `center` against K in-process school nodes.
inline FitResult run_in_process(std::span<const ResponseMatrix> schools, const CenterRoutine& center,
                                const MethodOptions& opt) {
  std::vector<SchoolNode> nodes;
  nodes.reserve(schools.size());
  for (std::size_t k = 0; k < schools.size(); ++k) nodes.emplace_back(static_cast<int>(k), schools[k]);
  const std::size_t K = nodes.size();

  std::vector<std::unique_ptr<Channel>> channels;
  if (opt.link == InProcess::kDirect) {
    for (auto& n : nodes) channels.push_back(std::make_unique<DirectLink>(n));
    CenterSession session(std::move(channels), opt.timeout);
    session.handshake();
    return center(session);
  }

  std::vector<std::unique_ptr<Channel>> school_ends(K);
  std::optional<TcpListener> listener;
  if (opt.link == InProcess::kLoopback) {
    for (std::size_t k = 0; k < K; ++k) {
      auto [c, s] = make_loopback_pair();
      channels.push_back(std::move(c));
      school_ends[k] = std::move(s);
    }
  } else {
    listener.emplace(opt.host, opt.port);
  }
  std::vector<std::exception_ptr> errors(K);
  std::vector<std::thread> threads;
  for (std::size_t k = 0; k < K; ++k) {
    threads.emplace_back([&, k] {
      try {
        if (!school_ends[k]) school_ends[k] = tcp_connect(opt.host, listener->port(), opt.timeout);
        nodes[k].run(*school_ends[k], opt.timeout);
      } catch (...) {
        errors[k] = std::current_exception();
      }
      school_ends[k].reset();
    });
  }
  std::optional<FitResult> result;
  std::exception_ptr center_error;
  try {
    if (listener) {
      for (std::size_t k = 0; k < K; ++k) channels.push_back(listener->accept(opt.timeout));
    }
    CenterSession session(std::move(channels), opt.timeout);
    try {
      session.handshake();
      result = center(session);
    } catch (...) {
      session.abort_all("center failed");
      throw;
    }
  } catch (...) {
    center_error = std::current_exception();
  }
  channels.clear();  // closing the center ends unblocks any school still waiting
  for (auto& t : threads) t.join();
  if (center_error) std::rethrow_exception(center_error);
  if (!result->report.aborted) {
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  return std::move(*result);
}

inline ResponseMatrix pool_rows(std::span<const ResponseMatrix> schools) {
  const auto cats = pooled_categories(schools);
  ResponseMatrix pooled(cats);
  for (const auto& x : schools) {
    for (std::size_t i = 0; i < x.rows(); ++i) pooled.add_row(x.row(i));
  }
  return pooled;
}

// Mean EAP ability of each school's students, scored with s = 0.
inline std::vector<double> mean_eap_by_school(std::span<const ResponseMatrix> schools,
                                              const ItemBank& bank, const QuadratureGrid& grid) {
  std::vector<double> out;
  const auto items2 = bank.kind == ModelKind::k2PL ? bank.as_2pl() : std::vector<ItemParams2PL>{};
  const auto itemsp = bank.kind == ModelKind::kPCM ? bank.as_pcm() : std::vector<ItemParamsPCM>{};
  for (const auto& x : schools) {
    double sum = 0.0;
    const auto add = [&](const auto& table) {
      for (std::size_t i = 0; i < x.rows(); ++i) sum += eap_ability(x.row(i), table).theta;
    };
    if (bank.kind == ModelKind::k2PL) {
      add(NodeTable2PL(items2, 0.0, grid));
    } else {
      add(NodeTablePCM(itemsp, 0.0, grid));
    }
    out.push_back(x.rows() ? sum / static_cast<double>(x.rows()) : 0.0);
  }
  return out;
}

// Sample-size weighted average of per-school item estimates.
inline ItemBank meta_baseline(std::span<const ItemBank> local, std::span<const std::size_t> n) {
  if (local.empty() || local.size() != n.size()) throw ContractError("meta: one estimate per school");
  double total = 0.0;
  for (auto v : n) total += static_cast<double>(v);
  if (total <= 0.0) throw ContractError("meta: no students");
  ItemBank out = local.front();
  std::vector<double> alpha(out.items(), 0.0);
  std::vector<double> beta(out.beta_size(), 0.0);
  for (std::size_t k = 0; k < local.size(); ++k) {
    const double w = static_cast<double>(n[k]) / total;
    const auto b = local[k].flat_beta();
    if (local[k].alpha.size() != alpha.size() || b.size() != beta.size()) {
      throw ContractError("meta: local estimates differ in shape");
    }
    for (std::size_t j = 0; j < alpha.size(); ++j) alpha[j] += w * local[k].alpha[j];
    for (std::size_t c = 0; c < beta.size(); ++c) beta[c] += w * b[c];
  }
  out.alpha = alpha;
  out.set_flat_beta(beta);
  return out;
}

inline Estimate estimate(Method method, std::span<const ResponseMatrix> schools,
                         const MethodOptions& opt) {
  Estimate est;
  est.method = method;
  const int K = static_cast<int>(schools.size());
  const auto grid = build_grid(opt.plain.theta0, opt.plain.q);

  const auto take = [&](FitResult r) {
    est.items = std::move(r.items);
    est.s = std::move(r.s);
    est.report = std::move(r.report);
    est.ledger = std::move(r.ledger);
  };

  switch (method) {
    case Method::kCentral: {
      const ResponseMatrix pooled = pool_rows(schools);
      PlainFitOptions o = opt.plain;
      o.estimate_s = false;
      take(central_fit_plain(std::span<const ResponseMatrix>(&pooled, 1), o));
      est.s.assign(K, 0.0);
      break;
    }
    case Method::kFederated:
    case Method::kRandomEffect: {
      PlainFitOptions o = opt.plain;
      if (method == Method::kRandomEffect) o.estimate_s = false;
      take(run_in_process(schools, [&](CenterSession& s) { return center_fit_plain(s, o); }, opt));
      break;
    }
    case Method::kFederatedDp:
    case Method::kRandomEffectDp: {
      DpFitOptions o = opt.dp;
      if (method == Method::kRandomEffectDp) o.estimate_s = false;
      take(run_in_process(schools, [&](CenterSession& s) { return center_fit_dp(s, o); }, opt));
      break;
    }
    case Method::kMeta: {
      std::vector<ItemBank> local;
      std::vector<std::size_t> n;
      PlainFitOptions o = opt.plain;
      o.estimate_s = false;
      if (!o.categories) o.categories = pooled_categories(schools);
      for (const auto& x : schools) {
        FitResult r = central_fit_plain(std::span<const ResponseMatrix>(&x, 1), o);
        local.push_back(r.items);
        n.push_back(x.rows());
        est.local_reports.push_back(r.report);
      }
      est.items = meta_baseline(local, n);
      est.s.assign(K, 0.0);
      est.report.mode = "meta";
      est.report.converged = true;
      for (const auto& r : est.local_reports) {
        est.report.converged = est.report.converged && r.converged;
        est.report.iterations += r.iterations;
        est.report.communication_rounds += r.communication_rounds;
        est.report.loglik += r.loglik;
      }
      break;
    }
  }
  if (method == Method::kRandomEffect || method == Method::kRandomEffectDp) {
    const auto dp_grid = is_dp(method) ? build_grid(opt.dp.theta0, opt.dp.q) : grid;
    est.s = mean_eap_by_school(schools, est.items, dp_grid);
  }
  est.report.mode = to_string(method);
  return est;
}

}  // namespace fedcal

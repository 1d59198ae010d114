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

// Simulation harness: synthetic 2PL datasets with school effects, extreme-row
// contamination, replication metrics, and the three study designs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "fedcal/errors.hpp"
#include "fedcal/irt_model.hpp"
#include "fedcal/methods.hpp"
#include "fedcal/rng.hpp"

namespace fedcal {

enum class Contamination { kNone, kZeros, kOnes };

inline std::string to_string(Contamination c) {
  switch (c) {
    case Contamination::kNone: return "none";
    case Contamination::kZeros: return "zeros";
    case Contamination::kOnes: return "ones";
  }
  return "?";
}

inline Contamination parse_contamination(const std::string& s) {
  if (s == "none") return Contamination::kNone;
  if (s == "zeros") return Contamination::kZeros;
  if (s == "ones") return Contamination::kOnes;
  throw ConfigError("unknown contamination '" + s + "' (expected none, zeros or ones)");
}

struct StudyConfig {
  std::size_t J = 10;
  std::size_t K = 10;
  std::size_t N_k = 100;
  int T = 20;
  double alpha_lo = 0.5;
  double alpha_hi = 2.0;
  double beta_lo = -1.0;
  double beta_hi = 1.0;
  std::vector<double> s_true;  // empty means all zero
  Contamination contamination = Contamination::kNone;
  double rho = 0.0;
  std::uint64_t seed = 20240601;

  void validate() const {
    if (J < 1 || K < 1 || N_k < 1 || T < 1) throw ConfigError("J, K, N_k and T must be positive");
    if (!(alpha_lo > 0.0 && alpha_lo <= alpha_hi)) throw ConfigError("invalid alpha range");
    if (!(beta_lo <= beta_hi)) throw ConfigError("invalid beta range");
    if (!s_true.empty() && s_true.size() != K) throw ConfigError("s_true must have K entries");
    if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("rho must lie in [0, 1]");
  }

  std::vector<double> school_effects() const {
    return s_true.empty() ? std::vector<double>(K, 0.0) : s_true;
  }
};

struct Dataset {
  std::vector<ItemParams2PL> items;
  std::vector<double> s;
  std::vector<ResponseMatrix> schools;
  std::vector<std::vector<double>> theta;
};

// Item parameters depend on the seed only, so they stay fixed across the
// replications of one study condition.
inline std::vector<ItemParams2PL> generate_items(const StudyConfig& cfg) {
  Rng rng = Rng(cfg.seed).split("items");
  std::vector<ItemParams2PL> items;
  for (std::size_t j = 0; j < cfg.J; ++j) {
    const double alpha = rng.uniform(cfg.alpha_lo, cfg.alpha_hi);
    const double beta = rng.uniform(cfg.beta_lo, cfg.beta_hi);
    items.push_back({alpha, beta});
  }
  return items;
}

// Replaces floor(rho * N) distinct random rows with the constant row.
inline ResponseMatrix contaminate(const ResponseMatrix& x, Contamination mode, double rho, Rng& rng) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("rho must lie in [0, 1]");
  ResponseMatrix out = x;
  if (mode == Contamination::kNone) return out;
  const std::size_t n = x.rows();
  const auto m = static_cast<std::size_t>(std::floor(rho * static_cast<double>(n) + 1e-9));
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t r = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(idx[i], idx[r]);
  }
  std::vector<int> row(x.items(), 0);
  for (std::size_t j = 0; j < x.items(); ++j) {
    row[j] = mode == Contamination::kZeros ? 0 : x.categories()[j] - 1;
  }
  for (std::size_t i = 0; i < m; ++i) out.set_row(idx[i], row);
  return out;
}

inline Dataset generate_dataset(const StudyConfig& cfg, int replication) {
  cfg.validate();
  Dataset d;
  d.items = generate_items(cfg);
  d.s = cfg.school_effects();
  const Rng rep = Rng(cfg.seed).split("replication").split(static_cast<std::uint64_t>(replication));
  for (std::size_t k = 0; k < cfg.K; ++k) {
    Rng rng = rep.split(static_cast<std::uint64_t>(k));
    std::vector<int> data;
    data.reserve(cfg.N_k * cfg.J);
    std::vector<double> theta;
    for (std::size_t i = 0; i < cfg.N_k; ++i) {
      const double th = rng.normal();
      theta.push_back(th);
      for (const auto& it : d.items) {
        data.push_back(rng.bernoulli(prob_2pl(it.alpha, it.beta, d.s[k], th)) ? 1 : 0);
      }
    }
    ResponseMatrix x = ResponseMatrix::dichotomous(cfg.J, data);
    if (cfg.contamination != Contamination::kNone) {
      Rng crng = rep.split("contamination").split(static_cast<std::uint64_t>(k));
      x = contaminate(x, cfg.contamination, cfg.rho, crng);
    }
    d.schools.push_back(std::move(x));
    d.theta.push_back(std::move(theta));
  }
  return d;
}

struct ReplicationEstimate {
  std::vector<double> alpha;
  std::vector<double> beta;
  std::vector<double> s;
  bool converged = false;
  double epsilon = 0.0;
};

struct MetricReport {
  double mse_alpha = 0.0;
  double mse_beta = 0.0;
  double bias_alpha = 0.0;
  double bias_beta = 0.0;
  std::vector<double> mse_s;
  std::vector<double> bias_s;
  std::vector<ReplicationEstimate> replications;
};

struct Truth {
  std::vector<double> alpha;
  std::vector<double> beta;
  std::vector<double> s;
};

namespace detail {

inline void accumulate(std::span<const double> est, std::span<const double> truth, double& mse,
                       double& bias) {
  if (est.size() != truth.size()) throw ContractError("estimate and truth differ in length");
  for (std::size_t c = 0; c < est.size(); ++c) {
    const double e = est[c] - truth[c];
    mse += e * e;
    bias += e;
  }
}

}  // namespace detail

// MSE and bias averaged over parameters and replications; s is reported per
// school, averaged over replications.
inline MetricReport score_replications(std::span<const ReplicationEstimate> reps, const Truth& truth) {
  if (reps.empty()) throw ContractError("no replications to score");
  MetricReport m;
  const double T = static_cast<double>(reps.size());
  const std::size_t K = truth.s.size();
  m.mse_s.assign(K, 0.0);
  m.bias_s.assign(K, 0.0);
  for (const auto& r : reps) {
    detail::accumulate(r.alpha, truth.alpha, m.mse_alpha, m.bias_alpha);
    detail::accumulate(r.beta, truth.beta, m.mse_beta, m.bias_beta);
    if (r.s.size() != K) throw ContractError("school effect estimate has the wrong length");
    for (std::size_t k = 0; k < K; ++k) {
      const double e = r.s[k] - truth.s[k];
      m.mse_s[k] += e * e / T;
      m.bias_s[k] += e / T;
    }
  }
  const double na = T * static_cast<double>(truth.alpha.size());
  const double nb = T * static_cast<double>(truth.beta.size());
  m.mse_alpha /= na;
  m.bias_alpha /= na;
  m.mse_beta /= nb;
  m.bias_beta /= nb;
  m.replications.assign(reps.begin(), reps.end());
  return m;
}

struct Condition {
  std::string name;
  StudyConfig cfg;
};

// DP settings used by the study designs. C sits just above the largest
// clean per-student norm for J = 10 items, so clipping binds on atypical
// gradients only; the log-alpha prior spans the designed alpha range.
inline MethodOptions study_method_defaults() {
  MethodOptions m;
  m.dp.dp.sample_rate = 0.5;
  m.dp.dp.clip_norm = 5.0;
  m.dp.dp.noise_multiplier = 1.0;
  m.dp.dp.tau_a = 0.5;
  m.dp.dp.tau_beta = 1.0;
  m.dp.dp.tau_s = 1.0;
  return m;
}

struct StudyOptions {
  int study = 1;
  int T = 20;
  std::vector<std::size_t> N_k;    // empty: study default
  std::vector<double> rho;         // empty: study default
  std::vector<Method> methods;     // empty: study default
  std::vector<std::string> conditions;  // empty: all
  std::uint64_t seed = 20240601;
  MethodOptions method = study_method_defaults();
  unsigned threads = 0;  // 0: hardware concurrency
};

struct ConditionResult {
  std::string condition;
  std::size_t N_k = 0;
  double rho = 0.0;
  Method method = Method::kFederated;
  Truth truth;
  MetricReport metrics;
};

struct StudyResult {
  int study = 1;
  std::uint64_t seed = 0;
  int T = 0;
  std::vector<ConditionResult> results;
};

// Study designs. Study 1: four item-range truth conditions crossed with
// school size, s = 0. Study 2: fixed school effects (-1, -0.5, 0, 0.5, 1).
// Study 3: extreme-row contamination at rate rho, s = 0.
inline std::vector<Condition> study_conditions(const StudyOptions& opt) {
  std::vector<Condition> out;
  const auto keep = [&](const std::string& name) {
    return opt.conditions.empty() ||
           std::find(opt.conditions.begin(), opt.conditions.end(), name) != opt.conditions.end();
  };
  if (opt.study == 1) {
    const std::vector<std::size_t> sizes = opt.N_k.empty() ? std::vector<std::size_t>{50, 100, 300} : opt.N_k;
    struct Range {
      const char* name;
      double alo, ahi, blo, bhi;
    };
    const Range ranges[] = {{"high-alpha/high-beta", 1.0, 2.0, 0.0, 1.0},
                            {"high-alpha/low-beta", 1.0, 2.0, -1.0, 0.0},
                            {"low-alpha/high-beta", 0.5, 1.0, 0.0, 1.0},
                            {"low-alpha/low-beta", 0.5, 1.0, -1.0, 0.0}};
    for (const auto& r : ranges) {
      if (!keep(r.name)) continue;
      for (std::size_t n : sizes) {
        StudyConfig c;
        c.J = 10;
        c.K = 10;
        c.N_k = n;
        c.alpha_lo = r.alo;
        c.alpha_hi = r.ahi;
        c.beta_lo = r.blo;
        c.beta_hi = r.bhi;
        out.push_back({r.name, c});
      }
    }
  } else if (opt.study == 2) {
    for (std::size_t n : opt.N_k.empty() ? std::vector<std::size_t>{100} : opt.N_k) {
      StudyConfig c;
      c.J = 10;
      c.K = 5;
      c.N_k = n;
      c.s_true = {-1.0, -0.5, 0.0, 0.5, 1.0};
      if (keep("fixed-s")) out.push_back({"fixed-s", c});
    }
  } else if (opt.study == 3) {
    const std::vector<double> rhos = opt.rho.empty() ? std::vector<double>{0.1, 0.2, 0.3, 0.4, 0.5} : opt.rho;
    for (Contamination mode : {Contamination::kZeros, Contamination::kOnes}) {
      if (!keep(to_string(mode))) continue;
      for (std::size_t n : opt.N_k.empty() ? std::vector<std::size_t>{100} : opt.N_k) {
        for (double rho : rhos) {
          StudyConfig c;
          c.J = 10;
          c.K = 10;
          c.N_k = n;
          c.contamination = mode;
          c.rho = rho;
          out.push_back({to_string(mode), c});
        }
      }
    }
  } else {
    throw ConfigError("study id must be 1, 2 or 3");
  }
  for (auto& c : out) {
    c.cfg.T = opt.T;
    // Items are shared by every condition with the same name, so conditions
    // that differ only in N_k or rho are compared on the same item bank.
    c.cfg.seed = Rng(opt.seed).split(c.name).key();
    c.cfg.validate();
  }
  return out;
}

inline std::vector<Method> study_methods(const StudyOptions& opt) {
  if (!opt.methods.empty()) return opt.methods;
  switch (opt.study) {
    case 1: return {Method::kCentral, Method::kFederated, Method::kFederatedDp, Method::kMeta};
    case 2: return {Method::kFederated, Method::kFederatedDp, Method::kRandomEffect, Method::kRandomEffectDp};
    default: return {Method::kFederated, Method::kFederatedDp};
  }
}

// Runs every (condition, method, replication) job. Jobs run on a thread pool
// and write into preassigned slots, so results do not depend on scheduling.
inline StudyResult run_study(const StudyOptions& opt) {
  const auto conditions = study_conditions(opt);
  const auto methods = study_methods(opt);
  struct Job {
    std::size_t cond;
    std::size_t method;
    int rep;
  };
  std::vector<Job> jobs;
  for (std::size_t c = 0; c < conditions.size(); ++c) {
    for (std::size_t m = 0; m < methods.size(); ++m) {
      for (int t = 0; t < opt.T; ++t) jobs.push_back({c, m, t});
    }
  }
  std::vector<ReplicationEstimate> slots(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  std::size_t next = 0;
  std::mutex mu;
  const auto worker = [&] {
    while (true) {
      std::size_t i;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next >= jobs.size()) return;
        i = next++;
      }
      try {
        const Job& job = jobs[i];
        const auto& cfg = conditions[job.cond].cfg;
        const Dataset d = generate_dataset(cfg, job.rep);
        MethodOptions mo = opt.method;
        mo.link = InProcess::kDirect;
        mo.dp.seed = Rng(cfg.seed).split("dp").split(static_cast<std::uint64_t>(job.rep)).key();
        mo.plain.estimate_s = !cfg.s_true.empty();
        mo.dp.estimate_s = !cfg.s_true.empty();
        const Estimate e = estimate(methods[job.method], d.schools, mo);
        ReplicationEstimate r;
        r.alpha = e.items.alpha;
        r.beta = e.items.flat_beta();
        r.s = e.s;
        r.converged = e.report.converged;
        r.epsilon = e.ledger ? e.ledger->epsilon() : 0.0;
        slots[i] = std::move(r);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  unsigned n_threads = opt.threads ? opt.threads : std::max(1u, std::thread::hardware_concurrency());
  n_threads = static_cast<unsigned>(std::min<std::size_t>(n_threads, jobs.size()));
  std::vector<std::thread> pool;
  for (unsigned i = 1; i < n_threads; ++i) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  StudyResult out;
  out.study = opt.study;
  out.seed = opt.seed;
  out.T = opt.T;
  std::size_t i = 0;
  for (std::size_t c = 0; c < conditions.size(); ++c) {
    const auto& cfg = conditions[c].cfg;
    Truth truth;
    for (const auto& it : generate_items(cfg)) {
      truth.alpha.push_back(it.alpha);
      truth.beta.push_back(it.beta);
    }
    truth.s = cfg.school_effects();
    for (std::size_t m = 0; m < methods.size(); ++m) {
      std::vector<ReplicationEstimate> reps(slots.begin() + i, slots.begin() + i + opt.T);
      i += opt.T;
      out.results.push_back({conditions[c].name, cfg.N_k, cfg.rho, methods[m], truth,
                             score_replications(reps, truth)});
    }
  }
  return out;
}

namespace detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

// results.csv: one row per replication and parameter family.
// summary.csv: replication-averaged metrics per condition and method.
// report.json: everything, including raw estimates and the master seed.
inline void write_study(const StudyResult& r, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const auto open = [&](const char* name) {
    std::ofstream f(dir / name, std::ios::binary);
    if (!f) throw IoError("cannot write " + (dir / name).string());
    return f;
  };
  using detail::fmt;

  auto results = open("results.csv");
  results << "study,condition,method,N_k,rho,replication,target,mse,bias\n";
  auto summary = open("summary.csv");
  summary << "study,condition,method,N_k,rho,target,mse,bias\n";
  nlohmann::json report = {{"study", r.study}, {"seed", r.seed}, {"T", r.T}};
  nlohmann::json rows = nlohmann::json::array();

  for (const auto& c : r.results) {
    const std::string key = std::to_string(r.study) + "," + c.condition + "," + to_string(c.method) +
                            "," + std::to_string(c.N_k) + "," + fmt(c.rho) + ",";
    for (std::size_t t = 0; t < c.metrics.replications.size(); ++t) {
      const auto& rep = c.metrics.replications[t];
      const auto one = [&](const std::string& target, std::span<const double> est,
                           std::span<const double> truth) {
        double mse = 0.0;
        double bias = 0.0;
        detail::accumulate(est, truth, mse, bias);
        const double n = static_cast<double>(truth.size());
        results << key << t << "," << target << "," << fmt(mse / n) << "," << fmt(bias / n) << "\n";
      };
      one("alpha", rep.alpha, c.truth.alpha);
      one("beta", rep.beta, c.truth.beta);
      for (std::size_t k = 0; k < c.truth.s.size(); ++k) {
        one("s_" + std::to_string(k + 1), std::span<const double>(&rep.s[k], 1),
            std::span<const double>(&c.truth.s[k], 1));
      }
    }
    summary << key << "alpha," << fmt(c.metrics.mse_alpha) << "," << fmt(c.metrics.bias_alpha) << "\n";
    summary << key << "beta," << fmt(c.metrics.mse_beta) << "," << fmt(c.metrics.bias_beta) << "\n";
    for (std::size_t k = 0; k < c.truth.s.size(); ++k) {
      summary << key << "s_" << k + 1 << "," << fmt(c.metrics.mse_s[k]) << "," << fmt(c.metrics.bias_s[k])
              << "\n";
    }

    nlohmann::json reps = nlohmann::json::array();
    for (const auto& rep : c.metrics.replications) {
      reps.push_back({{"alpha", rep.alpha},
                      {"beta", rep.beta},
                      {"s", rep.s},
                      {"converged", rep.converged},
                      {"epsilon", rep.epsilon}});
    }
    rows.push_back({{"condition", c.condition},
                    {"method", to_string(c.method)},
                    {"N_k", c.N_k},
                    {"rho", c.rho},
                    {"truth", {{"alpha", c.truth.alpha}, {"beta", c.truth.beta}, {"s", c.truth.s}}},
                    {"mse_alpha", c.metrics.mse_alpha},
                    {"mse_beta", c.metrics.mse_beta},
                    {"bias_alpha", c.metrics.bias_alpha},
                    {"bias_beta", c.metrics.bias_beta},
                    {"mse_s", c.metrics.mse_s},
                    {"bias_s", c.metrics.bias_s},
                    {"replications", reps}});
  }
  report["results"] = rows;
  auto rj = open("report.json");
  rj << report.dump(2) << "\n";
}

// Looks up one condition/method row.
inline const ConditionResult* find_result(const StudyResult& r, const std::string& condition,
                                          Method method, std::size_t N_k, double rho = -1.0) {
  for (const auto& c : r.results) {
    if (c.condition == condition && c.method == method && c.N_k == N_k &&
        (rho < 0.0 || std::abs(c.rho - rho) < 1e-12)) {
      return &c;
    }
  }
  return nullptr;
}

}  // namespace fedcal

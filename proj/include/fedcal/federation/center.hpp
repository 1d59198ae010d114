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

// Center node: handshake, the plain (BFGS) calibration loop and the
// differentially private (Adam) loop, plus the pooled single-site engine
// that shares the plain loop.
//
// Global parameter vector: [alpha (J) | beta (J, or sum C_j-1 steps) | s (K)],
// items in index order then schools in id order. The s block is dropped
// from the optimization vector when school effects are fixed at zero.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fedcal/accountant.hpp"
#include "fedcal/dp.hpp"
#include "fedcal/errors.hpp"
#include "fedcal/federation/messages.hpp"
#include "fedcal/federation/school.hpp"
#include "fedcal/federation/transport.hpp"
#include "fedcal/item_bank.hpp"
#include "fedcal/numeric.hpp"
#include "fedcal/optim.hpp"
#include "fedcal/rng.hpp"
#include "fedcal/secure_agg.hpp"

namespace fedcal {

struct ParamSnapshot {
  std::vector<double> alpha;
  std::vector<double> beta;
  std::vector<double> s;
};

struct ModelState {
  AlphaScale scale = AlphaScale::kNatural;
  std::vector<double> discrimination;  // alpha, or a = log(alpha) for kLog
  std::vector<double> beta;            // flat step block
  std::vector<double> s;
  int round = 0;
  AdamState adam;
  std::deque<ParamSnapshot> polyak;
  BfgsState bfgs;

  std::vector<double> alpha() const {
    if (scale == AlphaScale::kNatural) return discrimination;
    std::vector<double> out;
    for (double a : discrimination) out.push_back(std::exp(a));
    return out;
  }

  void recenter_s() {
    const double m = mean(s);
    for (double& v : s) v -= m;
  }
};

struct FitReport {
  std::string mode;
  int iterations = 0;            // optimizer steps (BFGS iterations or DP rounds)
  int communication_rounds = 0;  // PARAMS broadcasts
  bool converged = false;
  bool stalled = false;
  int fallback_steps = 0;
  double loglik = 0.0;
  double grad_sup_norm = 0.0;
  bool aborted = false;
  std::string abort_reason;
  std::vector<std::string> log;
};

struct FitResult {
  ItemBank items;
  std::vector<double> s;
  ModelState state;
  FitReport report;
  std::optional<PrivacyLedger> ledger;
};

struct SchoolInfo {
  int school_id = 0;
  std::size_t n_students = 0;
  std::vector<int> categories;
};

// The center's view of K connected schools, ordered by school id.
class CenterSession {
 public:
  explicit CenterSession(std::vector<std::unique_ptr<Channel>> channels,
                         Millis timeout = kDefaultTimeout)
      : channels_(std::move(channels)), timeout_(timeout) {
    if (channels_.empty()) throw ConfigError("no schools connected");
  }

  // Receives one HELLO per channel; ids must be exactly 0..K-1.
  void handshake() {
    const int K = static_cast<int>(channels_.size());
    std::vector<std::unique_ptr<Channel>> ordered(K);
    schools_.assign(K, {});
    for (auto& ch : channels_) {
      const RoundMessage m = ch->receive(timeout_);
      if (m.type != MessageType::kHello) throw ProtocolError("expected HELLO");
      SchoolInfo info;
      try {
        info.school_id = m.payload.at("school_id").get<int>();
        info.n_students = m.payload.at("n_students").get<std::size_t>();
        info.categories = m.payload.at("categories").get<std::vector<int>>();
      } catch (const nlohmann::json::exception& e) {
        throw ProtocolError(std::string("bad HELLO payload: ") + e.what());
      }
      if (info.school_id < 0 || info.school_id >= K) {
        throw ProtocolError("school id " + std::to_string(info.school_id) + " outside 0.." +
                            std::to_string(K - 1));
      }
      if (ordered[info.school_id]) {
        throw ProtocolError("duplicate school id " + std::to_string(info.school_id));
      }
      ordered[info.school_id] = std::move(ch);
      schools_[info.school_id] = std::move(info);
    }
    channels_ = std::move(ordered);
    for (const auto& s : schools_) {
      if (s.categories.size() != schools_.front().categories.size()) {
        throw ProtocolError("schools report different item counts");
      }
    }
  }

  int num_schools() const { return static_cast<int>(channels_.size()); }
  const std::vector<SchoolInfo>& schools() const { return schools_; }
  Millis timeout() const { return timeout_; }

  std::vector<int> merged_categories() const {
    std::vector<int> out = schools_.front().categories;
    for (const auto& s : schools_) {
      for (std::size_t j = 0; j < out.size(); ++j) out[j] = std::max(out[j], s.categories[j]);
    }
    return out;
  }

  void send_to(int k, const RoundMessage& m) { channels_[k]->send(m); }

  RoundMessage receive_from(int k) {
    RoundMessage m = channels_[k]->receive(timeout_);
    if (m.type == MessageType::kAbort) {
      throw ProtocolError("school " + std::to_string(k) + " aborted: " +
                          m.payload.value("reason", std::string("?")));
    }
    return m;
  }

  void broadcast(const RoundMessage& m) {
    for (int k = 0; k < num_schools(); ++k) send_to(k, m);
  }

  void finish() { broadcast(make_message(MessageType::kDone, 0)); }

  void abort_all(const std::string& reason) noexcept {
    for (auto& ch : channels_) {
      try {
        if (ch) ch->send(abort_message(0, reason));
      } catch (...) {
      }
    }
  }

 private:
  std::vector<std::unique_ptr<Channel>> channels_;
  std::vector<SchoolInfo> schools_;
  Millis timeout_;
};

struct PlainFitOptions {
  ModelKind model = ModelKind::k2PL;
  double theta0 = 4.0;
  int q = 21;
  bool estimate_s = true;
  double tol = 1e-4;
  int max_iter = 500;
  double alpha_floor = 1e-3;
  std::optional<std::vector<int>> categories;
  std::function<void(const std::string&)> log;
};

// Evaluates sum_k l_k and its gradient [alpha | beta | s (K)] at (bank, s).
using PlainObjective = std::function<Evaluation(const ItemBank&, const std::vector<double>&)>;

namespace detail {

struct Layout {
  std::size_t J = 0;
  std::size_t B = 0;
  std::size_t K = 0;
  bool estimate_s = true;

  std::size_t dim() const { return J + B + (estimate_s ? K : 0); }

  std::vector<double> pack(const ItemBank& bank, std::span<const double> s) const {
    std::vector<double> x(bank.alpha);
    const auto beta = bank.flat_beta();
    x.insert(x.end(), beta.begin(), beta.end());
    if (estimate_s) x.insert(x.end(), s.begin(), s.end());
    return x;
  }

  void unpack(std::span<const double> x, ItemBank& bank, std::vector<double>& s) const {
    bank.alpha.assign(x.begin(), x.begin() + J);
    bank.set_flat_beta(x.subspan(J, B));
    if (estimate_s) {
      s.assign(x.begin() + J + B, x.begin() + J + B + K);
    } else {
      s.assign(K, 0.0);
    }
  }
};

inline std::string format_round(int it, double value, double sup) {
  std::ostringstream os;
  os.precision(10);
  os << "iter " << it << " loglik " << value << " grad_sup " << sup;
  return os.str();
}

}  // namespace detail

// BFGS over the global vector. After every trial point alpha is floored and
// s is recentered; the same shift is applied to every beta so that
// theta + s_k - beta_j (hence the likelihood) is unchanged by recentering.
inline FitResult fit_plain(const PlainObjective& objective, std::span<const int> categories,
                           int num_schools, const PlainFitOptions& opt) {
  const bool estimate_s = opt.estimate_s && num_schools > 1;
  ItemBank bank = ItemBank::initial(opt.model, categories);
  std::vector<double> s(num_schools, 0.0);
  const detail::Layout lay{bank.items(), bank.beta_size(), static_cast<std::size_t>(num_schools),
                           estimate_s};
  FitResult res;
  res.report.mode = "plain";
  int evaluations = 0;

  const Oracle oracle = [&](std::span<const double> x) {
    ItemBank b = bank;
    std::vector<double> sv;
    lay.unpack(x, b, sv);
    Evaluation full = objective(b, sv);
    ++evaluations;
    if (full.gradient.size() != lay.J + lay.B + lay.K) {
      throw ContractError("objective gradient has wrong size");
    }
    if (!estimate_s) full.gradient.resize(lay.J + lay.B);
    return full;
  };

  BfgsOptions bo;
  bo.tol = opt.tol;
  bo.max_iter = opt.max_iter;
  bo.project = [&](std::vector<double>& x) {
    for (std::size_t j = 0; j < lay.J; ++j) x[j] = std::max(x[j], opt.alpha_floor);
    if (estimate_s) {
      const double m = mean(std::span<const double>(x).subspan(lay.J + lay.B, lay.K));
      for (std::size_t i = lay.J; i < lay.dim(); ++i) x[i] -= m;
    }
  };
  bo.observer = [&](int it, const Evaluation& e) {
    const std::string line = detail::format_round(it, e.value, sup_norm(e.gradient));
    res.report.log.push_back(line);
    if (opt.log) opt.log(line);
  };

  BfgsResult br = bfgs_maximize(oracle, lay.pack(bank, s), bo);
  lay.unpack(br.x, bank, s);
  if (estimate_s) {
    // exact recentering of any rounding residue
    const double m = mean(s);
    for (double& v : s) v -= m;
  }
  res.items = bank;
  res.s = s;
  res.report.iterations = br.iterations;
  res.report.communication_rounds = evaluations;
  res.report.converged = br.converged;
  res.report.stalled = br.stalled;
  res.report.fallback_steps = br.fallback_steps;
  res.report.loglik = br.at.value;
  res.report.grad_sup_norm = sup_norm(br.at.gradient);
  res.state.scale = AlphaScale::kNatural;
  res.state.discrimination = bank.alpha;
  res.state.beta = bank.flat_beta();
  res.state.s = s;
  res.state.round = evaluations;
  res.state.bfgs = br.state;
  return res;
}

inline nlohmann::json params_payload(const ItemBank& bank, double s) {
  nlohmann::json p = {{"alpha", bank.alpha}, {"s", s}};
  if (bank.kind == ModelKind::k2PL) {
    std::vector<double> beta;
    for (const auto& st : bank.steps) beta.push_back(st.front());
    p["beta"] = beta;
  } else {
    p["steps"] = bank.steps;
  }
  return p;
}

inline nlohmann::json setup_payload(ModelKind model, double theta0, int q, int num_schools,
                                    std::span<const int> categories, bool estimate_s) {
  return {{"model", to_string(model)},
          {"grid", {{"theta0", theta0}, {"q", q}}},
          {"num_schools", num_schools},
          {"categories", std::vector<int>(categories.begin(), categories.end())},
          {"estimate_s", estimate_s}};
}

// Plain federated calibration over a handshaken session. Each objective
// evaluation is one communication round: PARAMS to every school, then one
// GRADS from each (barrier), summed into the global gradient with school
// k's d_s in slot k.
inline FitResult center_fit_plain(CenterSession& session, const PlainFitOptions& opt) {
  const int K = session.num_schools();
  const std::vector<int> categories = opt.categories.value_or(session.merged_categories());
  if (categories.size() != session.schools().front().categories.size()) {
    throw ConfigError("configured categories do not match the schools' item count");
  }
  const bool estimate_s = opt.estimate_s && K > 1;
  const auto init = ItemBank::initial(opt.model, categories);  // validates categories
  const std::size_t dim = init.items() + init.beta_size();
  int round = 0;

  try {
    session.broadcast(make_message(MessageType::kSetup, 0,
                                   setup_payload(opt.model, opt.theta0, opt.q, K, categories,
                                                 estimate_s)));
    const PlainObjective objective = [&](const ItemBank& bank, const std::vector<double>& s) {
      ++round;
      for (int k = 0; k < K; ++k) {
        session.send_to(k, make_message(MessageType::kParams, round, params_payload(bank, s[k])));
      }
      Evaluation e{0.0, std::vector<double>(dim + K, 0.0)};
      for (int k = 0; k < K; ++k) {
        const GradientMessage g = gradient_from(session.receive_from(k));
        if (g.round != round) throw ProtocolError("GRADS for a stale round");
        if (g.school_id != k) throw ProtocolError("GRADS from the wrong school");
        if (g.grad.size() != dim + 1) throw ProtocolError("GRADS has the wrong dimension");
        for (std::size_t c = 0; c < dim; ++c) e.gradient[c] += g.grad[c];
        e.gradient[dim + k] = g.grad[dim];
        e.value += g.loglik;
      }
      return e;
    };
    PlainFitOptions o = opt;
    o.estimate_s = estimate_s;
    FitResult res = fit_plain(objective, categories, K, o);
    res.report.mode = "federated";
    session.finish();
    return res;
  } catch (const ProtocolError& e) {
    session.abort_all(e.what());
    throw;
  }
}

// Pooled engine: the center holds every school's rows (with their school
// labels) and evaluates the objective in a single pass over all rows.
inline Evaluation pooled_objective(std::span<const ResponseMatrix> schools, const ItemBank& bank,
                                   std::span<const double> s, const QuadratureGrid& grid) {
  const std::size_t dim = bank.items() + bank.beta_size();
  const std::size_t K = schools.size();
  Evaluation e{0.0, std::vector<double>(dim + K, 0.0)};
  std::vector<double> g(dim + 1);
  const auto run = [&](const auto& table, std::size_t k) {
    const auto& x = schools[k];
    for (std::size_t i = 0; i < x.rows(); ++i) {
      e.value += student_score_into(x.row(i), table, AlphaScale::kNatural, g);
      for (std::size_t c = 0; c < dim; ++c) e.gradient[c] += g[c];
      e.gradient[dim + k] += g[dim];
    }
  };
  const auto items2 = bank.kind == ModelKind::k2PL ? bank.as_2pl() : std::vector<ItemParams2PL>{};
  const auto itemsp = bank.kind == ModelKind::kPCM ? bank.as_pcm() : std::vector<ItemParamsPCM>{};
  for (std::size_t k = 0; k < K; ++k) {
    check_compatible(schools[k], bank);
    if (bank.kind == ModelKind::k2PL) {
      run(NodeTable2PL(items2, s[k], grid), k);
    } else {
      run(NodeTablePCM(itemsp, s[k], grid), k);
    }
  }
  return e;
}

inline std::vector<int> pooled_categories(std::span<const ResponseMatrix> schools) {
  if (schools.empty()) throw ConfigError("no school data");
  std::vector<int> out = schools.front().categories();
  for (const auto& x : schools) {
    if (x.items() != out.size()) throw ConfigError("schools have different item counts");
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = std::max(out[j], x.categories()[j]);
  }
  return out;
}

inline FitResult central_fit_plain(std::span<const ResponseMatrix> schools,
                                   const PlainFitOptions& opt) {
  const auto grid = build_grid(opt.theta0, opt.q);
  const std::vector<int> categories = opt.categories.value_or(pooled_categories(schools));
  const PlainObjective objective = [&](const ItemBank& bank, const std::vector<double>& s) {
    return pooled_objective(schools, bank, s, grid);
  };
  FitResult res = fit_plain(objective, categories, static_cast<int>(schools.size()), opt);
  res.report.mode = "central";
  return res;
}

struct DpFitOptions {
  DPConfig dp;
  double theta0 = 4.0;
  int q = 21;
  double eta_a = 0.05;
  double eta_beta = 0.05;
  double eta_s = 0.05;
  double stop_tol = 1e-3;
  bool estimate_s = true;
  std::uint64_t seed = 0;
  int polyak_window = 10;
  double clamp_lo = 0.2;
  double clamp_hi = 3.0;
  int clamp_rounds = 10;
  std::function<void(const std::string&)> log;
};

namespace detail {

inline ParamSnapshot polyak_mean(const std::deque<ParamSnapshot>& buf) {
  ParamSnapshot out = buf.front();
  for (std::size_t i = 1; i < buf.size(); ++i) {
    for (std::size_t c = 0; c < out.alpha.size(); ++c) out.alpha[c] += buf[i].alpha[c];
    for (std::size_t c = 0; c < out.beta.size(); ++c) out.beta[c] += buf[i].beta[c];
    for (std::size_t c = 0; c < out.s.size(); ++c) out.s[c] += buf[i].s[c];
  }
  const double n = static_cast<double>(buf.size());
  for (double& v : out.alpha) v /= n;
  for (double& v : out.beta) v /= n;
  for (double& v : out.s) v /= n;
  return out;
}

}  // namespace detail

// Stateless pieces of one DP center round after the noisy sum is known:
// MAP penalty, Adam ascent, alpha clamp in early rounds, recentering and the
// Polyak buffer. Returns the MAP gradient.
inline std::vector<double> dp_center_update(ModelState& st, std::span<const double> noisy_sum,
                                            const DpFitOptions& opt, bool estimate_s) {
  const std::size_t J = st.discrimination.size();
  const std::size_t K = st.s.size();
  const std::size_t dim = 2 * J + (estimate_s ? K : 0);
  if (noisy_sum.size() != dim) throw ContractError("noisy sum has the wrong dimension");
  const std::span<const double> s_block =
      estimate_s ? std::span<const double>(st.s) : std::span<const double>();
  const auto penalty = map_penalty(st.discrimination, st.beta, s_block, opt.dp.tau_a,
                                   opt.dp.tau_beta, opt.dp.tau_s);
  std::vector<double> g_map(dim);
  for (std::size_t c = 0; c < dim; ++c) g_map[c] = noisy_sum[c] - penalty[c];

  std::vector<double> lr(dim);
  for (std::size_t c = 0; c < dim; ++c) lr[c] = c < J ? opt.eta_a : (c < 2 * J ? opt.eta_beta : opt.eta_s);
  AdamStep step = adam_step(st.adam, g_map, lr);
  st.adam = std::move(step.state);
  ++st.round;
  for (std::size_t j = 0; j < J; ++j) {
    double alpha = std::exp(st.discrimination[j] + step.delta[j]);
    if (st.round <= opt.clamp_rounds) alpha = std::clamp(alpha, opt.clamp_lo, opt.clamp_hi);
    st.discrimination[j] = std::log(alpha);
  }
  for (std::size_t j = 0; j < J; ++j) st.beta[j] += step.delta[J + j];
  if (estimate_s) {
    for (std::size_t k = 0; k < K; ++k) st.s[k] += step.delta[2 * J + k];
    st.recenter_s();
  }
  st.polyak.push_back({st.alpha(), st.beta, st.s});
  while (static_cast<int>(st.polyak.size()) > opt.polyak_window) st.polyak.pop_front();
  return g_map;
}

inline ModelState dp_initial_state(std::size_t J, int K, bool estimate_s) {
  ModelState st;
  st.scale = AlphaScale::kLog;
  st.discrimination.assign(J, 0.0);
  st.beta.assign(J, 0.0);
  st.s.assign(K, 0.0);
  st.adam = AdamState::zeros(2 * J + (estimate_s ? K : 0));
  return st;
}

// DP federated calibration (2PL). Per round: PARAMS broadcast, one masked
// share per school, secure aggregate, central Gaussian noise (sd sigma*C),
// MAP-Adam update. Returns the Polyak average of the last rounds and the
// privacy ledger of the rounds actually executed. Protocol failures end the
// run early with report.aborted set; spend up to that point is kept.
inline FitResult center_fit_dp(CenterSession& session, const DpFitOptions& opt) {
  opt.dp.validate();
  const int K = session.num_schools();
  const std::vector<int> categories = session.merged_categories();
  for (int c : categories) {
    if (c != 2) throw ConfigError("DP calibration supports the 2PL model only");
  }
  const std::size_t J = categories.size();
  const bool estimate_s = opt.estimate_s && K > 1;
  const Rng master(opt.seed);
  const auto schedule = PairwiseMaskSchedule::generate(K, master.split("secure-agg-masks"));
  Rng subsample_seeds = master.split("school-subsampling");
  Rng noise = master.split("central-noise");

  FitResult res;
  res.report.mode = "federated-dp";
  res.ledger = PrivacyLedger(opt.dp.delta);
  ModelState st = dp_initial_state(J, K, estimate_s);
  const std::size_t dim = 2 * J + (estimate_s ? K : 0);

  try {
    for (int k = 0; k < K; ++k) {
      nlohmann::json setup = setup_payload(ModelKind::k2PL, opt.theta0, opt.q, K, categories, estimate_s);
      nlohmann::json peers = nlohmann::json::array();
      for (const auto& p : schedule.keys_for(k).peers) peers.push_back({{"peer", p.peer}, {"seed", p.seed}});
      setup["dp"] = {{"q_s", opt.dp.sample_rate},
                     {"C", opt.dp.clip_norm},
                     {"subsample_seed", subsample_seeds()},
                     {"mask_peers", peers}};
      session.send_to(k, make_message(MessageType::kSetup, 0, setup));
    }

    for (int t = 1; t <= opt.dp.max_rounds; ++t) {
      ItemBank bank;
      bank.alpha = st.alpha();
      for (double b : st.beta) bank.steps.push_back({b});
      for (int k = 0; k < K; ++k) {
        session.send_to(k, make_message(MessageType::kParams, t, params_payload(bank, st.s[k])));
      }
      ++res.report.communication_rounds;
      std::vector<MaskedShare> shares;
      for (int k = 0; k < K; ++k) shares.push_back(share_from(session.receive_from(k)));
      for (const auto& sh : shares) {
        if (sh.payload.size() != dim) throw ProtocolError("masked share has the wrong dimension");
      }
      const auto sum = aggregate_and_decode(shares, K, t);
      const auto noisy = gaussian_mechanism(sum, opt.dp.noise_multiplier, opt.dp.clip_norm, noise);
      res.ledger->record_round(opt.dp.sample_rate, opt.dp.noise_multiplier);

      std::vector<double> before(st.discrimination);
      before.insert(before.end(), st.beta.begin(), st.beta.end());
      if (estimate_s) before.insert(before.end(), st.s.begin(), st.s.end());

      const auto g_map = dp_center_update(st, noisy, opt, estimate_s);

      std::vector<double> after(st.discrimination);
      after.insert(after.end(), st.beta.begin(), st.beta.end());
      if (estimate_s) after.insert(after.end(), st.s.begin(), st.s.end());
      double change = 0.0;
      for (std::size_t c = 0; c < after.size(); ++c) change = std::max(change, std::abs(after[c] - before[c]));
      const double rel_change = change / std::max(1.0, sup_norm(before));
      const double g_sup = sup_norm(g_map);

      res.report.iterations = t;
      res.report.grad_sup_norm = g_sup;
      std::ostringstream os;
      os.precision(10);
      os << "round " << t << " grad_sup " << g_sup << " rel_change " << rel_change;
      res.report.log.push_back(os.str());
      if (opt.log) opt.log(os.str());
      if (g_sup < opt.stop_tol && rel_change < opt.stop_tol) {
        res.report.converged = true;
        break;
      }
    }
    session.finish();
  } catch (const ProtocolError& e) {
    res.report.aborted = true;
    res.report.abort_reason = e.what();
    session.abort_all(e.what());
  } catch (const RangeError& e) {
    res.report.aborted = true;
    res.report.abort_reason = e.what();
    session.abort_all(e.what());
  }

  ParamSnapshot avg = st.polyak.empty() ? ParamSnapshot{st.alpha(), st.beta, st.s}
                                        : detail::polyak_mean(st.polyak);
  if (estimate_s) {
    const double m = mean(avg.s);
    for (double& v : avg.s) v -= m;
  }
  res.items.kind = ModelKind::k2PL;
  res.items.alpha = avg.alpha;
  for (double b : avg.beta) res.items.steps.push_back({b});
  res.s = avg.s;
  res.state = std::move(st);
  return res;
}

}  // namespace fedcal

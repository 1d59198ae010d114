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

// Run configuration and the command implementations behind the CLI.
//
// RunConfig JSON (every key optional unless noted):
//   mode        central | federated | federated-dp | meta | random-effect | random-effect-dp
//   model       2pl | pcm
//   grid        {theta0, q}
//   estimate_school_effects  bool
//   tol, max_rounds, seed
//   data        [csv paths], one school each, relative to the config file
//   categories  [C_j] (default: inferred from the data)
//   output_dir  default "."
//   truth       truth.json from gen-data; adds recovery metrics to estimates.json
//   score       bool; writes score.json with per-student EAP abilities
//   transport   {kind: direct | loopback | tcp, host, port, timeout_s, num_schools}
//   dp          {q_s, C, sigma, delta, R, tau_a, tau_beta, tau_s, eta_a, eta_beta, eta_s, stop_tol}
//   generate    {J, K, N_k, alpha_range, beta_range, s_true, contamination, rho}

#include <cstdint>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "fedcal/accountant.hpp"
#include "fedcal/errors.hpp"
#include "fedcal/io.hpp"
#include "fedcal/methods.hpp"
#include "fedcal/sim.hpp"

namespace fedcal {

struct TransportConfig {
  std::string kind = "loopback";
  std::string host = "127.0.0.1";
  int port = 0;
  double timeout_s = 30.0;
  int num_schools = 0;  // serve: schools to wait for
};

struct RunConfig {
  Method mode = Method::kFederated;
  ModelKind model = ModelKind::k2PL;
  double theta0 = 4.0;
  int q = 21;
  bool estimate_s = true;
  double tol = 1e-4;
  int max_rounds = 500;
  std::uint64_t seed = 1;
  std::vector<std::string> data;
  std::optional<std::vector<int>> categories;
  std::string output_dir = ".";
  std::optional<std::string> truth;
  bool score = false;
  TransportConfig transport;
  std::optional<DpFitOptions> dp;
  StudyConfig generate;

  void validate() const {
    if (is_dp(mode) && !dp) throw ConfigError("mode " + to_string(mode) + " requires a dp block");
    if (!is_dp(mode) && dp) throw ConfigError("dp block is only allowed with a DP mode");
    if (is_dp(mode) && model == ModelKind::kPCM) throw ConfigError("pcm is not supported with DP modes");
    if (dp) dp->dp.validate();
    if (!(tol > 0.0)) throw ConfigError("tol must be positive");
    if (max_rounds < 1) throw ConfigError("max_rounds must be at least 1");
    if (!(theta0 > 0.0) || q < 2) throw ConfigError("grid needs theta0 > 0 and q >= 2");
    if (transport.kind != "direct" && transport.kind != "loopback" && transport.kind != "tcp") {
      throw ConfigError("transport.kind must be direct, loopback or tcp");
    }
    if (!(transport.timeout_s > 0.0)) throw ConfigError("transport.timeout_s must be positive");
    if (transport.port < 0 || transport.port > 65535) throw ConfigError("transport.port out of range");
  }

  Millis timeout() const { return Millis(static_cast<long long>(transport.timeout_s * 1000.0)); }

  MethodOptions method_options() const {
    MethodOptions m;
    m.plain.model = model;
    m.plain.theta0 = theta0;
    m.plain.q = q;
    m.plain.estimate_s = estimate_s;
    m.plain.tol = tol;
    m.plain.max_iter = max_rounds;
    m.plain.categories = categories;
    if (dp) m.dp = *dp;
    m.dp.theta0 = theta0;
    m.dp.q = q;
    m.dp.estimate_s = estimate_s;
    m.dp.seed = seed;
    m.link = transport.kind == "direct" ? InProcess::kDirect
             : transport.kind == "tcp"  ? InProcess::kTcp
                                        : InProcess::kLoopback;
    m.timeout = timeout();
    m.host = transport.host;
    m.port = transport.port;
    return m;
  }
};

namespace detail {

inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                       const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <class T>
void read_opt(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + "." + key + " has the wrong type");
  }
}

inline std::string resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() || base.empty() ? p : (base / path).string();
}

}  // namespace detail

inline DpFitOptions dp_from_json(const nlohmann::json& j) {
  detail::check_keys(j, {"q_s", "C", "sigma", "delta", "R", "tau_a", "tau_beta", "tau_s", "eta_a", "eta_beta",
                         "eta_s", "stop_tol"},
                     "dp");
  DpFitOptions o;
  detail::read_opt(j, "q_s", o.dp.sample_rate, "dp");
  detail::read_opt(j, "C", o.dp.clip_norm, "dp");
  detail::read_opt(j, "sigma", o.dp.noise_multiplier, "dp");
  detail::read_opt(j, "delta", o.dp.delta, "dp");
  detail::read_opt(j, "R", o.dp.max_rounds, "dp");
  detail::read_opt(j, "tau_a", o.dp.tau_a, "dp");
  detail::read_opt(j, "tau_beta", o.dp.tau_beta, "dp");
  detail::read_opt(j, "tau_s", o.dp.tau_s, "dp");
  detail::read_opt(j, "eta_a", o.eta_a, "dp");
  detail::read_opt(j, "eta_beta", o.eta_beta, "dp");
  detail::read_opt(j, "eta_s", o.eta_s, "dp");
  detail::read_opt(j, "stop_tol", o.stop_tol, "dp");
  o.dp.validate();
  return o;
}

// `base` is the directory relative data paths are resolved against.
inline RunConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base = {}) {
  detail::check_keys(j, {"mode", "model", "grid", "estimate_school_effects", "tol", "max_rounds", "seed",
                         "data", "categories", "output_dir", "truth", "score", "transport", "dp",
                         "generate"},
                     "config");
  RunConfig c;
  std::string s;
  if (j.contains("mode")) {
    detail::read_opt(j, "mode", s, "config");
    c.mode = parse_method(s);
  }
  if (j.contains("model")) {
    detail::read_opt(j, "model", s, "config");
    c.model = parse_model_kind(s);
  }
  if (j.contains("grid")) {
    detail::check_keys(j["grid"], {"theta0", "q"}, "grid");
    detail::read_opt(j["grid"], "theta0", c.theta0, "grid");
    detail::read_opt(j["grid"], "q", c.q, "grid");
  }
  detail::read_opt(j, "estimate_school_effects", c.estimate_s, "config");
  detail::read_opt(j, "tol", c.tol, "config");
  detail::read_opt(j, "max_rounds", c.max_rounds, "config");
  detail::read_opt(j, "seed", c.seed, "config");
  detail::read_opt(j, "data", c.data, "config");
  for (auto& d : c.data) d = detail::resolve(base, d);
  if (j.contains("categories")) {
    std::vector<int> cats;
    detail::read_opt(j, "categories", cats, "config");
    c.categories = cats;
  }
  detail::read_opt(j, "output_dir", c.output_dir, "config");
  c.output_dir = detail::resolve(base, c.output_dir);
  if (j.contains("truth")) {
    detail::read_opt(j, "truth", s, "config");
    c.truth = detail::resolve(base, s);
  }
  detail::read_opt(j, "score", c.score, "config");
  if (j.contains("transport")) {
    const auto& t = j["transport"];
    detail::check_keys(t, {"kind", "host", "port", "timeout_s", "num_schools"}, "transport");
    detail::read_opt(t, "kind", c.transport.kind, "transport");
    detail::read_opt(t, "host", c.transport.host, "transport");
    detail::read_opt(t, "port", c.transport.port, "transport");
    detail::read_opt(t, "timeout_s", c.transport.timeout_s, "transport");
    detail::read_opt(t, "num_schools", c.transport.num_schools, "transport");
  }
  if (j.contains("dp")) c.dp = dp_from_json(j["dp"]);
  if (j.contains("generate")) {
    const auto& g = j["generate"];
    detail::check_keys(g, {"J", "K", "N_k", "alpha_range", "beta_range", "s_true", "contamination", "rho"},
                       "generate");
    auto& sc = c.generate;
    detail::read_opt(g, "J", sc.J, "generate");
    detail::read_opt(g, "K", sc.K, "generate");
    detail::read_opt(g, "N_k", sc.N_k, "generate");
    std::vector<double> range;
    if (g.contains("alpha_range")) {
      detail::read_opt(g, "alpha_range", range, "generate");
      if (range.size() != 2) throw ConfigError("generate.alpha_range needs [lo, hi]");
      sc.alpha_lo = range[0];
      sc.alpha_hi = range[1];
    }
    if (g.contains("beta_range")) {
      detail::read_opt(g, "beta_range", range, "generate");
      if (range.size() != 2) throw ConfigError("generate.beta_range needs [lo, hi]");
      sc.beta_lo = range[0];
      sc.beta_hi = range[1];
    }
    detail::read_opt(g, "s_true", sc.s_true, "generate");
    if (g.contains("contamination")) {
      detail::read_opt(g, "contamination", s, "generate");
      sc.contamination = parse_contamination(s);
    }
    detail::read_opt(g, "rho", sc.rho, "generate");
  }
  c.generate.seed = c.seed;
  c.generate.T = 1;
  c.validate();
  return c;
}

inline RunConfig load_config(const std::string& path) {
  const std::filesystem::path p(path);
  return config_from_json(read_json_file(path), p.parent_path());
}

// Reads every school CSV with one shared category vector.
inline std::vector<ResponseMatrix> load_schools(const RunConfig& cfg) {
  if (cfg.data.empty()) throw ConfigError("config lists no data files");
  std::vector<RawResponses> raw;
  for (const auto& path : cfg.data) raw.push_back(read_raw_csv(path));
  std::vector<int> cats;
  if (cfg.categories) {
    cats = *cfg.categories;
  } else if (cfg.model == ModelKind::k2PL) {
    cats.assign(raw.front().items, 2);
  } else {
    cats = infer_categories(raw);
  }
  std::vector<ResponseMatrix> out;
  for (const auto& r : raw) out.push_back(to_matrix(r, cats));
  return out;
}

namespace detail {

inline nlohmann::json estimates_json(const Estimate& est, const RunConfig& cfg) {
  nlohmann::json j;
  j["mode"] = to_string(est.method);
  j["model"] = to_string(est.items.kind);
  j["alpha"] = est.items.alpha;
  if (est.items.kind == ModelKind::k2PL) {
    j["beta"] = est.items.flat_beta();
  } else {
    j["steps"] = est.items.steps;
  }
  j["s"] = est.s;
  j["rounds"] = est.report.communication_rounds;
  j["iterations"] = est.report.iterations;
  j["converged"] = est.report.converged;
  j["loglik"] = est.report.loglik;
  j["grad_sup_norm"] = est.report.grad_sup_norm;
  j["seed"] = cfg.seed;
  if (est.ledger) {
    j["epsilon"] = est.ledger->epsilon();
    j["delta"] = est.ledger->delta();
    j["dp_rounds"] = est.ledger->rounds();
  } else {
    j["epsilon"] = nullptr;
    j["delta"] = nullptr;
  }
  if (est.report.aborted) j["aborted"] = est.report.abort_reason;
  return j;
}

inline std::string fit_log(const Estimate& est) {
  std::ostringstream os;
  os << "mode " << to_string(est.method) << "\n";
  for (std::size_t k = 0; k < est.local_reports.size(); ++k) {
    os << "school " << k << " local fit\n";
    for (const auto& l : est.local_reports[k].log) os << "  " << l << "\n";
  }
  for (const auto& l : est.report.log) os << l << "\n";
  os << "converged " << (est.report.converged ? "yes" : "no") << "\n";
  if (est.report.stalled) os << "stalled after " << est.report.fallback_steps << " fallback steps\n";
  if (est.report.aborted) os << "aborted: " << est.report.abort_reason << "\n";
  if (est.ledger) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", est.ledger->epsilon());
    os << "privacy epsilon " << buf << " delta " << est.ledger->delta() << " rounds " << est.ledger->rounds()
       << "\n";
  }
  return os.str();
}

}  // namespace detail

inline nlohmann::json recovery_metrics(const Estimate& est, const nlohmann::json& truth) {
  Truth t;
  t.alpha = truth.at("alpha").get<std::vector<double>>();
  t.beta = truth.at("beta").get<std::vector<double>>();
  t.s = truth.at("s").get<std::vector<double>>();
  ReplicationEstimate r{est.items.alpha, est.items.flat_beta(), est.s, est.report.converged, 0.0};
  const auto m = score_replications(std::span<const ReplicationEstimate>(&r, 1), t);
  return {{"mse_alpha", m.mse_alpha}, {"mse_beta", m.mse_beta}, {"bias_alpha", m.bias_alpha},
          {"bias_beta", m.bias_beta}, {"mse_s", m.mse_s},       {"bias_s", m.bias_s}};
}

inline nlohmann::json eap_scores(std::span<const ResponseMatrix> schools, const Estimate& est,
                                 double theta0, int q) {
  const auto grid = build_grid(theta0, q);
  nlohmann::json out = nlohmann::json::array();
  for (std::size_t k = 0; k < schools.size(); ++k) {
    const double s = k < est.s.size() ? est.s[k] : 0.0;
    nlohmann::json theta = nlohmann::json::array();
    nlohmann::json sd = nlohmann::json::array();
    const auto add = [&](const auto& table) {
      for (std::size_t i = 0; i < schools[k].rows(); ++i) {
        const auto e = eap_ability(schools[k].row(i), table);
        theta.push_back(e.theta);
        sd.push_back(e.posterior_sd);
      }
    };
    if (est.items.kind == ModelKind::k2PL) {
      const auto items = est.items.as_2pl();
      add(NodeTable2PL(items, s, grid));
    } else {
      const auto items = est.items.as_pcm();
      add(NodeTablePCM(items, s, grid));
    }
    out.push_back({{"school", k}, {"theta", theta}, {"posterior_sd", sd}});
  }
  return out;
}

inline void write_outputs(const Estimate& est, const RunConfig& cfg, std::span<const ResponseMatrix> schools) {
  const std::filesystem::path dir(cfg.output_dir);
  nlohmann::json j = detail::estimates_json(est, cfg);
  if (cfg.truth) j["recovery"] = recovery_metrics(est, read_json_file(*cfg.truth));
  write_text_file(dir / "estimates.json", j.dump(2) + "\n");
  write_text_file(dir / "fit.log", detail::fit_log(est));
  if (cfg.score && !schools.empty()) {
    write_text_file(dir / "score.json", eap_scores(schools, est, cfg.theta0, cfg.q).dump(2) + "\n");
  }
}

// calibrate: all roles in this process.
inline Estimate cmd_calibrate(const RunConfig& cfg) {
  const auto schools = load_schools(cfg);
  const Estimate est = estimate(cfg.mode, schools, cfg.method_options());
  write_outputs(est, cfg, schools);
  return est;
}

// serve: the center over TCP; waits for transport.num_schools joins.
inline Estimate cmd_serve(const RunConfig& cfg, const std::function<void(int)>& on_listen = {}) {
  if (cfg.mode != Method::kFederated && cfg.mode != Method::kFederatedDp) {
    throw ConfigError("serve supports the federated and federated-dp modes");
  }
  if (cfg.transport.num_schools < 1) throw ConfigError("serve needs transport.num_schools >= 1");
  const auto mo = cfg.method_options();
  TcpListener listener(cfg.transport.host, cfg.transport.port);
  if (on_listen) on_listen(listener.port());
  std::vector<std::unique_ptr<Channel>> channels;
  for (int k = 0; k < cfg.transport.num_schools; ++k) channels.push_back(listener.accept(mo.timeout));
  CenterSession session(std::move(channels), mo.timeout);
  FitResult r;
  try {
    session.handshake();
    r = cfg.mode == Method::kFederated ? center_fit_plain(session, mo.plain) : center_fit_dp(session, mo.dp);
  } catch (const std::exception& e) {
    session.abort_all(e.what());
    throw;
  }
  Estimate est;
  est.method = cfg.mode;
  est.items = std::move(r.items);
  est.s = std::move(r.s);
  est.report = std::move(r.report);
  est.report.mode = to_string(cfg.mode);
  est.ledger = std::move(r.ledger);
  write_outputs(est, cfg, {});
  if (est.report.aborted) throw ProtocolError("round aborted: " + est.report.abort_reason);
  return est;
}

// join: one school over TCP.
inline void cmd_join(const RunConfig& cfg, int school_id, const std::string& data_path) {
  std::vector<int> cats;
  const RawResponses raw = read_raw_csv(data_path);
  if (cfg.categories) {
    cats = *cfg.categories;
  } else if (cfg.model == ModelKind::k2PL) {
    cats.assign(raw.items, 2);
  } else {
    cats = infer_categories(std::span<const RawResponses>(&raw, 1));
  }
  SchoolNode node(school_id, to_matrix(raw, cats));
  auto ch = tcp_connect(cfg.transport.host, cfg.transport.port, cfg.timeout());
  node.run(*ch, cfg.timeout());
}

// gen-data: one CSV per school plus truth.json.
inline void cmd_gen_data(const RunConfig& cfg, const std::filesystem::path& out_dir) {
  const Dataset d = generate_dataset(cfg.generate, 0);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  nlohmann::json truth;
  std::vector<double> alpha;
  std::vector<double> beta;
  for (const auto& it : d.items) {
    alpha.push_back(it.alpha);
    beta.push_back(it.beta);
  }
  truth["alpha"] = alpha;
  truth["beta"] = beta;
  truth["s"] = d.s;
  truth["theta"] = d.theta;
  truth["seed"] = cfg.seed;
  nlohmann::json files = nlohmann::json::array();
  for (std::size_t k = 0; k < d.schools.size(); ++k) {
    const std::string name = "school_" + std::to_string(k + 1) + ".csv";
    write_response_csv(out_dir / name, d.schools[k], "k" + std::to_string(k + 1) + "_");
    files.push_back(name);
  }
  truth["files"] = files;
  write_text_file(out_dir / "truth.json", truth.dump(2) + "\n");
}

inline nlohmann::json cmd_accountant(double q, double sigma, int rounds, double delta) {
  if (!(q > 0.0 && q <= 1.0)) throw ConfigError("q_s must be in (0, 1]");
  if (!(sigma > 0.0)) throw ConfigError("sigma must be positive");
  if (!(delta > 0.0 && delta < 1.0)) throw ConfigError("delta must be in (0, 1)");
  if (rounds < 0) throw ConfigError("rounds must be nonnegative");
  const PrivacyLedger ledger = ledger_for(q, sigma, rounds, delta);
  const RdpCurve total = ledger.composed();
  int best_order = 0;
  double best = std::numeric_limits<double>::infinity();
  if (rounds > 0) {
    for (std::size_t i = 0; i < total.orders.size(); ++i) {
      const double v = total.eps[i] - std::log(delta) / (total.orders[i] - 1);
      if (v < best) {
        best = v;
        best_order = total.orders[i];
      }
    }
  }
  nlohmann::json j = {{"q_s", q},
                      {"sigma", sigma},
                      {"rounds", rounds},
                      {"delta", delta},
                      {"epsilon", ledger.epsilon()},
                      {"orders", total.orders},
                      {"rdp", total.eps}};
  j["best_order"] = rounds > 0 ? nlohmann::json(best_order) : nlohmann::json(nullptr);
  return j;
}

}  // namespace fedcal

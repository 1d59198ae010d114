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

// fedcal command line: gen-data, calibrate, serve, join, accountant, study.
//
// Exit codes: 0 success, 2 invalid configuration or data, 3 protocol
// failure, 4 I/O failure, 1 anything else.

#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "fedcal/app.hpp"

namespace {

using nlohmann::json;

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class T>
std::vector<T> parse_list(const std::string& s, const char* flag) {
  std::vector<T> out;
  for (const auto& item : split_list(s)) {
    try {
      std::size_t used = 0;
      if constexpr (std::is_floating_point_v<T>) {
        out.push_back(static_cast<T>(std::stod(item, &used)));
      } else {
        out.push_back(static_cast<T>(std::stoull(item, &used)));
      }
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw fedcal::ConfigError(std::string("--") + flag + ": bad list entry '" + item + "'");
    }
  }
  return out;
}

// Config file values overridden by whichever flags were given.
struct Overrides {
  std::string config;
  std::string mode, model, output_dir, transport, host;
  std::uint64_t seed = 0;
  int port = -1;
  int num_schools = -1;
  int max_rounds = -1;
  double tol = -1.0;
  double timeout_s = -1.0;
  bool seed_set = false;

  fedcal::RunConfig load() const {
    json j = json::object();
    std::filesystem::path base;
    if (!config.empty()) {
      j = fedcal::read_json_file(config);
      base = std::filesystem::path(config).parent_path();
    }
    if (!mode.empty()) j["mode"] = mode;
    if (!model.empty()) j["model"] = model;
    if (!output_dir.empty()) j["output_dir"] = std::filesystem::absolute(output_dir).string();
    if (seed_set) j["seed"] = seed;
    if (max_rounds >= 0) j["max_rounds"] = max_rounds;
    if (tol > 0.0) j["tol"] = tol;
    if (!transport.empty()) j["transport"]["kind"] = transport;
    if (!host.empty()) j["transport"]["host"] = host;
    if (port >= 0) j["transport"]["port"] = port;
    if (num_schools >= 0) j["transport"]["num_schools"] = num_schools;
    if (timeout_s > 0.0) j["transport"]["timeout_s"] = timeout_s;
    return fedcal::config_from_json(j, base);
  }
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("-c,--config", o.config, "Run configuration JSON");
  cmd->add_option("--mode", o.mode, "central|federated|federated-dp|meta|random-effect|random-effect-dp");
  cmd->add_option("--model", o.model, "2pl|pcm");
  cmd->add_option("--output-dir", o.output_dir, "Directory for estimates.json and fit.log");
  cmd->add_option("--seed", o.seed, "Master seed")->each([&o](const std::string&) { o.seed_set = true; });
  cmd->add_option("--max-rounds", o.max_rounds, "Maximum optimizer iterations");
  cmd->add_option("--tol", o.tol, "Gradient sup-norm tolerance");
  cmd->add_option("--transport", o.transport, "direct|loopback|tcp");
  cmd->add_option("--host", o.host, "Server host");
  cmd->add_option("--port", o.port, "Server port");
  cmd->add_option("--timeout", o.timeout_s, "Receive timeout in seconds");
}

int run(int argc, char** argv) {
  CLI::App app{"Federated IRT calibration with an optional differentially private path"};
  app.require_subcommand(1);

  Overrides gen_o;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen-data", "Simulate school response CSVs and truth.json");
  add_common(gen, gen_o);
  gen->add_option("-o,--out", gen_out, "Output directory")->required();

  Overrides cal_o;
  auto* cal = app.add_subcommand("calibrate", "Calibrate with every role in this process");
  add_common(cal, cal_o);

  Overrides srv_o;
  auto* srv = app.add_subcommand("serve", "Run the center and wait for schools over TCP");
  add_common(srv, srv_o);
  srv->add_option("--num-schools", srv_o.num_schools, "Schools to wait for");

  Overrides join_o;
  int school_id = -1;
  std::string join_data;
  auto* join = app.add_subcommand("join", "Run one school against a serving center");
  add_common(join, join_o);
  join->add_option("--school-id", school_id, "School id (0-based)")->required();
  join->add_option("--data", join_data, "School response CSV")->required();

  double acc_q = 1.0, acc_sigma = 1.0, acc_delta = 1e-6;
  int acc_rounds = 1;
  std::string acc_out;
  auto* acc = app.add_subcommand("accountant", "Privacy spend of repeated subsampled Gaussian rounds");
  acc->add_option("--q-s", acc_q, "Sampling rate");
  acc->add_option("--sigma", acc_sigma, "Noise multiplier");
  acc->add_option("--rounds", acc_rounds, "Number of rounds");
  acc->add_option("--delta", acc_delta, "Target delta");
  acc->add_option("-o,--out", acc_out, "Write JSON here instead of stdout");

  int study_id = 1;
  fedcal::StudyOptions st;
  std::string st_nk, st_rho, st_methods, st_conditions, st_out = "study_out";
  double st_c = -1, st_sigma = -1, st_qs = -1, st_tau_a = -1, st_tau_beta = -1, st_tau_s = -1, st_eta = -1;
  int st_r = -1;
  auto* study = app.add_subcommand("study", "Run a simulation study and write CSV/JSON reports");
  study->add_option("id", study_id, "Study 1, 2 or 3")->required();
  study->add_option("--T", st.T, "Replications per condition");
  study->add_option("--Nk", st_nk, "Comma-separated school sizes");
  study->add_option("--rho", st_rho, "Comma-separated contamination rates");
  study->add_option("--methods", st_methods, "Comma-separated methods");
  study->add_option("--conditions", st_conditions, "Comma-separated condition names");
  study->add_option("--seed", st.seed, "Master seed");
  study->add_option("--threads", st.threads, "Worker threads (0: all cores)");
  study->add_option("-o,--out", st_out, "Report directory");
  study->add_option("--C", st_c, "DP clipping norm");
  study->add_option("--sigma", st_sigma, "DP noise multiplier");
  study->add_option("--q-s", st_qs, "DP sampling rate");
  study->add_option("--R", st_r, "DP rounds");
  study->add_option("--tau-a", st_tau_a, "Prior SD of log alpha");
  study->add_option("--tau-beta", st_tau_beta, "Prior SD of beta");
  study->add_option("--tau-s", st_tau_s, "Prior SD of s");
  study->add_option("--eta", st_eta, "Adam learning rate for every block");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  if (*gen) {
    const auto cfg = gen_o.load();
    fedcal::cmd_gen_data(cfg, gen_out);
    std::cout << "wrote " << cfg.generate.K << " school files to " << gen_out << "\n";
  } else if (*cal) {
    const auto cfg = cal_o.load();
    const auto est = fedcal::cmd_calibrate(cfg);
    std::cout << "mode " << fedcal::to_string(est.method) << " converged "
              << (est.report.converged ? "yes" : "no") << "; wrote " << cfg.output_dir << "/estimates.json\n";
    if (est.report.aborted) return 3;
  } else if (*srv) {
    const auto cfg = srv_o.load();
    fedcal::cmd_serve(cfg, [](int port) { std::cout << "listening on port " << port << std::endl; });
    std::cout << "wrote " << cfg.output_dir << "/estimates.json\n";
  } else if (*join) {
    const auto cfg = join_o.load();
    fedcal::cmd_join(cfg, school_id, join_data);
  } else if (*acc) {
    const auto j = fedcal::cmd_accountant(acc_q, acc_sigma, acc_rounds, acc_delta);
    if (acc_out.empty()) {
      std::cout << j.dump(2) << "\n";
    } else {
      fedcal::write_text_file(acc_out, j.dump(2) + "\n");
    }
  } else if (*study) {
    st.study = study_id;
    if (!st_nk.empty()) st.N_k = parse_list<std::size_t>(st_nk, "Nk");
    if (!st_rho.empty()) st.rho = parse_list<double>(st_rho, "rho");
    for (const auto& m : split_list(st_methods)) st.methods.push_back(fedcal::parse_method(m));
    st.conditions = split_list(st_conditions);
    auto& dp = st.method.dp;
    if (st_c > 0) dp.dp.clip_norm = st_c;
    if (st_sigma > 0) dp.dp.noise_multiplier = st_sigma;
    if (st_qs > 0) dp.dp.sample_rate = st_qs;
    if (st_r > 0) dp.dp.max_rounds = st_r;
    if (st_tau_a > 0) dp.dp.tau_a = st_tau_a;
    if (st_tau_beta > 0) dp.dp.tau_beta = st_tau_beta;
    if (st_tau_s > 0) dp.dp.tau_s = st_tau_s;
    if (st_eta > 0) dp.eta_a = dp.eta_beta = dp.eta_s = st_eta;
    dp.dp.validate();
    if (st.T < 1) throw fedcal::ConfigError("--T must be at least 1");
    const auto result = fedcal::run_study(st);
    fedcal::write_study(result, st_out);
    std::cout << "study " << study_id << ": " << result.results.size() << " condition/method rows written to "
              << st_out << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const fedcal::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const fedcal::ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 2;
  } catch (const fedcal::ContractError& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return 2;
  } catch (const fedcal::ProtocolError& e) {
    std::cerr << "protocol error: " << e.what() << "\n";
    return 3;
  } catch (const fedcal::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

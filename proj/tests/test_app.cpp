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

#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <gtest/gtest.h>

#include "fedcal/app.hpp"

namespace fedcal {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

class AppTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("fedcal_app_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  // Small simulated dataset written through gen-data.
  RunConfig gen_config(std::size_t K = 3, std::size_t N_k = 40, std::size_t J = 5) const {
    json j = {{"seed", 11}, {"generate", {{"J", J}, {"K", K}, {"N_k", N_k}}}};
    return config_from_json(j);
  }

  json calibrate_json(const std::string& mode, std::size_t K, const fs::path& data, const fs::path& out) const {
    json files = json::array();
    for (std::size_t k = 0; k < K; ++k) files.push_back((data / ("school_" + std::to_string(k + 1) + ".csv")).string());
    return {{"mode", mode}, {"data", files}, {"output_dir", out.string()}, {"tol", 1e-6}, {"seed", 5}};
  }

  // Runs the CLI; returns its exit code and leaves stdout+stderr in `out`.
  static int cli(const std::string& args, std::string* out = nullptr) {
    const char* exe = std::getenv("FEDCAL_CLI");
    const fs::path log = fs::temp_directory_path() / ("fedcal_cli_" + std::to_string(::getpid()) + ".log");
    const std::string cmd = std::string("\"") + exe + "\" " + args + " > \"" + log.string() + "\" 2>&1";
    const int status = std::system(cmd.c_str());
    if (out) *out = slurp(log);
    fs::remove(log);
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  static bool have_cli() { return std::getenv("FEDCAL_CLI") != nullptr; }

  fs::path dir_;
};

TEST_F(AppTest, ConfigRejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(config_from_json({{"mdoe", "central"}}), ConfigError);
  EXPECT_THROW(config_from_json({{"grid", {{"theta0", 4.0}, {"n", 3}}}}), ConfigError);
  EXPECT_THROW(config_from_json({{"transport", {{"kind", "udp"}}}}), ConfigError);
  EXPECT_THROW(config_from_json({{"dp", {{"sigma", 1.0}, {"epsilon", 2.0}}}, {"mode", "federated-dp"}}),
               ConfigError);
  EXPECT_THROW(config_from_json({{"tol", "small"}}), ConfigError);
  EXPECT_THROW(config_from_json({{"mode", "bogus"}}), ConfigError);
  EXPECT_THROW(config_from_json({{"tol", 0.0}}), ConfigError);
  EXPECT_THROW(config_from_json({{"transport", {{"port", 70000}}}}), ConfigError);
}

TEST_F(AppTest, DpModeAndDpBlockMustAgree) {
  EXPECT_THROW(config_from_json({{"mode", "federated-dp"}}), ConfigError);
  EXPECT_THROW(config_from_json({{"mode", "federated"}, {"dp", json::object()}}), ConfigError);
  EXPECT_THROW(config_from_json({{"mode", "federated-dp"}, {"model", "pcm"}, {"dp", json::object()}}), ConfigError);
  EXPECT_THROW(config_from_json({{"mode", "federated-dp"}, {"dp", {{"q_s", 0.0}}}}), ConfigError);
  const auto c = config_from_json({{"mode", "federated-dp"}, {"dp", {{"sigma", 2.5}, {"C", 3.0}}}});
  ASSERT_TRUE(c.dp.has_value());
  EXPECT_EQ(c.dp->dp.noise_multiplier, 2.5);
  EXPECT_EQ(c.dp->dp.clip_norm, 3.0);
}

TEST_F(AppTest, DefaultsAndRelativePaths) {
  const auto c = config_from_json({{"data", {"a.csv", "/abs/b.csv"}}, {"output_dir", "out"}}, "/base");
  EXPECT_EQ(c.mode, Method::kFederated);
  EXPECT_EQ(c.model, ModelKind::k2PL);
  EXPECT_EQ(c.theta0, 4.0);
  EXPECT_EQ(c.q, 21);
  EXPECT_TRUE(c.estimate_s);
  EXPECT_EQ(c.data, (std::vector<std::string>{"/base/a.csv", "/abs/b.csv"}));
  EXPECT_EQ(c.output_dir, "/base/out");
}

TEST_F(AppTest, GenDataWritesSchoolsAndTruthDeterministically) {
  const auto cfg = gen_config(2, 3, 2);
  cmd_gen_data(cfg, dir_ / "a");
  cmd_gen_data(cfg, dir_ / "b");
  for (const char* f : {"school_1.csv", "school_2.csv", "truth.json"}) {
    ASSERT_TRUE(fs::exists(dir_ / "a" / f)) << f;
    EXPECT_EQ(slurp(dir_ / "a" / f), slurp(dir_ / "b" / f)) << f;
  }
  const auto raw = read_raw_csv((dir_ / "a" / "school_1.csv").string());
  EXPECT_EQ(raw.items, 2u);
  EXPECT_EQ(raw.ids.size(), 3u);
  const auto truth = read_json_file((dir_ / "a" / "truth.json").string());
  EXPECT_EQ(truth.at("alpha").size(), 2u);
  EXPECT_EQ(truth.at("s").size(), 2u);
  EXPECT_EQ(truth.at("files").size(), 2u);
  EXPECT_EQ(truth.at("seed"), 11);
}

TEST_F(AppTest, CentralAndFederatedCalibrationAgree) {
  cmd_gen_data(gen_config(), dir_ / "data");
  // Central pools rows with s = 0, so the federated fit must hold s fixed too.
  auto cj = calibrate_json("central", 3, dir_ / "data", dir_ / "c");
  auto fj = calibrate_json("federated", 3, dir_ / "data", dir_ / "f");
  cj["estimate_school_effects"] = fj["estimate_school_effects"] = false;
  const auto central = cmd_calibrate(config_from_json(cj));
  const auto fed = cmd_calibrate(config_from_json(fj));
  ASSERT_TRUE(central.report.converged);
  ASSERT_TRUE(fed.report.converged);
  for (std::size_t j = 0; j < 5; ++j) {
    EXPECT_NEAR(central.items.alpha[j], fed.items.alpha[j], 1e-6);
    EXPECT_NEAR(central.items.flat_beta()[j], fed.items.flat_beta()[j], 1e-6);
  }
  const auto e = read_json_file((dir_ / "f" / "estimates.json").string());
  EXPECT_EQ(e.at("mode"), "federated");
  EXPECT_EQ(e.at("alpha").size(), 5u);
  EXPECT_TRUE(e.at("epsilon").is_null());
  EXPECT_TRUE(fs::exists(dir_ / "f" / "fit.log"));
}

TEST_F(AppTest, ScoreAndRecoveryOutputs) {
  cmd_gen_data(gen_config(), dir_ / "data");
  auto j = calibrate_json("federated", 3, dir_ / "data", dir_ / "o");
  j["score"] = true;
  j["truth"] = (dir_ / "data" / "truth.json").string();
  cmd_calibrate(config_from_json(j));
  const auto e = read_json_file((dir_ / "o" / "estimates.json").string());
  ASSERT_TRUE(e.contains("recovery"));
  EXPECT_GE(e.at("recovery").at("mse_alpha").get<double>(), 0.0);
  const auto s = read_json_file((dir_ / "o" / "score.json").string());
  ASSERT_EQ(s.size(), 3u);
  EXPECT_EQ(s[0].at("theta").size(), 40u);
  for (double sd : s[0].at("posterior_sd").get<std::vector<double>>()) EXPECT_GT(sd, 0.0);
}

TEST_F(AppTest, FederatedDpReportsPrivacySpend) {
  cmd_gen_data(gen_config(), dir_ / "data");
  auto j = calibrate_json("federated-dp", 3, dir_ / "data", dir_ / "o");
  j["dp"] = {{"R", 20}, {"sigma", 1.0}, {"q_s", 0.5}};
  const auto est = cmd_calibrate(config_from_json(j));
  ASSERT_TRUE(est.ledger.has_value());
  const auto e = read_json_file((dir_ / "o" / "estimates.json").string());
  EXPECT_EQ(e.at("delta"), 1e-6);
  EXPECT_NEAR(e.at("epsilon").get<double>(), ledger_for(0.5, 1.0, 20, 1e-6).epsilon(), 1e-12);
  EXPECT_EQ(e.at("dp_rounds"), 20);
  EXPECT_NE(slurp(dir_ / "o" / "fit.log").find("privacy epsilon"), std::string::npos);
}

TEST_F(AppTest, ServeAndJoinMatchInProcessFederated) {
  cmd_gen_data(gen_config(), dir_ / "data");
  const auto local = cmd_calibrate(config_from_json(calibrate_json("federated", 3, dir_ / "data", dir_ / "l")));
  auto sj = calibrate_json("federated", 3, dir_ / "data", dir_ / "s");
  sj.erase("data");
  sj["transport"] = {{"kind", "tcp"}, {"port", 0}, {"num_schools", 3}, {"timeout_s", 20.0}};
  const auto scfg = config_from_json(sj);
  std::promise<int> port;
  auto port_ready = port.get_future();
  Estimate served;
  std::thread center([&] { served = cmd_serve(scfg, [&](int p) { port.set_value(p); }); });
  const int p = port_ready.get();
  std::vector<std::thread> schools;
  for (int k = 0; k < 3; ++k) {
    schools.emplace_back([&, k] {
      auto jc = sj;
      jc["transport"]["port"] = p;
      cmd_join(config_from_json(jc), k, (dir_ / "data" / ("school_" + std::to_string(k + 1) + ".csv")).string());
    });
  }
  for (auto& t : schools) t.join();
  center.join();
  EXPECT_EQ(served.items.alpha, local.items.alpha);
  EXPECT_EQ(served.items.flat_beta(), local.items.flat_beta());
  EXPECT_EQ(served.s, local.s);
}

TEST_F(AppTest, AccountantCommand) {
  EXPECT_EQ(cmd_accountant(0.5, 1.0, 0, 1e-6).at("epsilon"), 0.0);
  EXPECT_TRUE(cmd_accountant(0.5, 1.0, 0, 1e-6).at("best_order").is_null());
  const auto one = cmd_accountant(1.0, 2.0, 10, 1e-5);
  const auto two = cmd_accountant(1.0, 2.0, 20, 1e-5);
  const auto r1 = one.at("rdp").get<std::vector<double>>();
  const auto r2 = two.at("rdp").get<std::vector<double>>();
  const auto orders = one.at("orders").get<std::vector<int>>();
  ASSERT_EQ(r1.size(), r2.size());
  for (std::size_t i = 0; i < r1.size(); ++i) {
    EXPECT_NEAR(r2[i], 2.0 * r1[i], 1e-12 * r2[i]);
    EXPECT_NEAR(r1[i], 10.0 * orders[i] / 8.0, 1e-12 * r1[i]);
  }
  EXPECT_THROW(cmd_accountant(0.0, 1.0, 1, 1e-6), ConfigError);
  EXPECT_THROW(cmd_accountant(0.5, 1.0, -1, 1e-6), ConfigError);
  EXPECT_THROW(cmd_accountant(0.5, 1.0, 1, 1.0), ConfigError);
}

TEST_F(AppTest, CliAccountantWorkedValue) {
  if (!have_cli()) GTEST_SKIP() << "FEDCAL_CLI not set";
  const auto out = dir_ / "acc.json";
  ASSERT_EQ(cli("accountant --q-s 1 --sigma 1 --rounds 1 --delta 1e-6 -o \"" + out.string() + "\""), 0);
  const auto j = read_json_file(out.string());
  EXPECT_NEAR(j.at("epsilon").get<double>(), 5.763102111592855, 1e-9);
  std::string text;
  EXPECT_EQ(cli("accountant --q-s 1.5", &text), 2);
  EXPECT_NE(text.find("q_s"), std::string::npos);
}

TEST_F(AppTest, CliGenDataCalibrateAndExitCodes) {
  if (!have_cli()) GTEST_SKIP() << "FEDCAL_CLI not set";
  const auto cfg = dir_ / "gen.json";
  write_text_file(cfg, json({{"seed", 3}, {"generate", {{"J", 2}, {"K", 2}, {"N_k", 3}}}}).dump());
  ASSERT_EQ(cli("gen-data -c \"" + cfg.string() + "\" -o \"" + (dir_ / "d1").string() + "\""), 0);
  ASSERT_EQ(cli("gen-data -c \"" + cfg.string() + "\" -o \"" + (dir_ / "d2").string() + "\""), 0);
  for (const char* f : {"school_1.csv", "school_2.csv", "truth.json"}) {
    EXPECT_EQ(slurp(dir_ / "d1" / f), slurp(dir_ / "d2" / f)) << f;
  }
  EXPECT_EQ(read_raw_csv((dir_ / "d1" / "school_2.csv").string()).ids.size(), 3u);

  const auto run = dir_ / "run.json";
  write_text_file(run, json({{"data", {"d1/school_1.csv", "d1/school_2.csv"}}, {"output_dir", "out"}}).dump());
  std::string text;
  EXPECT_EQ(cli("calibrate -c \"" + run.string() + "\" --mode central", &text), 0) << text;
  EXPECT_TRUE(fs::exists(dir_ / "out" / "estimates.json"));

  EXPECT_EQ(cli("calibrate -c \"" + run.string() + "\" --mode federated-dp", &text), 2);
  EXPECT_NE(text.find("requires a dp block"), std::string::npos) << text;
  write_text_file(dir_ / "bad.json", R"({"mode": "central", "colour": 1})");
  EXPECT_EQ(cli("calibrate -c \"" + (dir_ / "bad.json").string() + "\"", &text), 2);
  EXPECT_NE(text.find("unknown key 'colour'"), std::string::npos) << text;
  write_text_file(dir_ / "missing.json", R"({"data": ["nope.csv"]})");
  EXPECT_EQ(cli("calibrate -c \"" + (dir_ / "missing.json").string() + "\""), 4);
  EXPECT_EQ(cli("calibrate --model pcm --mode federated-dp"), 2);
  EXPECT_EQ(cli("no-such-command"), 2);
}

TEST_F(AppTest, CliStudySmoke) {
  if (!have_cli()) GTEST_SKIP() << "FEDCAL_CLI not set";
  const auto s1 = dir_ / "s1";
  ASSERT_EQ(cli("study 1 --T 1 --Nk 50,100,300 --conditions high-alpha/high-beta --seed 9 -o \"" + s1.string() +
                "\""),
            0);
  const auto r1 = read_json_file((s1 / "report.json").string());
  EXPECT_EQ(r1.at("seed"), 9);
  std::set<std::string> methods;
  std::set<std::size_t> sizes;
  for (const auto& row : r1.at("results")) {
    methods.insert(row.at("method").get<std::string>());
    sizes.insert(row.at("N_k").get<std::size_t>());
  }
  EXPECT_EQ(methods, (std::set<std::string>{"central", "federated", "federated-dp", "meta"}));
  EXPECT_EQ(sizes, (std::set<std::size_t>{50, 100, 300}));
  EXPECT_TRUE(fs::exists(s1 / "summary.csv"));
  EXPECT_TRUE(fs::exists(s1 / "results.csv"));

  const auto s3 = dir_ / "s3";
  ASSERT_EQ(cli("study 3 --T 1 --rho 0.1,0.3,0.5 --conditions zeros -o \"" + s3.string() + "\""), 0);
  const auto r3 = read_json_file((s3 / "report.json").string());
  EXPECT_EQ(r3.at("seed"), 20240601);
  std::set<std::string> m3;
  std::set<double> rhos;
  for (const auto& row : r3.at("results")) {
    m3.insert(row.at("method").get<std::string>());
    rhos.insert(row.at("rho").get<double>());
  }
  EXPECT_EQ(m3, (std::set<std::string>{"federated", "federated-dp"}));
  EXPECT_EQ(rhos, (std::set<double>{0.1, 0.3, 0.5}));
  EXPECT_EQ(cli("study 4 -o \"" + (dir_ / "s4").string() + "\""), 2);
}

}  // namespace
}  // namespace fedcal

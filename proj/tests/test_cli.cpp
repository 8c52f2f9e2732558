#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "test_util.hpp"

using namespace cfpanel;
namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(CFPANEL_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

std::string first_line(const fs::path& p) {
  std::ifstream in(p);
  std::string l;
  std::getline(in, l);
  return l;
}

std::string write_sim_panel(const std::string& dir, DgpName name, Index n, unsigned long long seed) {
  const auto path = (fs::path(dir) / "panel.csv").string();
  save_panel(path, generate(DgpSpec::make(name, n, seed)).panel);
  return path;
}

} // namespace

TEST(Cli, ExitCodes) {
  const auto dir = testutil::tmp_dir("cli_codes");
  EXPECT_EQ(run("--help"), 0);
  EXPECT_EQ(run("estimate --bogus-flag"), 2);
  EXPECT_EQ(run("estimate --data " + dir + "/missing.csv --out-dir " + dir), 3);
  {
    std::ofstream(dir + "/bad.cfg") << "gfunc.eig_floor = purple\n";
  }
  const auto panel = write_sim_panel(dir, DgpName::crc_baseline, 200, 1);
  EXPECT_EQ(run("estimate --data " + panel + " --config " + dir + "/bad.cfg --out-dir " + dir), 2);
  {
    std::ofstream(dir + "/huge.cfg") << "delta0 = 1e300\n";
  }
  EXPECT_EQ(run("estimate --data " + panel + " --config " + dir + "/huge.cfg --out-dir " + dir), 4);
  {
    std::ofstream(dir + "/unbalanced.csv") << "unit,time,y,x1_1\n1,1,0,1\n1,2,1,2\n2,1,0,1\n";
  }
  EXPECT_EQ(run("estimate --data " + dir + "/unbalanced.csv --out-dir " + dir), 3);
  EXPECT_EQ(run("simulate --spec nope --out-dir " + dir), 2);
}

TEST(Cli, EstimateWritesReport) {
  const auto dir = testutil::tmp_dir("cli_estimate");
  const auto panel = write_sim_panel(dir, DgpName::crc_baseline, 600, 2);
  ASSERT_EQ(run("estimate --data " + panel + " --out-dir " + dir + " --unit-csv"), 0);
  const auto r = read_json(fs::path(dir) / "report.json");
  EXPECT_EQ(r["command"], "estimate");
  EXPECT_EQ(r["results"]["mu_hat"].size(), 2u);
  EXPECT_EQ(r["results"]["se"].size(), 2u);
  EXPECT_TRUE(r["results"]["diagnostics"].contains("min_eig"));
  EXPECT_FALSE(r.contains("timings"));
  EXPECT_EQ(r["data"]["n"], 600);
  EXPECT_EQ(first_line(fs::path(dir) / "units.csv"), "unit,used,mu_tilde_1,mu_tilde_2");

  // The CLI must agree with the library call on the same file.
  const auto a = estimate(load_panel(panel), EstimationConfig{});
  EXPECT_NEAR(r["results"]["mu_hat"][0].get<double>(), a.mu_hat(0), 1e-12);
}

TEST(Cli, BootstrapIsDeterministicAcrossThreads) {
  const auto dir = testutil::tmp_dir("cli_boot");
  const auto panel = write_sim_panel(dir, DgpName::crc_baseline, 300, 3);
  const std::string base = "estimate --data " + panel + " --inference bootstrap --B 10 --seed 5";
  ASSERT_EQ(run(base + " --threads 1 --out-dir " + dir + "/a"), 0);
  ASSERT_EQ(run(base + " --threads 2 --out-dir " + dir + "/b"), 0);
  EXPECT_EQ(slurp(fs::path(dir) / "a/report.json"), slurp(fs::path(dir) / "b/report.json"));
}

TEST(Cli, SimulateOutputsAndDeterminism) {
  const auto dir = testutil::tmp_dir("cli_sim");
  const std::string args = "simulate --spec crc-baseline --n 300 --R 3 --seed 9 --inference plugin";
  ASSERT_EQ(run(args + " --out-dir " + dir + "/a"), 0);
  ASSERT_EQ(run(args + " --out-dir " + dir + "/b"), 0);
  for (const char* f : {"mc_draws.csv", "g_band.csv", "summary.json"})
    EXPECT_EQ(slurp(fs::path(dir) / "a" / f), slurp(fs::path(dir) / "b" / f)) << f;
  EXPECT_EQ(first_line(fs::path(dir) / "a/mc_draws.csv"), "replicate,estimator,component,value,se");
  EXPECT_EQ(first_line(fs::path(dir) / "a/g_band.csv"), "v1,true_g,mean_g,q05,q95,n_ok");
  const auto s = read_json(fs::path(dir) / "a/summary.json");
  EXPECT_EQ(s["spec"], "crc-baseline");
  EXPECT_EQ(s["seed"], 9);
  EXPECT_EQ(s["estimators"].size(), 3u);
  // 3 replicates x 3 estimators x 2 components plus the header.
  const auto draws = slurp(fs::path(dir) / "a/mc_draws.csv");
  EXPECT_EQ(std::count(draws.begin(), draws.end(), '\n'), 19);
}

TEST(Cli, SimulateEstimatorList) {
  const auto dir = testutil::tmp_dir("cli_sim_list");
  ASSERT_EQ(run("simulate --spec ar1-feedback --n 300 --R 2 --estimators ape,ape_true_v --out-dir " + dir), 0);
  const auto s = read_json(fs::path(dir) / "summary.json");
  EXPECT_EQ(s["estimators"].size(), 2u);
  EXPECT_EQ(run("simulate --spec ar1-feedback --n 300 --R 2 --estimators ape,magic --out-dir " + dir), 2);
}

TEST(Cli, CrossValidationTable) {
  const auto dir = testutil::tmp_dir("cli_cv");
  const auto panel = write_sim_panel(dir, DgpName::crc_baseline, 500, 4);
  {
    std::ofstream(dir + "/cv.cfg") << "cv.candidates = power:1, power:2, power:3\n";
  }
  ASSERT_EQ(run("cv --data " + panel + " --config " + dir + "/cv.cfg --out-dir " + dir), 0);
  const auto table = slurp(fs::path(dir) / "cv.csv");
  EXPECT_EQ(table.substr(0, table.find('\n')), "spec,dim_out,cv_score,winner");
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 4);
  {
    std::ofstream(dir + "/empty.cfg") << "cv.candidates =\n";
  }
  EXPECT_EQ(run("cv --data " + panel + " --config " + dir + "/empty.cfg --out-dir " + dir), 2);
}

TEST(Cli, CheckIdentification) {
  const auto dir = testutil::tmp_dir("cli_ident");
  const auto panel = write_sim_panel(dir, DgpName::crc_baseline, 500, 5);
  ASSERT_EQ(run("check-identification --data " + panel + " --grid-points 3 --out-dir " + dir), 0);
  EXPECT_EQ(first_line(fs::path(dir) / "sweep.csv"), "v_1,v_2,v_3,v_4,lambda_min");
  const auto r = read_json(fs::path(dir) / "identification.json");
  EXPECT_EQ(r["results"]["grid_points"], 81);
  EXPECT_TRUE(r["results"]["flagged"].is_boolean());
}

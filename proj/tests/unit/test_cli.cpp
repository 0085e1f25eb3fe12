#include <gtest/gtest.h>
#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cfot/experiment.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(CFOT_CLI_PATH) + " " + args + " 2>/dev/null";
  FILE* p = popen(cmd.c_str(), "r");
  std::string out;
  std::array<char, 512> buf{};
  while (std::fgets(buf.data(), buf.size(), p)) out += buf.data();
  const int status = pclose(p);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cfot_test_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string tiny_config(const fs::path& dir) {
  const fs::path p = dir / "tiny.cfg";
  std::ofstream(p) << "# smoke run\n"
                      "dgp.n_samples=300\nmodel.hidden_dim=8\nmodel.n_blocks=1\n"
                      "train.steps=6\ntrain.batch=16\ntrain.warmup_steps=2\ntrain.eval_every=3\ntrain.log_every=3\n"
                      "train.val_rows=8\ntrain.val_k_angles=2\ntrain.nfe_eval=2\n"
                      "eval.nfe=2\neval.k_angles=2\neval.n_cycles=2\neval.test_rows=8\n"
                      "eval.monotonicity_pairs=10\neval.pushforward_n=10\ncurl.n=5\nrun.seeds=0\n";
  return p.string();
}

}  // namespace

TEST(Cli, VersionAndUsage) {
  const Result v = run("--version");
  EXPECT_EQ(v.code, 0);
  EXPECT_NE(v.out.find(std::string(cfot::kToolVersion)), std::string::npos);
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("cf --model x").code, 1);
}

TEST(Cli, BadConfigKeyIsUsageError) {
  const fs::path dir = fresh_dir("badkey");
  EXPECT_EQ(run("run --out " + (dir / "r").string() + " --set train.stepz=3").code, 1);
  EXPECT_EQ(run("run --out " + (dir / "r").string() + " --set train.steps=-3").code, 1);
  EXPECT_EQ(run("run --config " + (dir / "missing.cfg").string()).code, 1);
}

TEST(Cli, QuantileDemoShowsRankFlip) {
  const Result r = run("quantile-demo");
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("t3         0   0.8  1    0.8    1.2    0.8         0.2"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("quantile transport: 1.8"), std::string::npos);
}

TEST(Cli, GenDataWritesCsvAndSidecar) {
  const fs::path dir = fresh_dir("gen");
  const std::string out = (dir / "d.csv").string();
  const Result r = run("gen-data --set dgp.n_samples=50 --seed 3 --out " + out);
  ASSERT_EQ(r.code, 0) << r.out;
  std::ifstream is(out);
  int lines = 0;
  for (std::string l; std::getline(is, l);) ++lines;
  EXPECT_EQ(lines, 51);
  EXPECT_TRUE(fs::exists(out + ".noise"));
}

TEST(Cli, RunTableCfAndCurlMap) {
  const fs::path dir = fresh_dir("run");
  const std::string cfg = tiny_config(dir);
  const std::string out = (dir / "r").string();
  const Result r = run("run --config " + cfg + " --out " + out);
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("config_hash="), std::string::npos);

  const Result t = run("table " + out + " " + out);
  ASSERT_EQ(t.code, 0);
  EXPECT_EQ(t.out.substr(0, 12), "graph,prior,");
  EXPECT_NE(t.out.find("markovian,original,markovian_ot,ot_flow,2,2,"), std::string::npos) << t.out;
  EXPECT_EQ(run("table " + (dir / "nowhere").string()).code, 2);

  const Result ev = run("eval --config " + cfg + " --out " + out + " --nfe 4");
  ASSERT_EQ(ev.code, 0);
  EXPECT_NE(ev.out.find(",4,"), std::string::npos);

  const std::string ckpt = out + "/seed_0/model.best.ckpt";
  const std::string q = (dir / "q.csv").string();
  std::ofstream(q) << "pa,x0,x1,pa_star\n0.5,1.0,2.0,1.5\n3.0,0.2,0.4,0.0\n";
  const std::string ans = (dir / "a.csv").string();
  ASSERT_EQ(run("cf --model " + ckpt + " --queries " + q + " --out " + ans + " --nfe 3 --solver rk4").code, 0);
  std::ifstream as(ans);
  std::string header;
  std::getline(as, header);
  EXPECT_EQ(header, "pa,x0,x1,pa_star,xs0,xs1");
  int rows = 0;
  for (std::string l; std::getline(as, l);) rows += !l.empty();
  EXPECT_EQ(rows, 2);
  EXPECT_EQ(run("cf --model " + ckpt + " --queries " + q + " --out " + ans + " --solver midpoint").code, 2);

  const std::string cm = (dir / "curl.csv").string();
  ASSERT_EQ(run("curl-map --model " + ckpt + " --out " + cm + " --cond 1.0 --bounds 0,1,0,1 --n 4").code, 0);
  EXPECT_TRUE(fs::exists(cm + ".meta"));
  EXPECT_EQ(run("curl-map --model " + ckpt + " --out " + cm + " --cond 1,2 --bounds 0,1,0,1").code, 2);
}

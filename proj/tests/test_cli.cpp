#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <jitswt/analysis.hpp>

#include "support/reference.hpp"

using namespace jitswt;

namespace {

struct Proc {
  int rc = -1;
  std::string out, err;
  nlohmann::json json() const { return nlohmann::json::parse(out); }
};

std::string tmp(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "jitswt_cli_test";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

Proc jit(const std::string& args, const std::string& env = "") {
  std::string err = tmp("stderr.txt");
  std::string cmd = env + (env.empty() ? "" : " ") + std::string(JITSWT_CLI) + " " + args + " 2>" + err;
  Proc r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  int st = pclose(p);
  r.rc = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  r.err = oracle::read_file(err);
  return r;
}

std::string fx(const std::string& rel) { return oracle::fixture(rel); }

}  // namespace

TEST(Cli, RegionsAbs) {
  Proc r = jit("regions --model " + fx("abs1d.json") + " --box -1 1");
  ASSERT_EQ(r.rc, 0) << r.err;
  auto j = r.json();
  EXPECT_EQ(j["fragments"].size(), 2u);
  EXPECT_EQ(j["coverage"], "complete");
  EXPECT_TRUE(j["counters"].contains("splits"));
  Proc c = jit("regions --model " + fx("abs1d.json") + " --box -1 1 --csv");
  ASSERT_EQ(c.rc, 0);
  EXPECT_EQ(c.out.rfind("fragment,guards,output,w,b\n", 0), 0u);
  EXPECT_EQ(std::count(c.out.begin(), c.out.end(), '\n'), 3);
}

TEST(Cli, LipschitzMatchesPatternOracle) {
  NetworkModel m = load_model_file(fx("ffn_2_4_2/model.json"));
  auto net = oracle::shallow_of(m);
  double truth = 0;
  for (const auto& cell : oracle::feasible_patterns_2d(net, -1, 1, 1e-10)) {
    Mat J(2, Vec(2, 0.0));
    for (size_t k = 0; k < 2; ++k)
      for (size_t i = 0; i < net.W.size(); ++i)
        if (cell.active[i])
          for (size_t c = 0; c < 2; ++c) J[k][c] += net.V[k][i] * net.W[i][c];
    truth = std::max(truth, oracle::spectral_norm(J));
  }
  Proc r = jit("lipschitz --model " + fx("ffn_2_4_2/model.json") + " --p 2");
  ASSERT_EQ(r.rc, 0) << r.err;
  EXPECT_EQ(r.json()["kind"], "exact");
  EXPECT_NEAR(r.json()["value"].get<double>(), truth, 1e-9);
  Proc u = jit("lipschitz --model " + fx("ffn_2_4_2/model.json") + " --p inf --r 1");
  EXPECT_EQ(u.rc, 10);
  EXPECT_NE(u.err.find("UnsupportedNormPair"), std::string::npos) << u.err;
  Proc a = jit("lipschitz --model " + fx("ffn_2_4_2/model.json") + " --p inf --r 1 --anytime");
  EXPECT_EQ(a.rc, 2);
  EXPECT_EQ(a.json()["kind"], "bracket");
}

TEST(Cli, RobustExitCodes) {
  std::string base = "robust --model " + fx("ffn_2_4_2/model.json") + " --x0 " + fx("ffn_2_4_2/probes.json") + " --p inf";
  Proc proof = jit(base + " --eps 0.01");
  EXPECT_EQ(proof.rc, 0) << proof.err;
  EXPECT_EQ(proof.json()["verdict"], "Proof");
  Proc ce = jit(base + " --eps 2");
  ASSERT_EQ(ce.rc, 1) << ce.err;
  auto j = ce.json();
  EXPECT_EQ(j["verdict"], "Counterexample");
  NetworkModel m = load_model_file(fx("ffn_2_4_2/model.json"));
  Vec w = j["witness"]["x"].get<Vec>();
  Vec y = oracle::reference_forward(m, w);
  size_t lab = j["label"].get<size_t>();
  EXPECT_LT(y[lab] - y[1 - lab], 0);
  Proc unk = jit(base + " --eps 2 --max-splits 0");
  EXPECT_EQ(unk.rc, 2);
  EXPECT_EQ(unk.json()["verdict"], "Unknown");
  EXPECT_EQ(unk.json()["counters"]["splits"], 0);
  Proc wrong = jit(base + " --eps 0.1 --label 7");
  EXPECT_GE(wrong.rc, 10);
}

TEST(Cli, DeterministicPayload) {
  std::string args = "robust --model " + fx("ffn_2_4_2/model.json") + " --x0 " + fx("ffn_2_4_2/probes.json") + " --eps 0.7";
  Proc a = jit(args), b = jit(args);
  EXPECT_EQ(a.rc, b.rc);
  EXPECT_EQ(a.out, b.out);
}

TEST(Cli, UsageAndIoErrors) {
  EXPECT_EQ(jit("").rc, 10);
  EXPECT_EQ(jit("regions").rc, 10);
  EXPECT_EQ(jit("regions --model " + fx("abs1d.json") + " --max-splits -3").rc, 10);
  EXPECT_EQ(jit("lipschitz --model " + fx("abs1d.json") + " --p 7").rc, 10);
  EXPECT_EQ(jit("regions --model /nonexistent/model.json").rc, 11);
  std::string bad = tmp("bad_model.json");
  std::ofstream(bad) << R"({"input_shape": [2], "layers": [{"type": "dense", "W": [[1, 2]], "b": [0, 0]}]})";
  Proc r = jit("compile --model " + bad);
  EXPECT_EQ(r.rc, 12);
  EXPECT_NE(r.err.find("/layers/0"), std::string::npos) << r.err;
  Proc h = jit("--help");
  EXPECT_EQ(h.rc, 0);
  EXPECT_NE(h.out.find("robust"), std::string::npos);
}

TEST(Cli, OutFileLogAndTrace) {
  std::string out = tmp("regions.json"), trace = tmp("trace.jsonl");
  std::filesystem::remove(out);
  Proc r = jit("regions --model " + fx("ffn_2_4_2/model.json") + " --out " + out + " --trace " + trace, "JITSWT_LOG=0");
  ASSERT_EQ(r.rc, 0);
  EXPECT_TRUE(r.out.empty());
  EXPECT_TRUE(r.err.empty()) << r.err;
  auto j = nlohmann::json::parse(oracle::read_file(out));
  EXPECT_GT(j["fragments"].size(), 1u);
  std::ifstream t(trace);
  std::string line;
  size_t n = 0;
  while (std::getline(t, line)) {
    auto e = nlohmann::json::parse(line);
    EXPECT_TRUE(e.contains("action"));
    EXPECT_TRUE(e.contains("counters"));
    ++n;
  }
  EXPECT_GT(n, 0u);
}

TEST(Cli, BudgetFlagsAreHonored) {
  Proc r = jit("regions --model " + fx("ffn_20_16_8_4/model.json") + " --box -1 1 --max-splits 3");
  EXPECT_EQ(r.rc, 2);
  auto j = r.json();
  EXPECT_EQ(j["coverage"], "partial");
  EXPECT_LE(j["counters"]["splits"].get<size_t>(), 3u);
  Proc l = jit("regions --model " + fx("ffn_20_16_8_4/model.json") + " --max-lp-calls 5");
  EXPECT_EQ(l.rc, 2);
  EXPECT_LE(l.json()["counters"]["lp_calls"].get<size_t>(), 5u);
}

TEST(Cli, VerifySpecFile) {
  std::string spec = tmp("spec.json");
  std::ofstream(spec) << R"({"domain": {"kind": "box", "params": {"lower": [-1], "upper": [1]}},
                             "atoms": [{"type": "lower_threshold", "args": {"i": 0, "l": -0.5}}]})";
  Proc r = jit("verify --model " + fx("abs1d.json") + " --spec " + spec);
  EXPECT_EQ(r.rc, 0) << r.err;
  std::ofstream(spec) << R"({"domain": {"kind": "box", "params": {"lower": [-1], "upper": [1]}},
                             "atoms": [{"type": "upper_threshold", "args": {"i": 0, "u": 0.5}}]})";
  Proc c = jit("verify --model " + fx("abs1d.json") + " --spec " + spec);
  ASSERT_EQ(c.rc, 1);
  EXPECT_GT(std::fabs(c.json()["witness"]["x"][0].get<double>()), 0.5);
}

TEST(Cli, OtherSubcommands) {
  Proc e = jit("extremum --model " + fx("abs1d.json") + " --box -1 2 --sense max");
  ASSERT_EQ(e.rc, 0);
  EXPECT_DOUBLE_EQ(e.json()["value"].get<double>(), 2);
  Proc jac = jit("jacobian --model " + fx("abs1d.json") + " --point 0");
  ASSERT_EQ(jac.rc, 0);
  EXPECT_EQ(jac.json()["kind"], "boundary");
  EXPECT_NEAR(jac.json()["J"][0][0].get<double>(), 0, 1e-9);
  Proc q = jit("equiv --model " + fx("ffn_2_4_2/model.json") + " --other " + fx("ffn_2_4_2/model.json") + " --eps 1e-9");
  EXPECT_EQ(q.rc, 0);
  Proc s = jit("equivariance --model " + fx("conv1d/model.json") + " --shift 0 1 --eps 1e-7");
  EXPECT_EQ(s.rc, 0) << s.err;
  Proc f = jit("equivariance --model " + fx("conv1d/model.json") + " --shift 0 1 --window full --eps 1e-7");
  EXPECT_EQ(f.rc, 1);
  Proc g = jit("equivariance --model " + fx("gcn_10/model.json") + " --perm 3 1 2 0 4 5 6 7 9 8 --eps 1e-9");
  EXPECT_EQ(g.rc, 0) << g.err;
  Proc im = jit("imax --model " + fx("ffn_2_4_2/model.json") + " --layer 1 --channel 0");
  ASSERT_EQ(im.rc, 0);
  EXPECT_EQ(im.json()["kind"], "exact");
  Proc c = jit("compile --model " + fx("cnn_1x8x8/model.json"));
  ASSERT_EQ(c.rc, 0);
  EXPECT_TRUE(c.json()["counts"]["bounds_hold"].get<bool>());
  Proc b = jit("bench --nets 2 --widths 2 6 1 --seed 3");
  ASSERT_EQ(b.rc, 0);
  for (const auto& row : b.json()["runs"]) {
    EXPECT_TRUE(row["leaves_le_1_plus_splits"].get<bool>());
    EXPECT_TRUE(row["library_le_initial_plus_new"].get<bool>());
    EXPECT_LE(row["c"].get<double>(), 64.0);
  }
}

#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + EMOV2_BIN + " " + args + " 2>/dev/null";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int st = pclose(p);
  r.code = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

fs::path scratch() {
  auto d = fs::temp_directory_path() / ("emo_cli_" + std::to_string(::getpid()));
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

std::string last_line(const std::string& s) {
  auto t = s.substr(0, s.find_last_not_of('\n') + 1);
  return t.substr(t.rfind('\n') + 1);
}

}  // namespace

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("cost").code, 2);
  EXPECT_EQ(run("cost --preset emov2-7m").code, 2);
  EXPECT_EQ(run("cost --preset emov2-1m --config x.ini").code, 2);
  EXPECT_EQ(run("check nosuchsuite").code, 2);
  EXPECT_EQ(run("train-toy --steps 0").code, 2);
  EXPECT_EQ(run("--help").code, 0);
  EXPECT_EQ(run("cost --preset emov2-1m", "EMOV2_LOG=loud").code, 2);
}

TEST(Cli, CostReport) {
  auto r = run("cost --preset emov2-1m --res 224", "EMOV2_LOG=info");
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(r.out.rfind("name,kind,params,flops,mpl\n", 0), 0u);
  const auto total = last_line(r.out);
  ASSERT_EQ(total.rfind("TOTAL,,1466104,", 0), 0u) << total;
  EXPECT_GT(std::stoll(total.substr(15)), 2LL * 270553572);
  const auto dir = scratch();
  const auto csv = dir / "cost.csv";
  ASSERT_EQ(run("cost --config " EMOV2_CONFIG_DIR "/emov2-1m.ini --out " + csv.string()).code, 0);
  EXPECT_EQ(slurp(csv), r.out);
}

TEST(Cli, ConfigErrors) {
  const auto dir = scratch();
  std::ofstream(dir / "bad.ini") << "[stage1]\ndepth = 1\n";
  EXPECT_EQ(run("cost --config " + (dir / "bad.ini").string()).code, 2);
  EXPECT_EQ(run("cost --config " + (dir / "missing.ini").string()).code, 3);
}

TEST(Cli, CheckSuitesEmitLines) {
  auto r = run("check partition --seed 3");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("PASS partition."), std::string::npos) << r.out;
  EXPECT_EQ(last_line(r.out), "PASS partition");
  auto e = run("check erf --threads 2");
  EXPECT_EQ(e.code, 0) << e.out;
}

TEST(Cli, ForwardAndWeights) {
  const auto dir = scratch();
  const auto x = (dir / "x.emot").string(), y1 = (dir / "y1.emot").string(), y2 = (dir / "y2.emot").string();
  const auto w = (dir / "w.emow").string();
  ASSERT_EQ(run("random-tensor --shape 1,3,64,64 --seed 4 --out " + x).code, 0);
  ASSERT_EQ(run("init-weights --preset emov2-1m --seed 9 --out " + w).code, 0);
  auto r = run("forward --preset emov2-1m --weights " + w + " --input " + x + " --out " + y1);
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("stage4 [1,180,2,2]"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("logits [1,1000]"), std::string::npos);
  ASSERT_EQ(run("forward --preset emov2-1m --seed 9 --input " + x + " --out " + y2).code, 0);
  EXPECT_EQ(slurp(y1), slurp(y2));
  EXPECT_EQ(run("load-weights --preset emov2-1m " + w).code, 0);
  EXPECT_EQ(run("load-weights --preset emov2-2m " + w).code, 3);

  const auto odd = (dir / "odd.emot").string();
  ASSERT_EQ(run("random-tensor --shape 1,3,225,224 --out " + odd).code, 0);
  EXPECT_EQ(run("forward --preset emov2-1m --input " + odd + " --out " + y2).code, 2);

  const auto bytes = slurp(w);
  std::ofstream(dir / "trunc.emow", std::ios::binary) << bytes.substr(0, bytes.size() / 3);
  EXPECT_EQ(run("load-weights --preset emov2-1m " + (dir / "trunc.emow").string()).code, 3);
  EXPECT_EQ(run("forward --preset emov2-1m --input " + (dir / "none.emot").string() + " --out " + y2).code, 3);
}

TEST(Cli, TrainToyDeterministic) {
  auto a = run("train-toy --steps 5 --seed 1"), b = run("train-toy --steps 5 --seed 1 --deterministic");
  ASSERT_EQ(a.code, 0);
  EXPECT_EQ(a.out, b.out);
  EXPECT_EQ(a.out.rfind("step,loss\n", 0), 0u);
  std::size_t lines = 0;
  for (char c : a.out) lines += c == '\n';
  EXPECT_EQ(lines, 6u);
}

TEST(Cli, ErfOutputs) {
  const auto dir = scratch() / "erf";
  auto r = run("erf --stack nb4x4 --res 16 --repeat 3 --out " + dir.string());
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(last_line(r.out), "layers_to_full_coverage inf");
  const auto pgm = slurp(dir / "layer_003.pgm");
  const std::string header = "P5\n16 16\n255\n";
  ASSERT_EQ(pgm.size(), header.size() + 256);
  EXPECT_EQ(pgm.substr(0, header.size()), header);
  int lit = 0;
  for (std::size_t i = header.size(); i < pgm.size(); ++i) lit += static_cast<unsigned char>(pgm[i]) == 255;
  EXPECT_EQ(lit, 16);
  EXPECT_NE(slurp(dir / "coverage.csv").find("3,neighbor,16,0.0625"), std::string::npos);

  auto s = run("erf --stack span4x4 --res 16 --out " + (dir / "s").string());
  EXPECT_EQ(last_line(s.out), "layers_to_full_coverage 2");
  auto d = run("erf --stack dw3 --height 9 --width 9 --out " + (dir / "d").string());
  EXPECT_NE(slurp(dir / "d" / "coverage.csv").find("1,dwconv,9,"), std::string::npos);
  EXPECT_EQ(run("erf --stack nb3x3 --res 16 --out " + (dir / "x").string()).code, 2);
  EXPECT_EQ(run("erf --stack dw4 --res 16 --out " + (dir / "x").string()).code, 2);
}

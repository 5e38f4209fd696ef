#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "mtk/data.h"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/stat.h>
#include <unistd.h>

using namespace mtk;

namespace {

std::string g_dir;

struct RunResult {
  int code = -1;
  std::string out;
  std::string err;
};

RunResult run(const std::string& args, const std::string& env = "") {
  std::string outFile = g_dir + "/cmd.out";
  std::string errFile = g_dir + "/cmd.err";
  std::string cmd = "cd " + g_dir + " && env " + env + " " + MTK_BIN + " " + args + " >" +
                    outFile + " 2>" + errFile;
  int status = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream o(outFile), e(errFile);
  r.out.assign(std::istreambuf_iterator<char>(o), std::istreambuf_iterator<char>());
  r.err.assign(std::istreambuf_iterator<char>(e), std::istreambuf_iterator<char>());
  return r;
}

void writeFile(const std::string& name, const std::string& content) {
  std::ofstream out(g_dir + "/" + name);
  out << content;
}

std::string readFile(const std::string& name) {
  std::ifstream in(g_dir + "/" + name, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

struct Setup {
  Setup() {
    g_dir = "/tmp/mtk_cli_" + std::to_string(::getpid());
    ::mkdir(g_dir.c_str(), 0755);
    writeFile("src.txt", "aa bb cc\ndd ee\naa cc ee\nbb dd\n");
    writeFile("tgt.txt", "AA BB CC\nDD EE\nAA CC EE\nBB DD\n");
    run("vocab --corpus src.txt --output sv.txt");
    run("vocab --corpus tgt.txt --output tv.txt");
  }
} g_setup;

const std::string kTinyTrain =
    "train --train-sets src.txt tgt.txt --vocabs sv.txt tv.txt "
    "--emb-dim 6 --state-dim 6 --dropout 0 --epochs 2 --quiet";

}  // namespace

TEST_CASE("vocab subcommand writes a loadable vocabulary") {
  Vocabulary v = Vocabulary::load(g_dir + "/sv.txt");
  CHECK(v.size() == 7);  // </s>, <unk>, aa..ee
  CHECK(v.token(0) == "</s>");
  CHECK(v.id("aa") >= 2);
}

TEST_CASE("usage errors exit with code 1") {
  CHECK(run("").code == 1);
  CHECK(run("frobnicate").code == 1);
  CHECK(run("translate --no-such-flag").code == 1);
  CHECK(run("--help").code == 0);
}

TEST_CASE("data and io errors exit with code 2") {
  CHECK(run("translate --models missing.mtk --vocabs sv.txt tv.txt --input src.txt").code == 2);
  CHECK(run("vocab --corpus missing.txt --output x.txt").code == 2);
  writeFile("bad.mtk", "this is not a model file at all, padded to get past magic checks");
  CHECK(run("translate --models bad.mtk --vocabs sv.txt tv.txt --input src.txt").code == 2);
}

TEST_CASE("training produces a model the other subcommands accept") {
  RunResult t = run(kTinyTrain + " --model m.mtk --seed 11");
  REQUIRE(t.code == 0);

  RunResult tr = run(
      "translate --models m.mtk --vocabs sv.txt tv.txt --input src.txt "
      "--beam-size 2 --n-best 2 --n-best-file nb.txt --output out.txt");
  REQUIRE(tr.code == 0);
  auto outLines = readLines(g_dir + "/out.txt");
  CHECK(outLines.size() == 4);
  auto nbLines = readLines(g_dir + "/nb.txt");
  CHECK(nbLines.size() >= 4);
  CHECK(nbLines[0].rfind("0 ||| ", 0) == 0);
  CHECK(nbLines[0].find(" ||| F0=") != std::string::npos);

  RunResult sc = run("score --model m.mtk --vocabs sv.txt tv.txt --input src.txt tgt.txt");
  REQUIRE(sc.code == 0);
  auto scLines = readLines(g_dir + "/cmd.out");
  REQUIRE(scLines.size() == 4);
  // "<id> <total> <per-token...>": id, then one negative number per token+</s>
  std::istringstream first(scLines[0]);
  int id;
  double total;
  first >> id >> total;
  CHECK(id == 0);
  CHECK(total < 0);
  double sum = 0, tok;
  int count = 0;
  while(first >> tok) {
    CHECK(tok <= 0);
    sum += tok;
    ++count;
  }
  CHECK(count == 4);  // three tokens + </s>
  CHECK(sum == doctest::Approx(total).epsilon(1e-4));

  SUBCASE("rescoring with the same model doubles its own component score") {
    RunResult rs = run(
        "rescore --nbest nb.txt --models m.mtk --vocabs sv.txt tv.txt "
        "--input src.txt --output rs.txt --alpha 0");
    REQUIRE(rs.code == 0);
    for(auto& line : readLines(g_dir + "/rs.txt")) {
      size_t f0 = line.find("F0=");
      size_t r0 = line.find("R0=");
      REQUIRE(f0 != std::string::npos);
      REQUIRE(r0 != std::string::npos);
      double a = std::stod(line.substr(f0 + 3));
      double b = std::stod(line.substr(r0 + 3));
      CHECK(a == doctest::Approx(b).epsilon(1e-4));
    }
  }
}

TEST_CASE("the seed falls back to MTK_SEED and training is reproducible") {
  REQUIRE(run(kTinyTrain + " --model s7a.mtk", "MTK_SEED=7").code == 0);
  REQUIRE(run(kTinyTrain + " --model s7b.mtk", "MTK_SEED=7").code == 0);
  REQUIRE(run(kTinyTrain + " --model s8.mtk", "MTK_SEED=8").code == 0);
  CHECK(readFile("s7a.mtk") == readFile("s7b.mtk"));
  CHECK(readFile("s7a.mtk") != readFile("s8.mtk"));
}

TEST_CASE("config files merge below command-line flags") {
  writeFile("opts.cfg",
            "# comment\n"
            "emb-dim: 8\n"
            "state-dim: 8\n"
            "quiet: true\n");
  std::string base =
      "train --train-sets src.txt tgt.txt --vocabs sv.txt tv.txt --dropout 0 "
      "--epochs 1 --seed 5 --config opts.cfg";
  REQUIRE(run(base + " --model c1.mtk").code == 0);
  CHECK(readFile("c1.mtk").find("emb-dim: 8") != std::string::npos);
  // an explicit flag overrides the config file
  REQUIRE(run(base + " --model c2.mtk --emb-dim 6").code == 0);
  CHECK(readFile("c2.mtk").find("emb-dim: 6") != std::string::npos);

  writeFile("bad.cfg", "no-such-option: 3\n");
  CHECK(run(base + " --model c3.mtk --config bad.cfg").code == 2);
}

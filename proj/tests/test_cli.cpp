#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "doctest.h"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string output;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(DAL_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe);
  Result r;
  std::array<char, 4096> buf;
  for (std::size_t n; (n = fread(buf.data(), 1, buf.size(), pipe)) > 0;) r.output.append(buf.data(), n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in);
  return {std::istreambuf_iterator<char>(in), {}};
}

fs::path root() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "dal_test_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

const std::string kData =
    " --n-topics 4 --n-claim 8 --n-filler 40 --n-evidence 4 --len-news 8 --len-evid 10"
    " --n-train 64 --n-valid 32 --n-test-id 32 --n-test-ood 32";
const std::string kModel =
    " --embed-dim 6 --sent-dim 5 --attn-hidden 4 --disc-hidden 4 --classifier-hidden 6 --batch 16";

std::string path(const std::string& rel) { return (root() / rel).string(); }

void gen(const std::string& name, const std::string& extra = "") {
  const auto r = run("gen --seed 3" + kData + extra + " --out " + path(name));
  REQUIRE_MESSAGE(r.code == 0, r.output);
}

// Column `col` of a CSV body, header skipped.
std::vector<std::string> column(const std::string& csv, int col) {
  std::vector<std::string> out;
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::istringstream cells(line);
    std::string cell;
    for (int i = 0; i <= col; ++i) std::getline(cells, cell, ',');
    out.push_back(cell);
  }
  return out;
}

}  // namespace

TEST_CASE("gen writes splits and is byte-reproducible") {
  gen("gen_a");
  gen("gen_b");
  for (const char* f : {"train.jsonl", "valid.jsonl", "test_id.jsonl", "test_ood.jsonl", "train.meta.json",
                        "test_ood.meta.json"}) {
    CHECK(fs::exists(root() / "gen_a" / f));
    CHECK(slurp(root() / "gen_a" / f) == slurp(root() / "gen_b" / f));
  }
  // The echo differs only in its out= line.
  CHECK(slurp(root() / "gen_a" / "config").find("n-evidence=4\n") != std::string::npos);
}

TEST_CASE("argument errors exit with 2") {
  auto r = run("gen --seed 1 --n-evidence 0 --out " + path("bad"));
  CHECK(r.code == 2);
  CHECK(r.output.find("--n-evidence") != std::string::npos);
  CHECK(run("").code == 2);
  CHECK(run("gen --out " + path("x") + " --no-such-flag 1").code == 2);
  CHECK(run("frobnicate").code == 2);
  r = run("train --data " + path("absent") + " --out " + path("absent_run"));
  CHECK(r.code == 2);
  CHECK(r.output.find("missing dataset") != std::string::npos);
  CHECK(run("experiment nonsense --out " + path("x")).code == 2);
}

TEST_CASE("train, eval and reproducibility") {
  gen("data");
  const std::string base = "train --data " + path("data") + kModel + " --max-epochs 3 --seed 7";
  REQUIRE(run(base + " --alpha 0.1 --beta 0.1 --out " + path("r1")).code == 0);
  const auto again = run(base + " --alpha 0.1 --beta 0.1 --out " + path("r2"));
  REQUIRE(again.code == 0);
  CHECK(again.output.find("best epoch") != std::string::npos);
  for (const char* f : {"history.csv", "checkpoint", "config"}) CHECK(fs::exists(root() / "r1" / f));
  CHECK(slurp(root() / "r1" / "history.csv") == slurp(root() / "r2" / "history.csv"));
  CHECK(slurp(root() / "r1" / "checkpoint") == slurp(root() / "r2" / "checkpoint"));
  CHECK(slurp(root() / "r1" / "history.csv").rfind("epoch,l_m,l_n,l_e,l,valid_f1_macro,valid_f1_micro,is_best\n", 0) ==
        0);

  SUBCASE("zero strengths reproduce the baseline trainer") {
    REQUIRE(run(base + " --alpha 0 --beta 0 --out " + path("zero")).code == 0);
    REQUIRE(run(base + " --baseline --out " + path("plain")).code == 0);
    const auto a = slurp(root() / "zero" / "history.csv");
    const auto b = slurp(root() / "plain" / "history.csv");
    CHECK(column(a, 1) == column(b, 1));
    CHECK(column(a, 5) == column(b, 5));
  }

  SUBCASE("eval output is stable") {
    const std::string ev = "eval --checkpoint " + path("r1/checkpoint") + " --data " + path("data");
    const auto e1 = run(ev + " --out " + path("e1.json"));
    const auto e2 = run(ev + " --out " + path("e2.json"));
    REQUIRE(e1.code == 0);
    CHECK(e1.output == e2.output);
    CHECK(slurp(root() / "e1.json") == slurp(root() / "e2.json"));
    CHECK(slurp(root() / "e1.json").find("\"split\": \"test_ood\"") != std::string::npos);
    REQUIRE(run(ev + " --split valid").code == 0);
    CHECK(fs::exists(root() / "r1" / "report.valid.json"));
    CHECK(run(ev + " --split holdout").code == 2);
  }

  SUBCASE("eval rejects foreign files") {
    std::ofstream(root() / "fake.ckpt") << "NOTACKPTxxxxxxxxxxxxxxxx";
    const auto r = run("eval --checkpoint " + path("fake.ckpt") + " --data " + path("data"));
    CHECK(r.code == 2);
    CHECK(r.output.find("format") != std::string::npos);
    CHECK(run("eval --checkpoint " + path("none.ckpt") + " --data " + path("data")).code == 2);
  }

  SUBCASE("patience stops early") {
    REQUIRE(run("train --data " + path("data") + kModel + " --max-epochs 30 --patience 1 --out " + path("p1")).code ==
            0);
    const auto epochs = column(slurp(root() / "p1" / "history.csv"), 0);
    const auto best = column(slurp(root() / "p1" / "history.csv"), 7);
    int last_best = 0;
    for (std::size_t i = 0; i < best.size(); ++i)
      if (best[i] == "1") last_best = std::stoi(epochs[i]);
    CHECK(std::stoi(epochs.back()) <= last_best + 1);
  }
}

TEST_CASE("a fully biased tiny run fits its training split") {
  gen("easy", " --q-news 1 --q-evid 1");
  REQUIRE(run("train --data " + path("easy") + kModel + " --max-epochs 30 --out " + path("easy_run")).code == 0);
  REQUIRE(run("eval --split train --checkpoint " + path("easy_run/checkpoint") + " --data " + path("easy") +
              " --out " + path("easy.json"))
              .code == 0);
  const auto text = slurp(root() / "easy.json");
  const auto at = text.find("\"f1_macro\": ");
  REQUIRE(at != std::string::npos);
  CHECK(std::stod(text.substr(at + 12)) >= 0.95);
}

TEST_CASE("config files") {
  gen("cfg_data");
  {
    std::ofstream f(root() / "train.cfg");
    f << "# tiny run\nalpha = 0.5\nbeta=0.25\nmax_epochs=2\nembed-dim=6\nsent-dim=5\nattn-hidden=4\n"
         "disc-hidden=4\nclassifier-hidden=6\nbatch=16\n";
  }
  const std::string base = "train --config " + path("train.cfg") + " --data " + path("cfg_data");
  REQUIRE(run(base + " --alpha 0.1 --out " + path("c1")).code == 0);
  const auto echo = slurp(root() / "c1" / "config");
  CHECK(echo.find("alpha=0.1\n") != std::string::npos);
  CHECK(echo.find("beta=0.25\n") != std::string::npos);
  CHECK(echo.find("max-epochs=2\n") != std::string::npos);

  // Re-running from the echo reproduces the run.
  REQUIRE(run("train --config " + path("c1/config") + " --out " + path("c2")).code == 0);
  CHECK(slurp(root() / "c1" / "history.csv") == slurp(root() / "c2" / "history.csv"));

  {
    std::ofstream f(root() / "bad.cfg");
    f << "alpha=0.1\ngamma=2\n";
  }
  auto r = run("train --config " + path("bad.cfg") + " --data " + path("cfg_data") + " --out " + path("c3"));
  CHECK(r.code == 2);
  CHECK(r.output.find("gamma") != std::string::npos);
  CHECK(run("train --config " + path("missing.cfg") + " --data " + path("cfg_data")).code == 2);
}

TEST_CASE("experiments write reports") {
  const std::string common = " --seeds 1,2 --grid 0.01,0.1 --max-epochs 2" + kData + kModel;
  SUBCASE("pilot") {
    const auto r = run("experiment pilot --settings cross-platform --out " + path("pilot") + common);
    REQUIRE_MESSAGE(r.code == 0, r.output);
    const auto csv = slurp(root() / "pilot" / "pilot.csv");
    CHECK(column(csv, 0).size() == 6);
    CHECK(fs::exists(root() / "pilot" / "pilot.md"));
    CHECK(fs::exists(root() / "pilot" / "audit.log"));
    CHECK(fs::exists(root() / "pilot" / "data" / "cross_platform" / "train.jsonl"));
  }
  SUBCASE("main is reproducible") {
    REQUIRE(run("experiment main --out " + path("main_a") + common).code == 0);
    REQUIRE(run("experiment main --workers 2 --out " + path("main_b") + common).code == 0);
    const auto csv = slurp(root() / "main_a" / "main.csv");
    CHECK(csv == slurp(root() / "main_b" / "main.csv"));
    CHECK(slurp(root() / "main_a" / "main.md") == slurp(root() / "main_b" / "main.md"));
    const auto methods = column(csv, 3);
    CHECK(std::count(methods.begin(), methods.end(), "baseline") == 4);
    CHECK(std::count(methods.begin(), methods.end(), "dal") == 4);
  }
  SUBCASE("sensitivity") {
    REQUIRE(run("experiment sensitivity --settings cross-topic --out " + path("sens") + common).code == 0);
    const auto m = slurp(root() / "sens" / "sensitivity_matrix.csv");
    CHECK(m.rfind("setting,config_hash,alpha,beta=0.01,beta=0.1\ncross_topic,", 0) == 0);
  }
}

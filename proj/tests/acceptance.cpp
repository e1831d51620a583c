// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
// criterion fails. Reports of the long experiments go to ./acceptance_out.
// Criterion ids given as arguments restrict the run to those criteria.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "dal/harness.hpp"

using namespace dal;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, const char* spec = "%.4g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

int failures = 0;
std::set<int> only;  // criterion ids named on the command line; empty runs all

void report(int id, const std::string& name, const Outcome& o, double secs) {
  if (!o.pass) ++failures;
  std::cout << (o.pass ? "PASS" : "FAIL") << " " << id << " " << name << ": " << o.detail << " ["
            << fmt(secs, "%.1f") << " s]" << std::endl;
}

template <typename F>
void criterion(int id, const std::string& name, F&& body) {
  if (!only.empty() && !only.count(id)) return;
  const auto t0 = Clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  report(id, name, o, seconds_since(t0));
}

corpus::Benchmark default_bench(corpus::Setting s = corpus::Setting::cross_platform) {
  return corpus::generate_benchmark(corpus::GeneratorConfig{}, s);
}

std::vector<Tensor> grads_of(const std::vector<ad::Var>& vars) {
  std::vector<Tensor> out;
  for (const auto& v : vars) out.push_back(v->grad.numel() ? v->grad : Tensor(v->value.shape()));
  return out;
}

// --- 1 ---------------------------------------------------------------------

Outcome gradient_correctness() {
  const auto bench = default_bench();
  train::TrainConfig cfg;
  cfg.alpha = cfg.beta = 0.1;
  // Narrow layers keep the finite-difference sweep within the time budget;
  // the graph is the full DAL objective. A 1e-3 step keeps roundoff below
  // the tolerance on gradient entries near 1e-8.
  cfg.model.embed_dim = 6;
  cfg.model.sent_dim = 5;
  cfg.model.attn_hidden = 4;
  cfg.model.disc_hidden = 4;
  cfg.model.classifier_hidden = 6;
  std::mt19937_64 gen(2024);
  double worst = 0.0;
  const int batches = 20;
  for (int b = 0; b < batches; ++b) {
    cfg.seed = gen();
    const auto params = train::init_params(bench, cfg);
    std::vector<corpus::NewsInstance> batch;
    for (int i = 0; i < 4; ++i) batch.push_back(bench.train[gen() % bench.train.size()]);
    std::vector<ad::Var> vars;
    for (const auto& p : params.parameters()) vars.push_back(p.var);
    worst = std::max(worst, ad::grad_check([&] { return train::dal_objective(batch, params, cfg).l; }, vars, 1e-3));
  }
  return {worst <= 1e-4, fmt(batches, "%.0f") + " batches of 4, max relative error " + fmt(worst, "%.3e")};
}

// --- 2 ---------------------------------------------------------------------

Outcome reduction_identity() {
  const auto bench = default_bench();
  double worst = 0.0;
  bool same_params = true;
  for (std::uint64_t seed : {1, 2, 3}) {
    train::TrainConfig cfg;
    cfg.seed = seed;
    cfg.max_epochs = 5;
    cfg.patience = 100;
    std::vector<std::uint64_t> da, db;
    const std::array<model::Group, 3> main{model::kMainGroups};
    train::TrainOptions oa, ob;
    oa.on_epoch = [&](const train::EpochRecord&, const model::ParamSet& p) { da.push_back(p.digest(main)); };
    ob.on_epoch = [&](const train::EpochRecord&, const model::ParamSet& p) { db.push_back(p.digest(main)); };
    const auto a = train::train(bench, cfg, oa);
    const auto b = train::train_supervised(bench, cfg, ob);
    if (a.history.size() != 5 || b.history.size() != 5) return {false, "runs did not last 5 epochs"};
    for (int e = 0; e < 5; ++e) worst = std::max(worst, std::abs(*a.history[e].l_m - *b.history[e].l_m));
    same_params = same_params && da == db;
  }
  return {worst <= 1e-12 && same_params, "3 seeds x 5 epochs, max |l_m diff| " + fmt(worst, "%.3e") +
                                             ", parameter digests " + (same_params ? "identical" : "differ")};
}

// --- 3 ---------------------------------------------------------------------

Outcome phase_isolation() {
  const auto bench = default_bench();
  long violations = 0, steps = 0;
  std::string detail;
  for (auto alt : {train::Alternation::per_epoch, train::Alternation::per_batch}) {
    train::TrainConfig cfg;
    cfg.alpha = cfg.beta = 0.1;
    cfg.alternation = alt;
    if (alt == train::Alternation::per_batch) cfg.max_epochs = 5;
    train::TrainOptions o;
    o.audit_isolation = true;
    const auto r = train::train(bench, cfg, o);
    violations += r.isolation_violations;
    steps += r.steps;
    detail += train::to_string(alt) + " " + std::to_string(r.history.size()) + " epochs; ";
  }
  return {violations == 0 && steps > 0,
          detail + std::to_string(steps) + " audited steps, " + std::to_string(violations) + " violations"};
}

// --- 4 ---------------------------------------------------------------------

Outcome reversal_decomposition() {
  const auto bench = default_bench();
  std::mt19937_64 gen(7);
  std::uniform_real_distribution<double> coef(0.001, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    train::TrainConfig cfg;
    cfg.seed = gen();
    cfg.alpha = coef(gen);
    cfg.beta = coef(gen);
    auto params = train::init_params(bench, cfg);
    train::enter_main_phase(params);
    std::vector<corpus::NewsInstance> batch;
    for (int i = 0; i < 32; ++i) batch.push_back(bench.train[gen() % bench.train.size()]);
    const auto vars = params.group(model::Group::feature);
    auto grad_of = [&](auto pick) {
      params.zero_grad();
      ad::backward(pick(train::dal_objective(batch, params, cfg)));
      return grads_of(vars);
    };
    const auto g = grad_of([](const train::Objective& o) { return o.l; });
    const auto gm = grad_of([](const train::Objective& o) { return o.l_m; });
    const auto gn = grad_of([](const train::Objective& o) { return o.l_n; });
    const auto ge = grad_of([](const train::Objective& o) { return o.l_e; });
    for (std::size_t i = 0; i < vars.size(); ++i) {
      const Eigen::ArrayXd expect = gm[i].flat() - cfg.alpha * gn[i].flat() - cfg.beta * ge[i].flat();
      worst = std::max(worst, (g[i].flat().array() - expect).abs().maxCoeff());
    }
  }
  return {worst <= 1e-10, "10 batches of 32, max |difference| " + fmt(worst, "%.3e")};
}

// --- 5, 6, 7 ---------------------------------------------------------------

harness::ExperimentSpec protocol_spec(std::vector<corpus::Setting> settings, const std::string& out) {
  harness::ExperimentSpec spec;
  spec.settings = std::move(settings);
  spec.out_dir = out;
  return spec;
}

Outcome pilot() {
  harness::Runner runner(protocol_spec({corpus::Setting::cross_platform}, "acceptance_out/pilot"));
  const auto t0 = Clock::now();
  const auto rep = harness::run_pilot(runner);
  const double secs = seconds_since(t0);
  harness::write_report(rep, runner, "pilot");
  const auto s = corpus::Setting::cross_platform;
  const double id = rep.find(s, harness::Method::baseline, "test_id", model::InputMode::news_only)->macro().mean;
  const double ood = rep.find(s, harness::Method::baseline, "test_ood", model::InputMode::news_only)->macro().mean;
  const double both = rep.find(s, harness::Method::baseline, "test_id", model::InputMode::both)->macro().mean;
  const bool ok = id >= 0.75 && ood <= 0.35 && secs < 600;
  return {ok, "news_only test_id " + fmt(id) + " (>= 0.75), test_ood " + fmt(ood) + " (<= 0.35); both test_id " +
                  fmt(both) + "; pilot wall time " + fmt(secs, "%.0f") + " s (< 600)"};
}

struct Protocol {
  harness::Runner runner;
  harness::RunReport main;
  double main_secs = 0.0;
  explicit Protocol(harness::ExperimentSpec spec) : runner(std::move(spec)) {}
};

Outcome debiasing(Protocol& p) {
  const auto t0 = Clock::now();
  p.main = harness::run_main(p.runner);
  p.main_secs = seconds_since(t0);
  harness::write_report(p.main, p.runner, "main");
  const double ceiling = corpus::bayes_oracle_accuracy(corpus::GeneratorConfig{});
  bool ok = p.main_secs < 3600;
  std::string detail;
  for (auto s : p.runner.spec().settings) {
    const auto* base = p.main.find(s, harness::Method::baseline, "test_ood");
    const auto* dal = p.main.find(s, harness::Method::dal, "test_ood");
    const double b = base->macro().mean, d = dal->macro().mean;
    ok = ok && d - b >= 0.10 && d >= 0.80;
    detail += corpus::to_string(s) + ": dal " + fmt(d) + " (alpha=" + fmt(*dal->alpha, "%g") +
              " beta=" + fmt(*dal->beta, "%g") + ") vs baseline " + fmt(b) + ", gain " + fmt(d - b) + "; ";
  }
  return {ok, detail + "oracle ceiling " + fmt(ceiling) + "; main wall time " + fmt(p.main_secs, "%.0f") +
                  " s (< 3600)"};
}

Outcome ablation(Protocol& p) {
  const auto rep = harness::run_ablation(p.runner);
  harness::write_report(rep, p.runner, "ablation");
  bool ok = true;
  std::string detail;
  for (const auto& c : rep.checks) {
    ok = ok && c.passed;
    detail += c.name + " " + (c.passed ? "pass" : "fail") + " (" + c.detail + "); ";
  }
  return {ok, detail};
}

// --- 8 ---------------------------------------------------------------------

Outcome metrics_oracle() {
  using namespace metrics;
  const std::vector<int> y{1, 1, 0, 0}, p{1, 0, 0, 0};
  const Confusion c = confusion(y, p);
  const double macro = (2.0 / 3.0 + 0.8) / 2.0;
  bool ok = f1_macro(c) == macro && f1_micro(c) == 0.75;
  std::string detail = "worked example macro " + fmt(f1_macro(c), "%.6f") + " micro " + fmt(f1_micro(c), "%.6f");

  std::mt19937_64 gen(99);
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const int n = 1 + static_cast<int>(gen() % 100);
    std::vector<int> ys(n), ps(n);
    for (int i = 0; i < n; ++i) {
      ys[i] = static_cast<int>(gen() & 1);
      ps[i] = static_cast<int>(gen() & 1);
    }
    double f1[2];
    double hits = 0;
    for (int cls = 0; cls < 2; ++cls) {
      double both = 0, pred = 0, gold = 0;
      for (int i = 0; i < n; ++i) {
        both += ys[i] == cls && ps[i] == cls;
        pred += ps[i] == cls;
        gold += ys[i] == cls;
      }
      const double pr = pred ? both / pred : 0.0, rc = gold ? both / gold : 0.0;
      f1[cls] = pr + rc > 0 ? 2 * pr * rc / (pr + rc) : 0.0;
      hits += both;
    }
    const Confusion cc = confusion(ys, ps);
    worst = std::max({worst, std::abs(f1_macro(cc) - (f1[0] + f1[1]) / 2), std::abs(f1_micro(cc) - hits / n)});
  }
  ok = ok && worst <= 1e-12;
  return {ok, detail + "; 1000 random vectors, max deviation " + fmt(worst, "%.3e")};
}

// --- 9 ---------------------------------------------------------------------

bool has(const corpus::Tokens& t, corpus::Token x) { return std::find(t.begin(), t.end(), x) != t.end(); }

double corr(const std::vector<int>& a, const std::vector<int>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ma += a[i], mb += b[i];
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

std::pair<double, double> bias_corr(const corpus::Split& s, const corpus::VocabSpec& v) {
  std::vector<int> y, n, e;
  for (const auto& inst : s) {
    y.push_back(inst.label);
    n.push_back(has(inst.news, v.news_bias(inst.topic)));
    e.push_back(has(inst.evidences[0], v.evid_bias(inst.topic)));
  }
  return {corr(n, y), corr(e, y)};
}

bool agrees(const corpus::NewsInstance& inst, std::size_t j, const corpus::VocabSpec& v) {
  corpus::Token stance = 0;
  for (auto t : inst.news)
    if (v.is_stance(t)) stance = t;
  return has(inst.evidences[j], stance);
}

// Smallest chi-square p-value (df = 1) of split x agreement, per label.
double stance_invariance_p(const corpus::Benchmark& b) {
  const auto v = b.config.vocab();
  double p_min = 1.0;
  for (int y : {0, 1}) {
    double n[2][2] = {{0, 0}, {0, 0}};
    for (int row = 0; row < 2; ++row)
      for (const auto& inst : row ? b.test_ood : b.train)
        if (inst.label == y) n[row][agrees(inst, 0, v)] += 1;
    const double total = n[0][0] + n[0][1] + n[1][0] + n[1][1];
    double chi2 = 0;
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) {
        const double e = (n[i][0] + n[i][1]) * (n[0][j] + n[1][j]) / total;
        chi2 += (n[i][j] - e) * (n[i][j] - e) / e;
      }
    p_min = std::min(p_min, std::erfc(std::sqrt(chi2 / 2)));
  }
  return p_min;
}

Outcome benchmark_validity() {
  corpus::GeneratorConfig g;
  g.n_train = 5000;
  g.n_test_ood = 5000;
  const double target = 2 * g.q_news - 1;
  const auto rev = corpus::generate_benchmark(g, corpus::Setting::cross_platform);
  const auto v = g.vocab();
  const auto [tn, te] = bias_corr(rev.train, v);
  const auto [on, oe] = bias_corr(rev.test_ood, v);
  auto removed_cfg = g;
  removed_cfg.shift_mode = corpus::ShiftMode::removed;
  const auto rem = corpus::generate_benchmark(removed_cfg, corpus::Setting::cross_platform);
  const auto [rn, re] = bias_corr(rem.test_ood, v);
  const double p = stance_invariance_p(rev);

  const auto topic = corpus::generate_benchmark(corpus::GeneratorConfig{}, corpus::Setting::cross_topic);
  std::set<int> in_train, in_ood;
  for (const auto* s : {&topic.train, &topic.valid}) for (const auto& inst : *s) in_train.insert(inst.topic);
  for (const auto& inst : topic.test_ood) in_ood.insert(inst.topic);
  bool disjoint = true;
  for (int t : in_ood) disjoint = disjoint && !in_train.count(t);

  const bool ok = std::abs(tn - target) <= 0.05 && std::abs(te - target) <= 0.05 && on <= -target + 0.05 &&
                  oe <= -target + 0.05 && on < 0 && oe < 0 && std::abs(rn) <= 0.05 && std::abs(re) <= 0.05 &&
                  p > 0.01 && disjoint;
  return {ok, "train corr news " + fmt(tn) + " evid " + fmt(te) + " (target " + fmt(target) +
                  "); reversed ood " + fmt(on) + " / " + fmt(oe) + "; removed ood " + fmt(rn) + " / " + fmt(re) +
                  "; stance chi-square min p " + fmt(p) + "; cross-topic intersection " +
                  (disjoint ? "empty" : "NOT empty")};
}

// --- 10 --------------------------------------------------------------------

int sh(const std::string& args) {
  const std::string cmd = std::string(DAL_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("missing artifact " + p.string());
  return {std::istreambuf_iterator<char>(in), {}};
}

Outcome reproducibility() {
  const fs::path root = fs::absolute("acceptance_out/repro");
  fs::remove_all(root);
  const std::string data =
      " --n-train 300 --n-valid 100 --n-test-id 100 --n-test-ood 100 --n-topics 4 --n-claim 8 --n-filler 60";
  const std::string small = " --embed-dim 8 --sent-dim 8 --attn-hidden 8 --disc-hidden 8 --classifier-hidden 8";
  std::vector<std::string> compared;
  int bad_exit = 0, mismatched = 0;
  for (const char* run : {"a", "b"}) {
    const fs::path d = root / run;
    bad_exit += sh("gen --seed 11" + data + " --out " + (d / "data").string()) != 0;
    bad_exit += sh("train --data " + (d / "data").string() + small +
                   " --alpha 0.1 --beta 0.1 --seed 4 --max-epochs 4 --out " + (d / "run").string()) != 0;
    bad_exit += sh("train --baseline --data " + (d / "data").string() + small + " --seed 4 --max-epochs 4 --out " +
                   (d / "base").string()) != 0;
    bad_exit += sh("eval --checkpoint " + (d / "run" / "checkpoint").string() + " --data " +
                   (d / "data").string() + " --out " + (d / "eval.json").string()) != 0;
    for (const char* kind : {"pilot", "main", "ablate", "sensitivity"})
      bad_exit += sh(std::string("experiment ") + kind + " --seeds 2 --grid 0.01,0.1 --max-epochs 3" + data +
                     small + " --out " + (d / kind).string()) != 0;
  }
  std::vector<fs::path> files;
  for (const char* f : {"train.jsonl", "valid.jsonl", "test_id.jsonl", "test_ood.jsonl", "train.meta.json"})
    files.push_back(fs::path("data") / f);
  for (const char* f : {"run/history.csv", "run/checkpoint", "base/history.csv", "eval.json", "pilot/pilot.csv",
                        "pilot/pilot.md", "main/main.csv", "main/main.md", "ablate/ablate.csv", "ablate/ablate.md",
                        "sensitivity/sensitivity.csv", "sensitivity/sensitivity_matrix.csv",
                        "main/data/cross_topic/test_ood.jsonl", "main/audit.log"})
    files.push_back(f);
  for (const auto& f : files) mismatched += slurp(root / "a" / f) != slurp(root / "b" / f);

  // Rerunning into the same directory rewrites identical report files.
  const std::string before = slurp(root / "a" / "main" / "main.csv");
  bad_exit += sh("experiment main --seeds 2 --grid 0.01,0.1 --max-epochs 3" + data + small + " --out " +
                 (root / "a" / "main").string()) != 0;
  mismatched += slurp(root / "a" / "main" / "main.csv") != before;

  return {bad_exit == 0 && mismatched == 0, std::to_string(files.size() + 1) + " artifacts compared across reruns, " +
                                                std::to_string(mismatched) + " differ; " +
                                                std::to_string(bad_exit) + " nonzero exits"};
}

}  // namespace

int main(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  fs::create_directories("acceptance_out");
  const auto t0 = Clock::now();

  criterion(1, "gradient correctness", [] {
    const auto t = Clock::now();
    auto o = gradient_correctness();
    const double s = seconds_since(t);
    o.pass = o.pass && s < 60;
    o.detail += "; " + fmt(s, "%.1f") + " s (< 60)";
    return o;
  });
  criterion(2, "reduction identity", reduction_identity);
  criterion(3, "phase isolation", phase_isolation);
  criterion(4, "gradient reversal decomposition", reversal_decomposition);
  criterion(5, "pilot phenomenon", pilot);

  Protocol protocol(protocol_spec({corpus::Setting::cross_platform, corpus::Setting::cross_topic},
                                  "acceptance_out/protocol"));
  criterion(6, "main debiasing claim", [&] { return debiasing(protocol); });
  criterion(7, "ablation direction", [&] { return ablation(protocol); });
  criterion(8, "metrics oracle", metrics_oracle);
  criterion(9, "benchmark validity", benchmark_validity);
  criterion(10, "reproducibility", reproducibility);

  const int ran = only.empty() ? 10 : static_cast<int>(only.size());
  std::cout << (failures ? "FAILED " : "ALL PASSED ") << ran - failures << "/" << ran << " criteria in "
            << fmt(seconds_since(t0), "%.0f") << " s" << std::endl;
  return failures ? 1 : 0;
}

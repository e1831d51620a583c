#include "dal/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "dal/errors.hpp"

namespace dal::harness {

namespace {

std::string fmt(double v, const char* spec = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

std::string fmt_opt(const std::optional<double>& v) { return v ? fmt(*v, "%g") : "NA"; }

std::string join(const std::vector<double>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ';';
    out += fmt(xs[i]);
  }
  return out;
}

RunKey make_key(Setting s, Method m, InputMode mode, double a, double b, std::uint64_t seed) {
  RunKey k;
  k.setting = s;
  k.method = m;
  k.mode = mode;
  k.alpha = a;
  k.beta = b;
  k.seed = seed;
  return k;
}

std::vector<RunKey> cell_keys(const Runner& r, Setting s, Method m, double a, double b,
                              InputMode mode = InputMode::both) {
  std::vector<RunKey> keys;
  for (auto seed : r.spec().seeds) keys.push_back(make_key(s, m, mode, a, b, seed));
  return keys;
}

ReportRow test_row(Runner& r, Setting s, Method m, InputMode mode, std::optional<double> a,
                   std::optional<double> b, const std::string& split) {
  ReportRow row;
  row.setting = s;
  row.method = m;
  row.mode = mode;
  row.alpha = a;
  row.beta = b;
  row.split = split;
  for (const auto& k : cell_keys(r, s, m, a.value_or(0.0), b.value_or(0.0), mode)) {
    const auto sc = r.test_scores(k, split);
    row.f1_macro.push_back(sc.f1_macro);
    row.f1_micro.push_back(sc.f1_micro);
  }
  return row;
}

void stamp(RunReport& rep, Runner& r, const std::string& name) {
  rep.experiment = name;
  rep.seeds = r.spec().seeds;
  for (auto s : r.spec().settings) rep.config_hash[s] = corpus::config_hash(r.benchmark(s));
}

double mean_of(const ReportRow* row) { return row ? row->macro().mean : std::nan(""); }

}  // namespace

std::string to_string(Method m) {
  switch (m) {
    case Method::baseline: return "baseline";
    case Method::dal: return "dal";
    case Method::dal_news: return "dal_news";
    case Method::dal_env: return "dal_env";
  }
  return "?";
}

void ExperimentSpec::validate() const {
  data.validate();
  train.validate();
  if (settings.empty()) throw ConfigError("settings: at least one setting required");
  if (grid.empty()) throw ConfigError("grid: at least one value required");
  for (double g : grid)
    if (!(g > 0.0) || !std::isfinite(g)) throw ConfigError("grid: values must be positive, got " + fmt(g, "%g"));
  if (seeds.empty()) throw ConfigError("seeds: at least one seed required");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
    throw ConfigError("seeds: values must be distinct");
  if (workers < 1) throw ConfigError("workers: must be >= 1");
}

std::string describe(const RunKey& k) {
  return corpus::to_string(k.setting) + " " + to_string(k.method) + " mode=" + model::to_string(k.mode) +
         " alpha=" + fmt(k.alpha, "%g") + " beta=" + fmt(k.beta, "%g") + " seed=" + std::to_string(k.seed);
}

Runner::Runner(ExperimentSpec spec) : spec_(std::move(spec)) { spec_.validate(); }

const corpus::Benchmark& Runner::benchmark(Setting s) {
  std::lock_guard lock(mutex_);
  auto it = benches_.find(s);
  if (it == benches_.end()) it = benches_.emplace(s, corpus::generate_benchmark(spec_.data, s)).first;
  return it->second;
}

void Runner::set_benchmark(corpus::Benchmark bench) {
  if (!(bench.config == spec_.data))
    throw ConfigError("benchmark generator config differs from the experiment's data config");
  std::lock_guard lock(mutex_);
  benches_.insert_or_assign(bench.setting, std::move(bench));
}

train::TrainResult Runner::run(const RunKey& key) {
  const auto& bench = benchmark(key.setting);
  train::TrainConfig cfg = spec_.train;
  cfg.alpha = key.alpha;
  cfg.beta = key.beta;
  cfg.seed = key.seed;
  cfg.input_mode = key.mode;
  if (key.method == Method::baseline) return train::train_supervised(bench, cfg);
  return train::train(bench, cfg);
}

void Runner::ensure(const std::vector<RunKey>& keys) {
  std::vector<RunKey> todo;
  {
    std::lock_guard lock(mutex_);
    std::set<RunKey> seen;
    for (const auto& k : keys)
      if (!results_.count(k) && seen.insert(k).second) todo.push_back(k);
  }
  for (auto s : spec_.settings) benchmark(s);
  if (todo.empty()) return;

  std::vector<std::optional<train::TrainResult>> out(todo.size());
  std::vector<std::exception_ptr> errors(todo.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < todo.size();) {
      try {
        out[i] = run(todo[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const auto n = std::min<std::size_t>(static_cast<std::size_t>(spec_.workers), todo.size());
  if (n <= 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(work);
  }
  // Single-owner reduction in key order.
  for (std::size_t i = 0; i < todo.size(); ++i)
    if (errors[i]) std::rethrow_exception(errors[i]);
  std::lock_guard lock(mutex_);
  for (std::size_t i = 0; i < todo.size(); ++i) results_.emplace(todo[i], std::move(*out[i]));
}

const train::TrainResult& Runner::result(const RunKey& key) const {
  auto it = results_.find(key);
  if (it == results_.end()) throw ValidationError("no cached run for " + describe(key));
  return it->second;
}

Scores Runner::valid_scores(const RunKey& key) {
  ensure({key});
  const auto& best = result(key).best;
  return {best.valid_f1_macro, best.valid_f1_micro};
}

Scores Runner::test_scores(const RunKey& key, const std::string& split) {
  if (split != "test_id" && split != "test_ood") throw ValidationError("not a test split: " + split);
  ensure({key});
  audit("test-read " + split + " " + describe(key));
  const auto sc = train::evaluate(benchmark(key.setting).split(split), result(key).best.params, key.mode);
  return {sc.f1_macro, sc.f1_micro};
}

void Runner::audit(const std::string& line) {
  std::lock_guard lock(mutex_);
  audit_.push_back(line);
}

std::vector<std::string> Runner::take_unflushed_audit() {
  std::lock_guard lock(mutex_);
  std::vector<std::string> out(audit_.begin() + static_cast<std::ptrdiff_t>(audit_flushed_), audit_.end());
  audit_flushed_ = audit_.size();
  return out;
}

std::vector<std::pair<double, double>> method_grid(Method m, const std::vector<double>& grid) {
  std::vector<std::pair<double, double>> cells;
  switch (m) {
    case Method::baseline: cells.emplace_back(0.0, 0.0); break;
    case Method::dal_news:
      for (double a : grid) cells.emplace_back(a, 0.0);
      break;
    case Method::dal_env:
      for (double b : grid) cells.emplace_back(0.0, b);
      break;
    case Method::dal:
      for (double a : grid)
        for (double b : grid) cells.emplace_back(a, b);
      break;
  }
  return cells;
}

Selection select_on_validation(Runner& r, Setting s, Method m) {
  const auto cells = method_grid(m, r.spec().grid);
  std::vector<RunKey> keys;
  for (auto [a, b] : cells)
    for (auto& k : cell_keys(r, s, m, a, b)) keys.push_back(k);
  r.ensure(keys);

  Selection best;
  bool first = true;
  for (auto [a, b] : cells) {
    double sum = 0.0;
    for (auto& k : cell_keys(r, s, m, a, b)) sum += r.valid_scores(k).f1_macro;
    const double mean = sum / static_cast<double>(r.spec().seeds.size());
    r.audit("valid-read " + corpus::to_string(s) + " " + to_string(m) + " alpha=" + fmt(a, "%g") +
            " beta=" + fmt(b, "%g") + " mean_valid_f1_macro=" + fmt(mean));
    if (first || mean > best.mean_valid_f1) {
      best = {a, b, mean};
      first = false;
    }
  }
  r.audit("select " + corpus::to_string(s) + " " + to_string(m) + " alpha=" + fmt(best.alpha, "%g") +
          " beta=" + fmt(best.beta, "%g"));
  return best;
}

const ReportRow* RunReport::find(Setting s, Method m, const std::string& split,
                                 std::optional<InputMode> mode) const {
  for (const auto& row : rows)
    if (row.setting == s && row.method == m && row.split == split && (!mode || row.mode == *mode)) return &row;
  return nullptr;
}

std::string RunReport::csv() const {
  std::ostringstream os;
  os << "experiment,setting,config_hash,method,input_mode,alpha,beta,split,n_seeds,"
        "f1_macro_mean,f1_macro_std,f1_micro_mean,f1_micro_std,selection_valid_f1_macro,f1_macro_per_seed\n";
  auto emit = [&](const ReportRow& row) {
    const auto ma = row.macro();
    const auto mi = row.micro();
    os << experiment << ',' << corpus::to_string(row.setting) << ',' << config_hash.at(row.setting) << ','
       << to_string(row.method) << ',' << model::to_string(row.mode) << ',' << fmt_opt(row.alpha) << ','
       << fmt_opt(row.beta) << ',' << row.split << ',' << row.f1_macro.size() << ',' << fmt(ma.mean) << ','
       << fmt(ma.std) << ',' << fmt(mi.mean) << ',' << fmt(mi.std) << ','
       << (row.selection_valid_f1 ? fmt(*row.selection_valid_f1) : "NA") << ',' << join(row.f1_macro) << '\n';
  };
  for (const auto& row : rows) emit(row);
  for (const auto& row : grid) emit(row);
  return os.str();
}

std::string RunReport::markdown() const {
  std::ostringstream os;
  os << "# " << experiment << "\n\n";
  for (const auto& [s, h] : config_hash) os << "- " << corpus::to_string(s) << " benchmark hash `" << h << "`\n";
  os << "- seeds:";
  for (auto s : seeds) os << ' ' << s;
  os << "\n\n";
  auto table = [&](const std::vector<ReportRow>& rs) {
    os << "| setting | method | input | alpha | beta | split | F1-Macro | F1-Micro |\n";
    os << "|---|---|---|---|---|---|---|---|\n";
    for (const auto& row : rs) {
      const auto ma = row.macro();
      const auto mi = row.micro();
      os << "| " << corpus::to_string(row.setting) << " | " << to_string(row.method) << " | "
         << model::to_string(row.mode) << " | " << fmt_opt(row.alpha) << " | " << fmt_opt(row.beta) << " | "
         << row.split << " | " << fmt(ma.mean, "%.4f") << " ± " << fmt(ma.std, "%.4f") << " | "
         << fmt(mi.mean, "%.4f") << " ± " << fmt(mi.std, "%.4f") << " |\n";
    }
    os << '\n';
  };
  if (!rows.empty()) table(rows);
  if (!grid.empty()) table(grid);
  if (!checks.empty()) {
    os << "| check | result | detail |\n|---|---|---|\n";
    for (const auto& c : checks)
      os << "| " << c.name << " | " << (c.passed ? "pass" : "FAIL") << " | " << c.detail << " |\n";
    os << '\n';
  }
  return os.str();
}

RunReport run_pilot(Runner& r) {
  RunReport rep;
  stamp(rep, r, "pilot");
  const InputMode modes[] = {InputMode::news_only, InputMode::evidence_only, InputMode::both};
  std::vector<RunKey> keys;
  for (auto s : r.spec().settings)
    for (auto mode : modes)
      for (auto& k : cell_keys(r, s, Method::baseline, 0.0, 0.0, mode)) keys.push_back(k);
  r.ensure(keys);

  for (auto s : r.spec().settings) {
    for (auto mode : modes)
      for (const char* split : {"test_id", "test_ood"})
        rep.rows.push_back(test_row(r, s, Method::baseline, mode, std::nullopt, std::nullopt, split));

    const auto st = corpus::to_string(s);
    const double news_id = mean_of(rep.find(s, Method::baseline, "test_id", InputMode::news_only));
    const double news_ood = mean_of(rep.find(s, Method::baseline, "test_ood", InputMode::news_only));
    const double both_id = mean_of(rep.find(s, Method::baseline, "test_id", InputMode::both));
    rep.checks.push_back({st + ": news_only test_id >= 0.75", news_id >= 0.75, fmt(news_id, "%.4f")});
    rep.checks.push_back({st + ": news_only test_ood <= 0.35", news_ood <= 0.35, fmt(news_ood, "%.4f")});
    rep.checks.push_back({st + ": both test_id >= news_only test_id", both_id >= news_id,
                          fmt(both_id, "%.4f") + " vs " + fmt(news_id, "%.4f")});
  }
  return rep;
}

namespace {

// Selection is committed for every method before any test split is read.
RunReport compare(Runner& r, const std::string& name, const std::vector<Method>& methods) {
  RunReport rep;
  stamp(rep, r, name);
  std::vector<RunKey> keys;
  for (auto s : r.spec().settings)
    for (auto m : methods)
      for (auto [a, b] : method_grid(m, r.spec().grid))
        for (auto& k : cell_keys(r, s, m, a, b)) keys.push_back(k);
  r.ensure(keys);

  std::map<std::pair<Setting, Method>, Selection> chosen;
  for (auto s : r.spec().settings)
    for (auto m : methods) chosen[{s, m}] = select_on_validation(r, s, m);
  r.audit("commit " + name);

  for (auto s : r.spec().settings)
    for (auto m : methods) {
      const auto& sel = chosen[{s, m}];
      for (const char* split : {"test_id", "test_ood"}) {
        std::optional<double> a, b;
        if (m != Method::baseline) {
          a = sel.alpha;
          b = sel.beta;
        }
        auto row = test_row(r, s, m, InputMode::both, a, b, split);
        row.selection_valid_f1 = sel.mean_valid_f1;
        rep.rows.push_back(std::move(row));
      }
    }
  return rep;
}

}  // namespace

RunReport run_main(Runner& r) {
  auto rep = compare(r, "main", {Method::baseline, Method::dal});
  for (auto s : r.spec().settings) {
    const auto st = corpus::to_string(s);
    const double base = mean_of(rep.find(s, Method::baseline, "test_ood"));
    const double dal = mean_of(rep.find(s, Method::dal, "test_ood"));
    rep.checks.push_back({st + ": dal - baseline test_ood >= 0.10", dal - base >= 0.10,
                          fmt(dal, "%.4f") + " - " + fmt(base, "%.4f")});
    rep.checks.push_back({st + ": dal test_ood >= 0.80", dal >= 0.80, fmt(dal, "%.4f")});
  }
  return rep;
}

RunReport run_ablation(Runner& r) {
  auto rep = compare(r, "ablation", {Method::baseline, Method::dal_news, Method::dal_env, Method::dal});
  bool full_best_somewhere = false;
  std::string detail;
  for (auto s : r.spec().settings) {
    const auto st = corpus::to_string(s);
    const double base = mean_of(rep.find(s, Method::baseline, "test_ood"));
    const double news = mean_of(rep.find(s, Method::dal_news, "test_ood"));
    const double env = mean_of(rep.find(s, Method::dal_env, "test_ood"));
    const double full = mean_of(rep.find(s, Method::dal, "test_ood"));
    rep.checks.push_back({st + ": dal_news >= baseline", news >= base, fmt(news, "%.4f") + " vs " + fmt(base, "%.4f")});
    rep.checks.push_back({st + ": dal_env >= baseline", env >= base, fmt(env, "%.4f") + " vs " + fmt(base, "%.4f")});
    const bool top = full >= std::max(news, env);
    full_best_somewhere = full_best_somewhere || top;
    detail += st + " " + fmt(full, "%.4f") + " vs " + fmt(std::max(news, env), "%.4f") + "; ";
  }
  rep.checks.push_back({"dal >= both single-aspect variants in some setting", full_best_somewhere, detail});
  return rep;
}

RunReport run_sensitivity(Runner& r) {
  RunReport rep;
  stamp(rep, r, "sensitivity");
  std::vector<RunKey> keys;
  for (auto s : r.spec().settings)
    for (auto [a, b] : method_grid(Method::dal, r.spec().grid))
      for (auto& k : cell_keys(r, s, Method::dal, a, b)) keys.push_back(k);
  r.ensure(keys);
  r.audit("commit sensitivity (no selection; every cell is reported)");
  for (auto s : r.spec().settings)
    for (auto [a, b] : method_grid(Method::dal, r.spec().grid))
      rep.grid.push_back(test_row(r, s, Method::dal, InputMode::both, a, b, "test_ood"));
  return rep;
}

std::string sensitivity_csv(const RunReport& rep, const std::vector<double>& grid) {
  std::ostringstream os;
  os << "setting,config_hash,alpha";
  for (double b : grid) os << ",beta=" << fmt(b, "%g");
  os << '\n';
  std::vector<Setting> settings;
  for (const auto& row : rep.grid)
    if (std::find(settings.begin(), settings.end(), row.setting) == settings.end()) settings.push_back(row.setting);
  auto cell = [&](Setting s, double a, double b) -> const ReportRow& {
    for (const auto& row : rep.grid)
      if (row.setting == s && row.alpha == a && row.beta == b) return row;
    throw ValidationError("sensitivity cell missing");
  };
  for (auto s : settings)
    for (double a : grid) {
      os << corpus::to_string(s) << ',' << rep.config_hash.at(s) << ',' << fmt(a, "%g");
      for (double b : grid) os << ',' << fmt(cell(s, a, b).macro().mean);
      os << '\n';
    }
  os << "\nsetting,alpha,beta,seed,f1_macro,f1_micro\n";
  for (auto s : settings)
    for (double a : grid)
      for (double b : grid) {
        const auto& row = cell(s, a, b);
        for (std::size_t i = 0; i < row.f1_macro.size(); ++i)
          os << corpus::to_string(s) << ',' << fmt(a, "%g") << ',' << fmt(b, "%g") << ',' << rep.seeds[i] << ','
             << fmt(row.f1_macro[i]) << ',' << fmt(row.f1_micro[i]) << '\n';
      }
  return os.str();
}

void write_report(const RunReport& rep, Runner& r, const std::string& name) {
  const auto& dir = r.spec().out_dir;
  if (dir.empty()) return;
  std::filesystem::create_directories(dir);
  auto write = [&](const std::filesystem::path& p, const std::string& text, std::ios::openmode mode) {
    std::ofstream out(p, std::ios::binary | mode);
    if (!out) throw ValidationError("cannot write " + p.string());
    out << text;
  };
  write(dir / (name + ".csv"), rep.csv(), std::ios::trunc);
  write(dir / (name + ".md"), rep.markdown(), std::ios::trunc);
  if (!rep.grid.empty()) write(dir / (name + "_matrix.csv"), sensitivity_csv(rep, r.spec().grid), std::ios::trunc);
  std::string log;
  for (const auto& line : r.take_unflushed_audit()) log += line + '\n';
  write(dir / "audit.log", "== " + name + "\n" + log, std::ios::app);
}

}  // namespace dal::harness

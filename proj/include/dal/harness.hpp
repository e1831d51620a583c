#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "dal/corpus.hpp"
#include "dal/metrics.hpp"
#include "dal/trainer.hpp"

// Experiment orchestration: input ablations of the undebiased detector, the
// DAL-vs-baseline comparison with validation-only grid selection, the
// single-aspect ablations and the alpha/beta sensitivity grid.
namespace dal::harness {

using corpus::Setting;
using model::InputMode;

enum class Method { baseline, dal, dal_news, dal_env };
std::string to_string(Method m);

struct ExperimentSpec {
  corpus::GeneratorConfig data;
  std::vector<Setting> settings{Setting::cross_platform};
  train::TrainConfig train;  // alpha/beta/seed/mode overridden per run
  std::vector<double> grid{0.001, 0.01, 0.1, 1.0};
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  int workers = 1;
  std::filesystem::path out_dir;  // empty: no files written

  void validate() const;
};

struct RunKey {
  Setting setting = Setting::cross_platform;
  Method method = Method::baseline;
  InputMode mode = InputMode::both;
  double alpha = 0.0;
  double beta = 0.0;
  std::uint64_t seed = 1;

  auto operator<=>(const RunKey&) const = default;
};

std::string describe(const RunKey& key);

struct Scores {
  double f1_macro = 0.0;
  double f1_micro = 0.0;
};

// Trains each (config, seed) once and remembers the result. Validation
// scores are available as soon as a run finishes; test scores only through
// `test_scores`, which records every access in the audit log.
class Runner {
 public:
  explicit Runner(ExperimentSpec spec);

  const ExperimentSpec& spec() const { return spec_; }
  const corpus::Benchmark& benchmark(Setting s);
  // Use an existing benchmark (e.g. read from disk) instead of generating
  // one. Its generator config must equal spec.data.
  void set_benchmark(corpus::Benchmark bench);

  // Train any runs not yet cached, up to spec.workers at a time.
  void ensure(const std::vector<RunKey>& keys);

  const train::TrainResult& result(const RunKey& key) const;
  Scores valid_scores(const RunKey& key);
  Scores test_scores(const RunKey& key, const std::string& split);

  void audit(const std::string& line);
  const std::vector<std::string>& audit_log() const { return audit_; }
  // Audit lines not yet written out; marks them written.
  std::vector<std::string> take_unflushed_audit();

 private:
  train::TrainResult run(const RunKey& key);

  ExperimentSpec spec_;
  std::map<Setting, corpus::Benchmark> benches_;
  std::map<RunKey, train::TrainResult> results_;
  std::vector<std::string> audit_;
  std::size_t audit_flushed_ = 0;
  std::mutex mutex_;
};

struct ReportRow {
  Setting setting = Setting::cross_platform;
  Method method = Method::baseline;
  InputMode mode = InputMode::both;
  std::optional<double> alpha, beta;  // unset for the baseline
  std::string split;
  std::vector<double> f1_macro;  // per seed, in spec.seeds order
  std::vector<double> f1_micro;
  std::optional<double> selection_valid_f1;  // mean validation F1 of the chosen cell

  metrics::Aggregate macro() const { return metrics::aggregate(f1_macro); }
  metrics::Aggregate micro() const { return metrics::aggregate(f1_micro); }
};

struct Check {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct RunReport {
  std::string experiment;
  std::map<Setting, std::string> config_hash;
  std::vector<std::uint64_t> seeds;
  std::vector<ReportRow> rows;
  std::vector<Check> checks;

  // Cells of the sensitivity grid (per setting, row-major over alpha then beta).
  std::vector<ReportRow> grid;

  const ReportRow* find(Setting s, Method m, const std::string& split,
                        std::optional<InputMode> mode = std::nullopt) const;
  std::string csv() const;
  std::string markdown() const;
};

// Candidate (alpha, beta) cells for a debiasing method.
std::vector<std::pair<double, double>> method_grid(Method m, const std::vector<double>& grid);

struct Selection {
  double alpha = 0.0;
  double beta = 0.0;
  double mean_valid_f1 = 0.0;
};

// Pick the cell with the highest mean validation F1-Macro over seeds (ties:
// first in grid order). Reads validation scores only.
Selection select_on_validation(Runner& runner, Setting s, Method m);

RunReport run_pilot(Runner& runner);
RunReport run_main(Runner& runner);
RunReport run_ablation(Runner& runner);
RunReport run_sensitivity(Runner& runner);

// Sensitivity CSV: one matrix of mean test_ood F1-Macro per setting plus
// per-seed long-form rows.
std::string sensitivity_csv(const RunReport& report, const std::vector<double>& grid);

// Writes <name>.csv, <name>.md and appends the audit log under spec.out_dir.
void write_report(const RunReport& report, Runner& runner, const std::string& name);

}  // namespace dal::harness

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dal/corpus.hpp"
#include "dal/metrics.hpp"
#include "dal/model.hpp"

namespace dal::train {

using ad::Var;
using corpus::NewsInstance;
using model::InputMode;
using model::ParamSet;

using Batch = std::span<const NewsInstance>;

enum class Alternation { per_epoch, per_batch };
std::string to_string(Alternation a);
Alternation parse_alternation(const std::string& s);

struct TrainConfig {
  double alpha = 0.0;
  double beta = 0.0;
  double lr = 5e-3;
  int batch_size = 32;
  int max_epochs = 200;
  int patience = 10;
  std::uint64_t seed = 1;
  InputMode input_mode = InputMode::both;
  Alternation alternation = Alternation::per_epoch;
  model::ModelConfig model;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

std::string config_to_json(const TrainConfig& cfg);
TrainConfig config_from_json(const std::string& text);

// Adam with beta1 = 0.9, beta2 = 0.999, eps = 1e-8 over a fixed list of
// parameters. Moments are allocated lazily with their parameter's shape.
class AdamState {
 public:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  AdamState() = default;
  explicit AdamState(std::vector<Var> params) : params_(std::move(params)) {}

  void step(double lr);
  long t() const { return t_; }
  const std::vector<Var>& params() const { return params_; }

 private:
  std::vector<Var> params_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  long t_ = 0;
};

// Separate moment state for the discriminator phase and the main phase.
struct Optimizers {
  AdamState disc;
  AdamState main;

  explicit Optimizers(const ParamSet& params);
};

Var loss_main(Batch batch, const ParamSet& params, InputMode mode, model::ForwardCache* cache = nullptr);
Var loss_news(Batch batch, const ParamSet& params, model::ForwardCache* cache = nullptr);
Var loss_evid(Batch batch, const ParamSet& params, model::ForwardCache* cache = nullptr);

struct StepLosses {
  double l_m = 0.0;
  double l_n = 0.0;
  double l_e = 0.0;
  double l = 0.0;
};

// Overall objective l_m - alpha * l_n - beta * l_e as one graph.
struct Objective {
  Var l_m, l_n, l_e, l;
};
Objective dal_objective(Batch batch, const ParamSet& params, const TrainConfig& cfg);

// Freeze the main groups and unfreeze the discriminators (and vice versa).
void enter_disc_phase(ParamSet& params);
void enter_main_phase(ParamSet& params);

// One Adam step of theta_n on l_n and theta_e on l_e. Requires the
// discriminator phase freeze layout; throws ContractViolation otherwise.
StepLosses step_discriminators(Batch batch, ParamSet& params, AdamState& opt, const TrainConfig& cfg);

// One Adam step of theta_f, theta_w, theta_s on l_m - alpha l_n - beta l_e.
// Requires the main phase freeze layout.
StepLosses step_main(Batch batch, ParamSet& params, AdamState& opt, const TrainConfig& cfg);

// Plain supervised step on l_m alone (no discriminator graph).
StepLosses step_supervised(Batch batch, ParamSet& params, AdamState& opt, const TrainConfig& cfg);

struct Checkpoint {
  ParamSet params;
  int epoch = 0;
  double valid_f1_macro = 0.0;
  double valid_f1_micro = 0.0;
  TrainConfig config;
};

struct EpochRecord {
  int epoch = 0;
  std::optional<double> l_m, l_n, l_e, l;
  double valid_f1_macro = 0.0;
  double valid_f1_micro = 0.0;
  bool is_best = false;
};

struct TrainResult {
  Checkpoint best;
  std::vector<EpochRecord> history;
  // Phase-isolation audit: number of steps where a frozen group changed.
  long isolation_violations = 0;
  long steps = 0;
};

struct SplitScores {
  metrics::Confusion confusion;
  double f1_macro = 0.0;
  double f1_micro = 0.0;
};

SplitScores evaluate(const corpus::Split& split, const ParamSet& params, InputMode mode);

// Called after each epoch with the epoch record; used by tests to audit.
using EpochHook = std::function<void(const EpochRecord&, const ParamSet&)>;

struct TrainOptions {
  // Recompute group digests around each step to count phase-isolation
  // violations.
  bool audit_isolation = false;
  // Replace the validation metric (tests of the stopping rule).
  std::function<double(int epoch, const ParamSet&)> metric_override;
  EpochHook on_epoch;
};

// Dual adversarial learning: alternate discriminator and main phases, track
// the best validation F1-Macro, stop after `patience` epochs without strict
// improvement or at max_epochs.
TrainResult train(const corpus::Benchmark& bench, const TrainConfig& cfg, const TrainOptions& opts = {});

// Baseline trainer: the same loop with only supervised steps on l_m.
TrainResult train_supervised(const corpus::Benchmark& bench, const TrainConfig& cfg,
                             const TrainOptions& opts = {});

ParamSet init_params(const corpus::Benchmark& bench, const TrainConfig& cfg);

void write_history_csv(const std::vector<EpochRecord>& history, const std::filesystem::path& path);
std::string history_csv(const std::vector<EpochRecord>& history);

// Binary checkpoint: "DALCKPT1", tensor records, JSON trailer.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
std::string checkpoint_bytes(const Checkpoint& ckpt);
Checkpoint checkpoint_from_bytes(const std::string& bytes);

}  // namespace dal::train

#include "dal/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

namespace dal::train {

namespace {

void require_phase(const ParamSet& params, bool main_frozen, const char* step) {
  for (auto g : model::kMainGroups)
    if (params.frozen(g) != main_frozen)
      throw ContractViolation(std::string(step) + ": group " + model::to_string(g) +
                              (main_frozen ? " must be frozen" : " must be trainable"));
  for (auto g : model::kDiscGroups)
    if (params.frozen(g) == main_frozen)
      throw ContractViolation(std::string(step) + ": group " + model::to_string(g) +
                              (main_frozen ? " must be trainable" : " must be frozen"));
}

Var mean_cross_entropy(Batch batch, const std::function<Var(const NewsInstance&)>& head) {
  if (batch.empty()) throw ValidationError("loss over an empty batch");
  std::vector<Var> losses;
  losses.reserve(batch.size());
  for (const auto& inst : batch) losses.push_back(ad::mixture_nll(head(inst), inst.label));
  return ad::scale(ad::sum_n(losses), 1.0 / static_cast<double>(batch.size()));
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

// Shared epoch loop: `run_epoch` performs the optimisation steps of one epoch
// and returns the mean phase-B losses.
using EpochFn = std::function<EpochRecord(int epoch)>;

TrainResult run_loop(const corpus::Benchmark& bench, const TrainConfig& cfg, const TrainOptions& opts,
                     ParamSet& params, const EpochFn& run_epoch) {
  TrainResult result;
  double best = -std::numeric_limits<double>::infinity();
  int stall = 0;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    EpochRecord rec = run_epoch(epoch);
    rec.epoch = epoch;
    if (opts.metric_override) {
      rec.valid_f1_macro = opts.metric_override(epoch, params);
      rec.valid_f1_micro = rec.valid_f1_macro;
    } else {
      const auto scores = evaluate(bench.valid, params, cfg.input_mode);
      rec.valid_f1_macro = scores.f1_macro;
      rec.valid_f1_micro = scores.f1_micro;
    }
    // Strict improvement only: ties keep the earliest epoch.
    if (rec.valid_f1_macro > best) {
      best = rec.valid_f1_macro;
      stall = 0;
      rec.is_best = true;
      result.best = Checkpoint{params.clone(), epoch, rec.valid_f1_macro, rec.valid_f1_micro, cfg};
    } else {
      ++stall;
    }
    result.history.push_back(rec);
    if (opts.on_epoch) opts.on_epoch(rec, params);
    if (stall >= cfg.patience) break;
  }
  return result;
}

void check_finite(const StepLosses& s, const char* phase, int epoch, std::size_t batch) {
  if (!std::isfinite(s.l) || !std::isfinite(s.l_m) || !std::isfinite(s.l_n) || !std::isfinite(s.l_e))
    throw NonFiniteLoss(std::string("non-finite loss in ") + phase + " phase, epoch " +
                        std::to_string(epoch) + ", batch " + std::to_string(batch));
}

std::vector<Batch> make_batches(const corpus::Split& data, int batch_size) {
  std::vector<Batch> out;
  const std::size_t b = static_cast<std::size_t>(batch_size);
  for (std::size_t i = 0; i < data.size(); i += b)
    out.emplace_back(data.data() + i, std::min(b, data.size() - i));
  return out;
}

}  // namespace

std::string to_string(Alternation a) { return a == Alternation::per_epoch ? "per_epoch" : "per_batch"; }

Alternation parse_alternation(const std::string& s) {
  if (s == "per_epoch" || s == "per-epoch") return Alternation::per_epoch;
  if (s == "per_batch" || s == "per-batch") return Alternation::per_batch;
  throw ConfigError("alternation: expected per_epoch|per_batch, got '" + s + "'");
}

void TrainConfig::validate() const {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha: must be >= 0");
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigError("beta: must be >= 0");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr: must be > 0");
  if (batch_size < 1) throw ConfigError("batch_size: must be >= 1");
  if (max_epochs < 1) throw ConfigError("max_epochs: must be >= 1");
  if (patience < 1) throw ConfigError("patience: must be >= 1");
}

void AdamState::step(double lr) {
  if (m_.empty())
    for (const auto& p : params_) {
      m_.push_back(Tensor::zeros_like(p->value));
      v_.push_back(Tensor::zeros_like(p->value));
    }
  ++t_;
  const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto g = params_[i]->grad.flat().array();
    auto m = m_[i].flat().array();
    auto v = v_[i].flat().array();
    m = kBeta1 * m + (1.0 - kBeta1) * g;
    v = kBeta2 * v + (1.0 - kBeta2) * g.square();
    params_[i]->value.flat().array() -= lr * (m / c1) / ((v / c2).sqrt() + kEps);
  }
}

Optimizers::Optimizers(const ParamSet& params) {
  std::vector<Var> disc, main;
  for (const auto& p : params.parameters()) {
    const bool is_disc = p.group == model::Group::news_disc || p.group == model::Group::evid_disc;
    (is_disc ? disc : main).push_back(p.var);
  }
  this->disc = AdamState(std::move(disc));
  this->main = AdamState(std::move(main));
}

Var loss_main(Batch batch, const ParamSet& params, InputMode mode, model::ForwardCache* cache) {
  return mean_cross_entropy(batch, [&](const NewsInstance& inst) {
    return model::forward_main_traced(inst, params, mode, cache).logits;
  });
}

Var loss_news(Batch batch, const ParamSet& params, model::ForwardCache* cache) {
  return mean_cross_entropy(batch,
                            [&](const NewsInstance& inst) { return model::news_disc_logits(inst, params, cache); });
}

Var loss_evid(Batch batch, const ParamSet& params, model::ForwardCache* cache) {
  return mean_cross_entropy(batch,
                            [&](const NewsInstance& inst) { return model::evid_disc_logits(inst, params, cache); });
}

Objective dal_objective(Batch batch, const ParamSet& params, const TrainConfig& cfg) {
  model::ForwardCache cache(params);
  Objective o;
  o.l_m = loss_main(batch, params, cfg.input_mode, &cache);
  o.l_n = loss_news(batch, params, &cache);
  o.l_e = loss_evid(batch, params, &cache);
  // Negative coefficients reverse the discriminator gradients into the
  // shared encoder.
  o.l = ad::sub(ad::sub(o.l_m, ad::scale(o.l_n, cfg.alpha)), ad::scale(o.l_e, cfg.beta));
  return o;
}

void enter_disc_phase(ParamSet& params) {
  for (auto g : model::kMainGroups) params.set_frozen(g, true);
  for (auto g : model::kDiscGroups) params.set_frozen(g, false);
}

void enter_main_phase(ParamSet& params) {
  for (auto g : model::kMainGroups) params.set_frozen(g, false);
  for (auto g : model::kDiscGroups) params.set_frozen(g, true);
}

StepLosses step_discriminators(Batch batch, ParamSet& params, AdamState& opt, const TrainConfig& cfg) {
  require_phase(params, true, "step_discriminators");
  model::ForwardCache cache(params);
  const Var l_n = loss_news(batch, params, &cache);
  const Var l_e = loss_evid(batch, params, &cache);
  // theta_n and theta_e are disjoint, so one pass on l_n + l_e yields the
  // gradient of l_n for theta_n and of l_e for theta_e.
  ad::backward(ad::add(l_n, l_e));
  opt.step(cfg.lr);
  params.zero_grad();
  StepLosses s;
  s.l_n = l_n->value.item();
  s.l_e = l_e->value.item();
  s.l = s.l_n + s.l_e;
  return s;
}

StepLosses step_main(Batch batch, ParamSet& params, AdamState& opt, const TrainConfig& cfg) {
  require_phase(params, false, "step_main");
  const Objective o = dal_objective(batch, params, cfg);
  ad::backward(o.l);
  opt.step(cfg.lr);
  params.zero_grad();
  StepLosses s{o.l_m->value.item(), o.l_n->value.item(), o.l_e->value.item(), o.l->value.item()};
  const double composed = s.l_m - cfg.alpha * s.l_n - cfg.beta * s.l_e;
  if (std::abs(composed - s.l) > 1e-12 * std::max(1.0, std::abs(s.l)))
    throw ContractViolation("overall loss does not equal l_m - alpha l_n - beta l_e");
  return s;
}

StepLosses step_supervised(Batch batch, ParamSet& params, AdamState& opt, const TrainConfig& cfg) {
  model::ForwardCache cache(params);
  const Var l_m = loss_main(batch, params, cfg.input_mode, &cache);
  ad::backward(l_m);
  opt.step(cfg.lr);
  params.zero_grad();
  StepLosses s;
  s.l_m = s.l = l_m->value.item();
  return s;
}

SplitScores evaluate(const corpus::Split& split, const ParamSet& params, InputMode mode) {
  ParamSet frozen = params.clone();
  for (int g = 0; g < model::kGroupCount; ++g) frozen.set_frozen(static_cast<model::Group>(g), true);
  model::ForwardCache cache(frozen);
  std::vector<int> labels, preds;
  labels.reserve(split.size());
  preds.reserve(split.size());
  for (const auto& inst : split) {
    const Var probs = model::forward_main(inst, frozen, mode, &cache);
    labels.push_back(inst.label);
    preds.push_back(metrics::argmax_prediction(probs->value[0], probs->value[1]));
  }
  SplitScores s;
  s.confusion = metrics::confusion(labels, preds);
  s.f1_macro = metrics::f1_macro(s.confusion);
  s.f1_micro = metrics::f1_micro(s.confusion);
  return s;
}

ParamSet init_params(const corpus::Benchmark& bench, const TrainConfig& cfg) {
  model::ModelConfig mc = cfg.model;
  mc.vocab_size = bench.config.vocab().size();
  Rng rng = Rng::derive(cfg.seed, Stream::init);
  return ParamSet(mc, rng);
}

TrainResult train(const corpus::Benchmark& bench, const TrainConfig& cfg_in, const TrainOptions& opts) {
  cfg_in.validate();
  if (bench.train.empty() || bench.valid.empty()) throw ValidationError("train: empty train or valid split");
  TrainConfig cfg = cfg_in;
  ParamSet params = init_params(bench, cfg);
  cfg.model = params.config();
  Optimizers opt(params);

  Rng main_rng = Rng::derive(cfg.seed, Stream::shuffle);
  Rng disc_rng = Rng::derive(cfg.seed, Stream::shuffle_disc);
  corpus::Split main_order = bench.train;
  corpus::Split disc_order = bench.train;
  long violations = 0, steps = 0;

  const std::array<model::Group, 3> main_groups{model::kMainGroups};
  const std::array<model::Group, 2> disc_groups{model::kDiscGroups};

  auto disc_step = [&](Batch batch, int epoch, std::size_t b) {
    enter_disc_phase(params);
    const auto before = opts.audit_isolation ? params.digest(main_groups) : 0;
    const auto s = step_discriminators(batch, params, opt.disc, cfg);
    check_finite(s, "discriminator", epoch, b);
    if (opts.audit_isolation && params.digest(main_groups) != before) ++violations;
    ++steps;
  };
  auto main_step = [&](Batch batch, int epoch, std::size_t b) {
    enter_main_phase(params);
    const auto before = opts.audit_isolation ? params.digest(disc_groups) : 0;
    const auto s = step_main(batch, params, opt.main, cfg);
    check_finite(s, "main", epoch, b);
    if (opts.audit_isolation && params.digest(disc_groups) != before) ++violations;
    ++steps;
    return s;
  };

  auto run_epoch = [&](int epoch) {
    StepLosses sum;
    std::size_t n = 0;
    auto add = [&](const StepLosses& s) {
      sum.l_m += s.l_m;
      sum.l_n += s.l_n;
      sum.l_e += s.l_e;
      sum.l += s.l;
      ++n;
    };
    if (cfg.alternation == Alternation::per_epoch) {
      disc_rng.shuffle(disc_order);
      const auto disc_batches = make_batches(disc_order, cfg.batch_size);
      for (std::size_t b = 0; b < disc_batches.size(); ++b) disc_step(disc_batches[b], epoch, b);
      main_rng.shuffle(main_order);
      const auto main_batches = make_batches(main_order, cfg.batch_size);
      for (std::size_t b = 0; b < main_batches.size(); ++b) add(main_step(main_batches[b], epoch, b));
    } else {
      main_rng.shuffle(main_order);
      const auto batches = make_batches(main_order, cfg.batch_size);
      for (std::size_t b = 0; b < batches.size(); ++b) {
        disc_step(batches[b], epoch, b);
        add(main_step(batches[b], epoch, b));
      }
    }
    EpochRecord rec;
    const double k = static_cast<double>(n);
    rec.l_m = sum.l_m / k;
    rec.l_n = sum.l_n / k;
    rec.l_e = sum.l_e / k;
    rec.l = sum.l / k;
    return rec;
  };

  TrainResult result = run_loop(bench, cfg, opts, params, run_epoch);
  result.isolation_violations = violations;
  result.steps = steps;
  return result;
}

TrainResult train_supervised(const corpus::Benchmark& bench, const TrainConfig& cfg_in, const TrainOptions& opts) {
  cfg_in.validate();
  if (bench.train.empty() || bench.valid.empty()) throw ValidationError("train: empty train or valid split");
  TrainConfig cfg = cfg_in;
  cfg.alpha = cfg.beta = 0.0;
  ParamSet params = init_params(bench, cfg);
  cfg.model = params.config();
  for (auto g : model::kDiscGroups) params.set_frozen(g, true);
  Optimizers opt(params);

  Rng rng = Rng::derive(cfg.seed, Stream::shuffle);
  corpus::Split order = bench.train;
  auto run_epoch = [&](int epoch) {
    rng.shuffle(order);
    const auto batches = make_batches(order, cfg.batch_size);
    double sum = 0.0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto s = step_supervised(batches[b], params, opt.main, cfg);
      check_finite(s, "supervised", epoch, b);
      sum += s.l_m;
    }
    EpochRecord rec;
    rec.l_m = rec.l = sum / static_cast<double>(batches.size());
    return rec;
  };
  return run_loop(bench, cfg, opts, params, run_epoch);
}

std::string history_csv(const std::vector<EpochRecord>& history) {
  std::string out = "epoch,l_m,l_n,l_e,l,valid_f1_macro,valid_f1_micro,is_best\n";
  auto opt = [](const std::optional<double>& v) { return v ? fmt(*v) : std::string(); };
  for (const auto& r : history) {
    out += std::to_string(r.epoch) + "," + opt(r.l_m) + "," + opt(r.l_n) + "," + opt(r.l_e) + "," + opt(r.l) +
           "," + fmt(r.valid_f1_macro) + "," + fmt(r.valid_f1_micro) + "," + (r.is_best ? "1" : "0") + "\n";
  }
  return out;
}

void write_history_csv(const std::vector<EpochRecord>& history, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << history_csv(history);
}

}  // namespace dal::train

// dal_cli: generate benchmarks, train/evaluate detectors, run experiments.
//
//   dal_cli gen --setting cross-platform --seed 1 --out data/
//   dal_cli train --data data/ --name dal01 --alpha 0.1 --beta 0.1
//   dal_cli eval --checkpoint runs/dal01/checkpoint --data data/ --split test_ood
//   dal_cli experiment main --out runs/main --workers 1
//
// Every subcommand takes --config FILE with key=value lines; flags given on
// the command line win over the file. Exit codes: 0 ok, 1 other failure,
// 2 bad configuration / missing or malformed input, 3 non-finite loss.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dal/harness.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace dal;

namespace {

struct InputError : Error {
  using Error::Error;
};

struct DataFlags {
  std::string setting = "cross-platform";
  std::string shift_mode = "reversed";
  corpus::GeneratorConfig cfg;
};

struct TrainFlags {
  train::TrainConfig cfg;
  std::string mode = "both";
  std::string alternation = "per_epoch";
  bool baseline = false;

  train::TrainConfig resolve() const {
    train::TrainConfig c = cfg;
    c.input_mode = model::parse_input_mode(mode);
    c.alternation = train::parse_alternation(alternation);
    return c;
  }
};

// Config-error fields named after their command-line flag.
std::string flag_for(const std::string& field) {
  static const std::map<std::string, std::string> renamed{
      {"batch_size", "batch"}, {"input_mode", "mode"}, {"embed_dim", "embed-dim"}};
  auto it = renamed.find(field);
  std::string f = it != renamed.end() ? it->second : field;
  for (auto& ch : f)
    if (ch == '_') ch = '-';
  return "--" + f;
}

std::string config_message(const std::string& what) {
  const auto colon = what.find(':');
  if (colon == std::string::npos) return what;
  const std::string field = what.substr(0, colon);
  if (field.find(' ') != std::string::npos) return what;
  return flag_for(field) + what.substr(colon);
}

void add_config(CLI::App* sub) {
  sub->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  sub->add_option("--config", "key=value file; command-line flags take precedence");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

// The config file becomes `--key=value` arguments placed ahead of the
// command-line flags, so the last occurrence (the command line) wins.
std::vector<std::string> config_args(const CLI::App* sub, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config file '" + path + "'");
  std::vector<std::string> out;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: " + path + ":" + std::to_string(line_no) + ": expected key=value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    for (auto& ch : key)
      if (ch == '_') ch = '-';
    if (value.size() >= 2 && (value.front() == '"' || value.front() == '\'') && value.back() == value.front())
      value = value.substr(1, value.size() - 2);
    if (key == "config") continue;
    if (key.empty() || key.find('-') == 0 || !sub->get_option_no_throw("--" + key))
      throw ConfigError("config: " + path + ":" + std::to_string(line_no) + ": unknown key '" + key + "'");
    out.push_back("--" + key + "=" + value);
  }
  return out;
}

std::vector<std::string> with_config(const CLI::App& app, int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  if (args.empty()) return args;
  const CLI::App* sub = app.get_subcommand_no_throw(args[0]);
  if (!sub) return args;
  std::string path;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (path.empty()) return args;
  auto extra = config_args(sub, path);
  args.insert(args.begin() + 1, extra.begin(), extra.end());
  return args;
}

void add_data_flags(CLI::App* sub, DataFlags& d, bool with_seed) {
  auto& c = d.cfg;
  sub->add_option("--setting", d.setting, "cross-platform | cross-topic")->capture_default_str();
  sub->add_option("--shift-mode", d.shift_mode, "reversed | removed (OOD bias rule)")->capture_default_str();
  if (with_seed) sub->add_option("--seed", c.seed, "generator seed")->capture_default_str();
  sub->add_option("--p-signal", c.p_signal)->capture_default_str();
  sub->add_option("--q-news", c.q_news)->capture_default_str();
  sub->add_option("--q-evid", c.q_evid)->capture_default_str();
  sub->add_option("--n-evidence", c.n_evidence)->capture_default_str();
  sub->add_option("--len-news", c.len_news)->capture_default_str();
  sub->add_option("--len-evid", c.len_evid)->capture_default_str();
  sub->add_option("--n-topics", c.n_topics)->capture_default_str();
  sub->add_option("--n-claim", c.n_claim)->capture_default_str();
  sub->add_option("--n-filler", c.n_filler)->capture_default_str();
  sub->add_option("--ood-topic-fraction", c.ood_topic_fraction)->capture_default_str();
  sub->add_option("--n-train", c.n_train)->capture_default_str();
  sub->add_option("--n-valid", c.n_valid)->capture_default_str();
  sub->add_option("--n-test-id", c.n_test_id)->capture_default_str();
  sub->add_option("--n-test-ood", c.n_test_ood)->capture_default_str();
}

void add_train_flags(CLI::App* sub, TrainFlags& t, bool with_seed) {
  auto& c = t.cfg;
  sub->add_option("--alpha", c.alpha, "news-aspect reversal weight")->capture_default_str();
  sub->add_option("--beta", c.beta, "evidence-aspect reversal weight")->capture_default_str();
  sub->add_option("--lr", c.lr)->capture_default_str();
  sub->add_option("--batch", c.batch_size)->capture_default_str();
  sub->add_option("--max-epochs", c.max_epochs)->capture_default_str();
  sub->add_option("--patience", c.patience)->capture_default_str();
  if (with_seed) sub->add_option("--seed", c.seed, "training seed")->capture_default_str();
  sub->add_option("--mode", t.mode, "news_only | evidence_only | both")->capture_default_str();
  sub->add_option("--alternation", t.alternation, "per_epoch | per_batch")->capture_default_str();
  sub->add_option("--embed-dim", c.model.embed_dim)->capture_default_str();
  sub->add_option("--sent-dim", c.model.sent_dim)->capture_default_str();
  sub->add_option("--attn-hidden", c.model.attn_hidden)->capture_default_str();
  sub->add_option("--disc-hidden", c.model.disc_hidden)->capture_default_str();
  sub->add_option("--classifier-hidden", c.model.classifier_hidden)->capture_default_str();
  sub->add_option("--embed-init", c.model.embed_init)->capture_default_str();
}

corpus::GeneratorConfig resolve(const DataFlags& d) {
  corpus::GeneratorConfig c = d.cfg;
  c.shift_mode = corpus::parse_shift_mode(d.shift_mode);
  c.validate();
  return c;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write " + p.string());
  out << text;
}

// Effective configuration, loadable again through --config.
void echo_config(const CLI::App* sub, const fs::path& dir) {
  fs::create_directories(dir);
  std::string text;
  for (const CLI::Option* opt : sub->get_options()) {
    const std::string name = opt->get_single_name();
    if (name == "help" || name == "config" || opt->get_positional()) continue;
    std::string value = opt->count() ? opt->as<std::string>() : opt->get_default_str();
    if (opt->get_expected_max() == 0) value = opt->as<bool>() ? "true" : "false";
    text += name + "=" + value + "\n";
  }
  write_text(dir / "config", text);
}

corpus::Benchmark load_data(const fs::path& dir) {
  if (!fs::exists(dir / "train.jsonl") || !fs::exists(corpus::meta_path(dir / "train.jsonl")))
    throw InputError("missing dataset: no benchmark under '" + dir.string() + "' (run `gen` first)");
  return corpus::read_benchmark(dir);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!trim(item).empty()) out.push_back(trim(item));
  return out;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  try {
    if (s.find(',') == std::string::npos) {
      const auto n = std::stoull(s);
      for (std::uint64_t i = 1; i <= n; ++i) out.push_back(i);
      if (out.empty()) throw ConfigError("seeds: need at least one seed");
      return out;
    }
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');) out.push_back(std::stoull(item));
  } catch (const std::logic_error&) {
    throw ConfigError("seeds: expected a count N or a comma list, got '" + s + "'");
  }
  return out;
}

int cmd_gen(const CLI::App* sub, const DataFlags& d, const std::string& out) {
  const auto cfg = resolve(d);
  const auto bench = corpus::generate_benchmark(cfg, corpus::parse_setting(d.setting));
  corpus::write_benchmark(bench, out);
  echo_config(sub, out);
  std::cout << "wrote " << corpus::to_string(bench.setting) << " benchmark to " << out << " (hash "
            << corpus::config_hash(bench) << ")\n";
  return 0;
}

int cmd_train(const CLI::App* sub, const TrainFlags& t, const std::string& data, std::string out,
              const std::string& name) {
  const auto cfg = t.resolve();
  cfg.validate();
  const auto bench = load_data(data);
  if (out.empty()) out = (fs::path("runs") / name).string();
  const fs::path dir(out);
  echo_config(sub, dir);
  const auto res = t.baseline ? train::train_supervised(bench, cfg) : train::train(bench, cfg);
  train::save_checkpoint(res.best, dir / "checkpoint");
  train::write_history_csv(res.history, dir / "history.csv");
  std::cout << "best epoch " << res.best.epoch << " valid f1_macro " << fmt(res.best.valid_f1_macro)
            << " f1_micro " << fmt(res.best.valid_f1_micro) << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data, const std::string& split,
             std::string out) {
  if (!fs::exists(ckpt_path)) throw InputError("missing checkpoint '" + ckpt_path + "'");
  const auto ckpt = train::load_checkpoint(ckpt_path);
  const auto bench = load_data(data);
  const auto sc = train::evaluate(bench.split(split), ckpt.params, ckpt.config.input_mode);
  nlohmann::ordered_json j;
  j["split"] = split;
  j["n"] = sc.confusion.total();
  j["f1_macro"] = sc.f1_macro;
  j["f1_micro"] = sc.f1_micro;
  j["tp"] = sc.confusion.tp;
  j["fp"] = sc.confusion.fp;
  j["fn"] = sc.confusion.fn;
  j["tn"] = sc.confusion.tn;
  j["config_hash"] = corpus::config_hash(bench);
  if (out.empty()) out = (fs::path(ckpt_path).parent_path() / ("report." + split + ".json")).string();
  write_text(out, j.dump(2) + "\n");
  std::cout << split << " f1_macro " << fmt(sc.f1_macro) << " f1_micro " << fmt(sc.f1_micro) << "\n";
  return 0;
}

struct ExperimentFlags {
  std::string kind;
  std::string out;
  std::string seeds = "5";
  std::string settings = "cross-platform,cross-topic";
  std::string grid = "0.001,0.01,0.1,1.0";
  int workers = 1;
};

int cmd_experiment(const CLI::App* sub, const ExperimentFlags& e, const DataFlags& d, const TrainFlags& t) {
  harness::ExperimentSpec spec;
  spec.data = resolve(d);
  spec.train = t.resolve();
  spec.seeds = parse_seeds(e.seeds);
  spec.workers = e.workers;
  spec.grid.clear();
  for (const auto& g : split_list(e.grid)) {
    try {
      spec.grid.push_back(std::stod(g));
    } catch (const std::logic_error&) {
      throw ConfigError("grid: not a number: '" + g + "'");
    }
  }
  spec.settings.clear();
  for (const auto& s : split_list(e.settings)) spec.settings.push_back(corpus::parse_setting(s));
  spec.out_dir = e.out.empty() ? fs::path("runs") / e.kind : fs::path(e.out);
  harness::Runner runner(spec);
  echo_config(sub, spec.out_dir);

  for (auto s : spec.settings) {
    const auto dir = spec.out_dir / "data" / corpus::to_string(s);
    if (fs::exists(dir / "train.jsonl")) {
      runner.set_benchmark(corpus::read_benchmark(dir));
    } else {
      auto bench = corpus::generate_benchmark(spec.data, s);
      corpus::write_benchmark(bench, dir);
      runner.set_benchmark(std::move(bench));
    }
  }

  harness::RunReport rep;
  if (e.kind == "pilot") rep = harness::run_pilot(runner);
  else if (e.kind == "main") rep = harness::run_main(runner);
  else if (e.kind == "ablate") rep = harness::run_ablation(runner);
  else rep = harness::run_sensitivity(runner);
  harness::write_report(rep, runner, e.kind);
  std::cout << rep.markdown();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual adversarial debiasing for evidence-aware fake news detection"};
  app.require_subcommand(1);

  DataFlags gen_data;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen", "generate a synthetic benchmark");
  add_config(gen);
  add_data_flags(gen, gen_data, true);
  gen->add_option("--out", gen_out, "output directory")->required();

  TrainFlags tr;
  std::string tr_data, tr_out, tr_name = "run";
  auto* trn = app.add_subcommand("train", "train one detector");
  add_config(trn);
  add_train_flags(trn, tr, true);
  trn->add_flag("--baseline", tr.baseline, "plain supervised training (no discriminators)");
  trn->add_option("--data", tr_data, "benchmark directory")->required();
  trn->add_option("--name", tr_name, "run name under runs/")->capture_default_str();
  trn->add_option("--out", tr_out, "run directory (default runs/<name>)");

  std::string ev_ckpt, ev_data, ev_split = "test_ood", ev_out;
  auto* ev = app.add_subcommand("eval", "score a checkpoint on one split");
  add_config(ev);
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--data", ev_data, "benchmark directory")->required();
  ev->add_option("--split", ev_split)
      ->check(CLI::IsMember({"train", "valid", "test_id", "test_ood"}))
      ->capture_default_str();
  ev->add_option("--out", ev_out, "metrics file (default next to the checkpoint)");

  ExperimentFlags ex;
  DataFlags ex_data;
  TrainFlags ex_train;
  auto* exp = app.add_subcommand("experiment", "pilot | main | ablate | sensitivity");
  add_config(exp);
  exp->add_option("kind", ex.kind)->required()->check(CLI::IsMember({"pilot", "main", "ablate", "sensitivity"}));
  exp->add_option("--out", ex.out, "report directory (default runs/<kind>)");
  exp->add_option("--seeds", ex.seeds, "count N (seeds 1..N) or comma list")->capture_default_str();
  exp->add_option("--settings", ex.settings, "comma list")->capture_default_str();
  exp->add_option("--grid", ex.grid, "comma list of alpha/beta values")->capture_default_str();
  exp->add_option("--workers", ex.workers, "parallel training runs")->capture_default_str();
  exp->add_option("--data-seed", ex_data.cfg.seed, "generator seed")->capture_default_str();
  add_data_flags(exp, ex_data, false);
  add_train_flags(exp, ex_train, false);

  try {
    auto args = with_config(app, argc, argv);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (*gen) return cmd_gen(gen, gen_data, gen_out);
    if (*trn) return cmd_train(trn, tr, tr_data, tr_out, tr_name);
    if (*ev) return cmd_eval(ev_ckpt, ev_data, ev_split, ev_out);
    return cmd_experiment(exp, ex, ex_data, ex_train);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << config_message(e.what()) << "\n";
    return 2;
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 2;
  } catch (const CorruptionError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 2;
  } catch (const ParseError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 2;
  } catch (const NonFiniteLoss& e) {
    std::cerr << "aborted: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

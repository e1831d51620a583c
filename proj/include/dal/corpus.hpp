#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dal/tensor.hpp"

// Synthetic evidence-aware fake-news corpus.
//
// Every instance carries a news token sequence and n_evidence evidence token
// sequences. The label y (1 = true news) is a latent veracity draw. The only
// mechanism that predicts y identically in every split is news/evidence
// stance agreement: the news states a stance token, and each evidence repeats
// that stance when the news is true (and contradicts it when fake), with
// probability p_signal. Neither the news nor a single evidence on its own
// carries any information about y through the stance tokens.
//
// Topic-specific bias tokens plant the spurious news -> label and
// evidence -> label correlations. In the training distribution the bias token
// appears with probability q when y = 1 and 1 - q when y = 0; the shifted
// distribution either reverses that rule or makes the token uninformative.
// The evidence-bias token is drawn once per instance, so an instance's
// evidences all carry it or none does.
namespace dal::corpus {

using Token = std::int32_t;
using Tokens = std::vector<Token>;

inline constexpr Token kPad = 0;

enum class ShiftMode { reversed, removed };
enum class Distribution { train, ood };
enum class Setting { cross_platform, cross_topic };

std::string to_string(ShiftMode m);
std::string to_string(Setting s);
ShiftMode parse_shift_mode(const std::string& s);
Setting parse_setting(const std::string& s);

// Contiguous vocabulary partition. Id 0 is PAD; content ids follow in the
// order claim, stance (SUPPORT, REFUTE), news bias, evidence bias, filler.
struct VocabSpec {
  Token n_claim = 20;
  Token n_bias_news = 8;
  Token n_bias_evid = 8;
  Token n_filler = 200;

  static constexpr Token n_stance = 2;

  Token claim_begin() const { return 1; }
  Token support() const { return claim_begin() + n_claim; }
  Token refute() const { return support() + 1; }
  Token news_bias_begin() const { return refute() + 1; }
  Token evid_bias_begin() const { return news_bias_begin() + n_bias_news; }
  Token filler_begin() const { return evid_bias_begin() + n_bias_evid; }
  Token size() const { return filler_begin() + n_filler; }

  Token claim(Token i) const { return claim_begin() + i; }
  Token news_bias(Token topic) const { return news_bias_begin() + topic; }
  Token evid_bias(Token topic) const { return evid_bias_begin() + topic; }
  Token filler(Token i) const { return filler_begin() + i; }

  bool is_news_bias(Token t) const { return t >= news_bias_begin() && t < evid_bias_begin(); }
  bool is_evid_bias(Token t) const { return t >= evid_bias_begin() && t < filler_begin(); }
  bool is_stance(Token t) const { return t == support() || t == refute(); }

  bool operator==(const VocabSpec&) const = default;
};

struct GeneratorConfig {
  double p_signal = 0.9;
  double q_news = 0.9;
  double q_evid = 0.9;
  ShiftMode shift_mode = ShiftMode::reversed;
  int n_evidence = 10;
  int len_news = 20;
  int len_evid = 30;
  int n_topics = 8;
  int n_claim = 20;
  int n_filler = 200;
  // Share of topics held out for the cross-topic OOD split (at least one).
  double ood_topic_fraction = 0.25;
  int n_train = 2000;
  int n_valid = 500;
  int n_test_id = 1000;
  int n_test_ood = 1000;
  std::uint64_t seed = 1;

  // Throws ConfigError naming the offending field.
  void validate() const;
  VocabSpec vocab() const;

  bool operator==(const GeneratorConfig&) const = default;
};

struct NewsInstance {
  std::string id;
  Tokens news;
  std::vector<Tokens> evidences;
  int label = 0;
  int topic = 0;
  char platform = 'A';

  bool operator==(const NewsInstance&) const = default;
};

using Split = std::vector<NewsInstance>;

// Per-instance bias and shift rule derived from (distribution, setting).
struct BiasRule {
  // Probability the topic's bias token is included given y = 1 / y = 0.
  double news_given_true = 0.5;
  double news_given_fake = 0.5;
  double evid_given_true = 0.5;
  double evid_given_fake = 0.5;
};

BiasRule bias_rule(const GeneratorConfig& cfg, Distribution dist);

// Draw a single instance. `topics` restricts the topic draw (empty = all).
NewsInstance generate_instance(Rng& rng, const GeneratorConfig& cfg, Distribution dist,
                               const std::vector<int>& topics = {});
NewsInstance generate_instance(Rng& rng, const GeneratorConfig& cfg, const BiasRule& rule,
                               const std::vector<int>& topics, char platform);

struct Benchmark {
  GeneratorConfig config;
  Setting setting = Setting::cross_platform;
  std::vector<int> train_topics;
  std::vector<int> ood_topics;
  Split train;
  Split valid;
  Split test_id;
  Split test_ood;

  const Split& split(const std::string& name) const;
};

inline const char* const kSplitNames[] = {"train", "valid", "test_id", "test_ood"};

Benchmark generate_benchmark(const GeneratorConfig& cfg, Setting setting);

// Exact accuracy of majority stance-agreement voting; ties count half.
double bayes_oracle_accuracy(const GeneratorConfig& cfg);
double bayes_oracle_accuracy(double p_signal, int n_evidence);

// JSON Lines I/O. Reading validates token ids against `vocab_size` if given.
void write_dataset(const Split& split, const std::filesystem::path& path);
Split read_dataset(const std::filesystem::path& path, std::optional<Token> vocab_size = std::nullopt);

std::string instance_to_json(const NewsInstance& inst);
NewsInstance instance_from_json(const std::string& line, std::size_t line_no,
                                std::optional<Token> vocab_size = std::nullopt);

// Sidecar metadata (`<stem>.meta.json`) and whole-benchmark directories.
std::filesystem::path meta_path(const std::filesystem::path& dataset_path);
std::string metadata_json(const Benchmark& bench);
void write_benchmark(const Benchmark& bench, const std::filesystem::path& dir);
Benchmark read_benchmark(const std::filesystem::path& dir);

std::string config_to_json(const GeneratorConfig& cfg);
GeneratorConfig config_from_json(const std::string& text);

// FNV-1a 64 over the canonical metadata JSON.
std::string config_hash(const Benchmark& bench);

}  // namespace dal::corpus

#include "dal/corpus.hpp"

#include <algorithm>
#include <cmath>

namespace dal::corpus {

namespace {

constexpr std::uint64_t kSplitStreamBase = 0x5350u;  // "SP"

Rng instance_rng(std::uint64_t seed, std::uint64_t split, std::uint64_t index) {
  return Rng::derive(mix_seed(seed, kSplitStreamBase + split), index);
}

int draw_length(Rng& rng, int max_len) {
  const int lo = std::max(3, (max_len + 1) / 2);
  return lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_len - lo + 1)));
}

// Content tokens first, filler for the rest, then a uniform shuffle.
Tokens compose(Rng& rng, const VocabSpec& vocab, Tokens content, int length) {
  while (static_cast<int>(content.size()) < length)
    content.push_back(vocab.filler(static_cast<Token>(rng.below(static_cast<std::uint64_t>(vocab.n_filler)))));
  rng.shuffle(content);
  return content;
}

}  // namespace

std::string to_string(ShiftMode m) { return m == ShiftMode::reversed ? "reversed" : "removed"; }

std::string to_string(Setting s) {
  return s == Setting::cross_platform ? "cross_platform" : "cross_topic";
}

ShiftMode parse_shift_mode(const std::string& s) {
  if (s == "reversed") return ShiftMode::reversed;
  if (s == "removed") return ShiftMode::removed;
  throw ConfigError("shift_mode: expected reversed|removed, got '" + s + "'");
}

Setting parse_setting(const std::string& s) {
  if (s == "cross_platform" || s == "cross-platform") return Setting::cross_platform;
  if (s == "cross_topic" || s == "cross-topic") return Setting::cross_topic;
  throw ConfigError("setting: expected cross-platform|cross-topic, got '" + s + "'");
}

void GeneratorConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError(field + ": " + why);
  };
  if (!(p_signal > 0.5 && p_signal <= 1.0)) fail("p_signal", "must lie in (0.5, 1]");
  if (!(q_news >= 0.5 && q_news <= 1.0)) fail("q_news", "must lie in [0.5, 1]");
  if (!(q_evid >= 0.5 && q_evid <= 1.0)) fail("q_evid", "must lie in [0.5, 1]");
  if (n_evidence < 1) fail("n_evidence", "must be >= 1");
  if (len_news < 3) fail("len_news", "must be >= 3");
  if (len_evid < 3) fail("len_evid", "must be >= 3");
  if (n_topics < 1) fail("n_topics", "must be >= 1");
  if (n_claim < n_topics) fail("n_claim", "must be >= n_topics (every topic needs a claim)");
  if (n_filler < 1) fail("n_filler", "must be >= 1");
  if (!(ood_topic_fraction > 0.0 && ood_topic_fraction < 1.0))
    fail("ood_topic_fraction", "must lie in (0, 1)");
  if (n_train < 1) fail("n_train", "must be >= 1");
  if (n_valid < 1) fail("n_valid", "must be >= 1");
  if (n_test_id < 1) fail("n_test_id", "must be >= 1");
  if (n_test_ood < 1) fail("n_test_ood", "must be >= 1");
}

VocabSpec GeneratorConfig::vocab() const {
  VocabSpec v;
  v.n_claim = n_claim;
  v.n_bias_news = n_topics;
  v.n_bias_evid = n_topics;
  v.n_filler = n_filler;
  return v;
}

BiasRule bias_rule(const GeneratorConfig& cfg, Distribution dist) {
  BiasRule r;
  if (dist == Distribution::train) {
    r = {cfg.q_news, 1.0 - cfg.q_news, cfg.q_evid, 1.0 - cfg.q_evid};
  } else if (cfg.shift_mode == ShiftMode::reversed) {
    r = {1.0 - cfg.q_news, cfg.q_news, 1.0 - cfg.q_evid, cfg.q_evid};
  }
  return r;
}

NewsInstance generate_instance(Rng& rng, const GeneratorConfig& cfg, Distribution dist,
                               const std::vector<int>& topics) {
  return generate_instance(rng, cfg, bias_rule(cfg, dist), topics,
                           dist == Distribution::train ? 'A' : 'B');
}

NewsInstance generate_instance(Rng& rng, const GeneratorConfig& cfg, const BiasRule& rule,
                               const std::vector<int>& topics, char platform) {
  const VocabSpec vocab = cfg.vocab();
  NewsInstance inst;
  inst.platform = platform;

  const int y = rng.bernoulli(0.5) ? 1 : 0;
  inst.label = y;
  inst.topic = topics.empty() ? static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.n_topics)))
                              : topics[rng.below(topics.size())];

  // Claims are assigned to topics round-robin: claim c belongs to c mod n_topics.
  const int claims_in_topic = (cfg.n_claim - inst.topic + cfg.n_topics - 1) / cfg.n_topics;
  const Token claim = vocab.claim(static_cast<Token>(
      inst.topic + cfg.n_topics * static_cast<int>(rng.below(static_cast<std::uint64_t>(claims_in_topic)))));

  const bool news_supports = rng.bernoulli(0.5);
  const Token news_stance = news_supports ? vocab.support() : vocab.refute();
  const Token other_stance = news_supports ? vocab.refute() : vocab.support();

  Tokens news_content{claim, news_stance};
  if (rng.bernoulli(y ? rule.news_given_true : rule.news_given_fake))
    news_content.push_back(vocab.news_bias(static_cast<Token>(inst.topic)));
  inst.news = compose(rng, vocab, std::move(news_content), draw_length(rng, cfg.len_news));

  inst.evidences.reserve(static_cast<std::size_t>(cfg.n_evidence));
  // One source-level draw per instance: every evidence carries the bias
  // token or none does.
  const bool evid_bias = rng.bernoulli(y ? rule.evid_given_true : rule.evid_given_fake);
  for (int j = 0; j < cfg.n_evidence; ++j) {
    const bool agrees = (y == 1) == rng.bernoulli(cfg.p_signal);
    Tokens content{claim, agrees ? news_stance : other_stance};
    if (evid_bias)
      content.push_back(vocab.evid_bias(static_cast<Token>(inst.topic)));
    inst.evidences.push_back(compose(rng, vocab, std::move(content), draw_length(rng, cfg.len_evid)));
  }
  return inst;
}

const Split& Benchmark::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "valid") return valid;
  if (name == "test_id") return test_id;
  if (name == "test_ood") return test_ood;
  throw ValidationError("unknown split '" + name + "'");
}

Benchmark generate_benchmark(const GeneratorConfig& cfg, Setting setting) {
  cfg.validate();
  Benchmark bench;
  bench.config = cfg;
  bench.setting = setting;

  if (setting == Setting::cross_topic) {
    if (cfg.n_topics < 2) throw ConfigError("n_topics: cross_topic needs at least 2 topics");
    const int n_ood = std::clamp(static_cast<int>(std::lround(cfg.n_topics * cfg.ood_topic_fraction)), 1,
                                 cfg.n_topics - 1);
    for (int t = 0; t < cfg.n_topics; ++t)
      (t < cfg.n_topics - n_ood ? bench.train_topics : bench.ood_topics).push_back(t);
  } else {
    for (int t = 0; t < cfg.n_topics; ++t) {
      bench.train_topics.push_back(t);
      bench.ood_topics.push_back(t);
    }
  }

  const BiasRule train_rule = bias_rule(cfg, Distribution::train);
  // Held-out topics never carried a planted bias, so their tokens are noise.
  const BiasRule ood_rule =
      setting == Setting::cross_topic ? BiasRule{} : bias_rule(cfg, Distribution::ood);
  const char ood_platform = setting == Setting::cross_platform ? 'B' : 'A';

  auto fill = [&](Split& out, std::uint64_t split_id, int n, const BiasRule& rule,
                  const std::vector<int>& topics, char platform, const char* prefix) {
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      Rng rng = instance_rng(cfg.seed, split_id, static_cast<std::uint64_t>(i));
      NewsInstance inst = generate_instance(rng, cfg, rule, topics, platform);
      inst.id = std::string(prefix) + "-" + std::to_string(i);
      out.push_back(std::move(inst));
    }
  };
  fill(bench.train, 0, cfg.n_train, train_rule, bench.train_topics, 'A', "train");
  fill(bench.valid, 1, cfg.n_valid, train_rule, bench.train_topics, 'A', "valid");
  fill(bench.test_id, 2, cfg.n_test_id, train_rule, bench.train_topics, 'A', "test_id");
  fill(bench.test_ood, 3, cfg.n_test_ood, ood_rule, bench.ood_topics, ood_platform, "test_ood");
  return bench;
}

double bayes_oracle_accuracy(double p_signal, int n_evidence) {
  // P(k of n evidences agree with the truth), k ~ Binomial(n, p).
  double acc = 0.0;
  double binom = 1.0;
  for (int k = 0; k <= n_evidence; ++k) {
    if (k > 0) binom = binom * (n_evidence - k + 1) / k;
    const double pmf = binom * std::pow(p_signal, k) * std::pow(1.0 - p_signal, n_evidence - k);
    if (2 * k > n_evidence)
      acc += pmf;
    else if (2 * k == n_evidence)
      acc += 0.5 * pmf;
  }
  return acc;
}

double bayes_oracle_accuracy(const GeneratorConfig& cfg) {
  cfg.validate();
  return bayes_oracle_accuracy(cfg.p_signal, cfg.n_evidence);
}

}  // namespace dal::corpus

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dal/autodiff.hpp"
#include "dal/corpus.hpp"

// Evidence-aware detector and its two debiasing discriminators.
//
//   encoder      embedding lookup                         (feature group)
//   news pooling mean over content rows -> linear -> tanh (sentence group)
//   word level   claim-aware attention over evidence words (word group)
//   sentence     scaled dot-product attention of the news over evidences,
//                classifier MLP on [s_n, context]          (sentence group)
//   news disc    MLP on the mean word embedding of the news (news group)
//   evid disc    MLP on each evidence's mean embedding, probabilities
//                averaged over evidences                   (evidence group)
namespace dal::model {

using ad::Var;
using corpus::NewsInstance;
using corpus::Token;
using corpus::Tokens;

enum class Group : int { feature = 0, word = 1, sentence = 2, news_disc = 3, evid_disc = 4 };
inline constexpr int kGroupCount = 5;
inline constexpr std::array<Group, 3> kMainGroups{Group::feature, Group::word, Group::sentence};
inline constexpr std::array<Group, 2> kDiscGroups{Group::news_disc, Group::evid_disc};

std::string to_string(Group g);
Group parse_group(const std::string& s);

enum class InputMode { news_only, evidence_only, both };
std::string to_string(InputMode m);
InputMode parse_input_mode(const std::string& s);

struct ModelConfig {
  Token vocab_size = 0;
  Index embed_dim = 32;       // d_w
  Index sent_dim = 32;        // d_s
  Index attn_hidden = 32;
  Index disc_hidden = 32;
  Index classifier_hidden = 64;
  double embed_init = 0.5;    // uniform(-a, a) for the embedding table

  bool operator==(const ModelConfig&) const = default;
};

struct Parameter {
  Group group;
  std::string name;
  Var var;
};

// All trainable tensors, partitioned into five disjoint groups. Freezing a
// group clears requires_grad on its leaves, so graphs built afterwards never
// route gradient into it.
class ParamSet {
 public:
  ParamSet() = default;
  ParamSet(const ModelConfig& config, Rng& rng);

  const ModelConfig& config() const { return config_; }
  const std::vector<Parameter>& parameters() const { return params_; }

  const Var& get(const std::string& name) const;
  std::vector<Var> group(Group g) const;

  void set_frozen(Group g, bool frozen);
  bool frozen(Group g) const { return frozen_[static_cast<int>(g)]; }

  void zero_grad() const;
  ParamSet clone() const;  // deep copy of values; grads reset to zero

  // Byte-level FNV-1a digest of the listed groups' values.
  std::uint64_t digest(std::span<const Group> groups) const;

  // Used by checkpoint loading; appends in construction order.
  void add(Group g, std::string name, Tensor value);
  void set_config(const ModelConfig& c) { config_ = c; }

 private:
  ModelConfig config_;
  std::vector<Parameter> params_;
  std::array<bool, kGroupCount> frozen_{};
};

// Encoder output for every vocabulary entry: [V, d_w].
Var word_table(const ParamSet& params);

// Forward-pass scratch shared by instances in one graph. Caches the encoder
// table and its projection through the word-attention key weights so each
// batch computes them once.
class ForwardCache {
 public:
  explicit ForwardCache(const ParamSet& params) : params_(params) {}
  const Var& words();
  const Var& key_table();

 private:
  const ParamSet& params_;
  Var words_;
  Var key_table_;
};

// Indices of non-PAD tokens; validates ids against the vocabulary.
std::vector<Index> content_positions(const Tokens& tokens, Token vocab_size);

Var encode(const Tokens& tokens, const ParamSet& params);
Var pool_news(const Var& word_embs, const Tokens& tokens, const ParamSet& params);

struct WordInteraction {
  Var evidence_emb;  // [d_s] or [m, d_s]
  Var word_weights;  // [N], softmax within each evidence
};

// Claim-aware attention for one evidence; PAD rows are excluded.
WordInteraction word_interact(const Var& news_emb, const Var& word_embs, const Tokens& tokens,
                              const ParamSet& params);

struct SentenceInteraction {
  Var probs;             // [2]
  Var evidence_weights;  // [m]
  Var context;           // [d_s]
  Var logits;            // [2], pre-softmax
};

SentenceInteraction sent_interact(const Var& news_emb, const Var& evidence_embs, const ParamSet& params);
SentenceInteraction sent_interact(const Var& news_emb, std::span<const Var> evidence_embs,
                                  const ParamSet& params);

struct MainOutput {
  Var probs;
  Var evidence_weights;  // null in news_only mode
  Var word_weights;      // null in news_only mode
  Var logits;
};

MainOutput forward_main_traced(const NewsInstance& inst, const ParamSet& params, InputMode mode,
                               ForwardCache* cache = nullptr);
Var forward_main(const NewsInstance& inst, const ParamSet& params, InputMode mode,
                 ForwardCache* cache = nullptr);
// Pre-softmax scores: news [2]; evidence [m, 2], one row per evidence.
Var news_disc_logits(const NewsInstance& inst, const ParamSet& params, ForwardCache* cache = nullptr);
Var evid_disc_logits(const NewsInstance& inst, const ParamSet& params, ForwardCache* cache = nullptr);
Var forward_news_disc(const NewsInstance& inst, const ParamSet& params, ForwardCache* cache = nullptr);
Var forward_evid_disc(const NewsInstance& inst, const ParamSet& params, ForwardCache* cache = nullptr);

// Argmax of forward_main (ties -> class 0). Pass a frozen clone to avoid
// recording backward closures.
int predict(const NewsInstance& inst, const ParamSet& params, InputMode mode);

}  // namespace dal::model

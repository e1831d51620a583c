#include "dal/model.hpp"

#include <algorithm>
#include <cmath>

#include "dal/metrics.hpp"

namespace dal::model {

namespace {

Var linear(const Var& x, const Var& w, const Var& b) {
  if (x->value.rank() == 1) {
    const Var y = ad::matmul(ad::reshape(x, {1, x->value.numel()}), w);
    return ad::add(ad::reshape(y, {w->value.cols()}), b);
  }
  return ad::add_row(ad::matmul(x, w), b);
}

// Flattened content tokens of all evidences with segment offsets.
struct EvidenceLayout {
  std::vector<Index> ids;
  std::vector<Index> offsets{0};
};

EvidenceLayout layout_evidences(const std::vector<Tokens>& evidences, Token vocab_size) {
  if (evidences.empty()) throw ValidationError("instance has no evidences");
  EvidenceLayout layout;
  for (const auto& e : evidences) {
    const auto positions = content_positions(e, vocab_size);
    for (Index p : positions) layout.ids.push_back(e[static_cast<std::size_t>(p)]);
    layout.offsets.push_back(static_cast<Index>(layout.ids.size()));
  }
  return layout;
}

std::vector<Index> content_ids(const Tokens& tokens, Token vocab_size) {
  std::vector<Index> ids;
  for (Index p : content_positions(tokens, vocab_size)) ids.push_back(tokens[static_cast<std::size_t>(p)]);
  return ids;
}

// Claim-aware attention over the words of one or more evidences.
WordInteraction interact_words(const Var& news_emb, const Var& rows, const Var& keys,
                               std::span<const Index> offsets, const ParamSet& params) {
  const Var query = linear(news_emb, params.get("attn_query"), params.get("attn_bias"));
  const Var hidden = ad::tanh(ad::add_row(keys, query));
  const Var scores = ad::reshape(ad::matmul(hidden, params.get("attn_score")), {rows->value.rows()});
  const Var weights = ad::segment_softmax(scores, offsets);
  const Var pooled = ad::segment_weighted_sum(weights, rows, offsets);
  const Var emb = ad::tanh(linear(pooled, params.get("evid_proj"), params.get("evid_proj_bias")));
  return {emb, weights};
}

Var classify(const Var& news_emb, const Var& context, const ParamSet& params) {
  const std::array<Var, 2> parts{news_emb, context};
  const Var x = ad::concat(parts);
  const Var h = ad::tanh(linear(x, params.get("cls_hidden"), params.get("cls_hidden_bias")));
  return linear(h, params.get("cls_out"), params.get("cls_out_bias"));
}

Var disc_mlp(const Var& features, const ParamSet& params, const std::string& prefix) {
  const Var h = ad::tanh(linear(features, params.get(prefix + "_hidden"), params.get(prefix + "_hidden_bias")));
  return linear(h, params.get(prefix + "_out"), params.get(prefix + "_out_bias"));
}

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::string to_string(Group g) {
  switch (g) {
    case Group::feature: return "theta_f";
    case Group::word: return "theta_w";
    case Group::sentence: return "theta_s";
    case Group::news_disc: return "theta_n";
    case Group::evid_disc: return "theta_e";
  }
  return "?";
}

Group parse_group(const std::string& s) {
  for (int i = 0; i < kGroupCount; ++i)
    if (to_string(static_cast<Group>(i)) == s) return static_cast<Group>(i);
  throw FormatError("unknown parameter group '" + s + "'");
}

std::string to_string(InputMode m) {
  switch (m) {
    case InputMode::news_only: return "news_only";
    case InputMode::evidence_only: return "evidence_only";
    case InputMode::both: return "both";
  }
  return "?";
}

InputMode parse_input_mode(const std::string& s) {
  if (s == "news_only" || s == "news") return InputMode::news_only;
  if (s == "evidence_only" || s == "evidence") return InputMode::evidence_only;
  if (s == "both") return InputMode::both;
  throw ConfigError("mode: expected news_only|evidence_only|both, got '" + s + "'");
}

ParamSet::ParamSet(const ModelConfig& c, Rng& rng) : config_(c) {
  if (c.vocab_size < 1) throw ConfigError("vocab_size must be >= 1");
  const Index dw = c.embed_dim, ds = c.sent_dim, ha = c.attn_hidden, hd = c.disc_hidden,
              hc = c.classifier_hidden;
  auto make = [&](Group g, const char* name, Shape shape, Init init) {
    add(g, name, tensor_init(shape, init, rng));
  };
  make(Group::feature, "embedding", {c.vocab_size, dw}, Init::uniform(c.embed_init));

  make(Group::word, "attn_query", {ds, ha}, Init::xavier());
  make(Group::word, "attn_key", {dw, ha}, Init::xavier());
  make(Group::word, "attn_bias", {ha}, Init::zeros());
  make(Group::word, "attn_score", {ha, 1}, Init::xavier());
  make(Group::word, "evid_proj", {dw, ds}, Init::xavier());
  make(Group::word, "evid_proj_bias", {ds}, Init::zeros());

  make(Group::sentence, "news_proj", {dw, ds}, Init::xavier());
  make(Group::sentence, "news_proj_bias", {ds}, Init::zeros());
  make(Group::sentence, "sent_query", {ds, ds}, Init::xavier());
  make(Group::sentence, "evidence_only_query", {ds}, Init::uniform(0.1));
  make(Group::sentence, "cls_hidden", {2 * ds, hc}, Init::xavier());
  make(Group::sentence, "cls_hidden_bias", {hc}, Init::zeros());
  make(Group::sentence, "cls_out", {hc, 2}, Init::xavier());
  make(Group::sentence, "cls_out_bias", {2}, Init::zeros());

  for (auto [g, prefix] : {std::pair{Group::news_disc, "news_disc"}, std::pair{Group::evid_disc, "evid_disc"}}) {
    const std::string p = prefix;
    make(g, (p + "_hidden").c_str(), {dw, hd}, Init::xavier());
    make(g, (p + "_hidden_bias").c_str(), {hd}, Init::zeros());
    make(g, (p + "_out").c_str(), {hd, 2}, Init::xavier());
    make(g, (p + "_out_bias").c_str(), {2}, Init::zeros());
  }
}

void ParamSet::add(Group g, std::string name, Tensor value) {
  for (const auto& p : params_)
    if (p.name == name) throw ValidationError("duplicate parameter '" + name + "'");
  params_.push_back({g, std::move(name), ad::parameter(std::move(value), !frozen(g))});
}

const Var& ParamSet::get(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p.var;
  throw ValidationError("unknown parameter '" + name + "'");
}

std::vector<Var> ParamSet::group(Group g) const {
  std::vector<Var> out;
  for (const auto& p : params_)
    if (p.group == g) out.push_back(p.var);
  return out;
}

void ParamSet::set_frozen(Group g, bool frozen) {
  frozen_[static_cast<int>(g)] = frozen;
  for (const auto& p : params_)
    if (p.group == g) ad::set_requires_grad(p.var, !frozen);
}

void ParamSet::zero_grad() const {
  for (const auto& p : params_) ad::zero_grad(p.var);
}

ParamSet ParamSet::clone() const {
  ParamSet out;
  out.config_ = config_;
  out.frozen_ = frozen_;
  for (const auto& p : params_) out.params_.push_back({p.group, p.name, ad::parameter(p.var->value, p.var->requires_grad)});
  return out;
}

std::uint64_t ParamSet::digest(std::span<const Group> groups) const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : params_) {
    if (std::find(groups.begin(), groups.end(), p.group) == groups.end()) continue;
    h = fnv1a(h, p.name.data(), p.name.size());
    h = fnv1a(h, p.var->value.data(), static_cast<std::size_t>(p.var->value.numel()) * sizeof(double));
  }
  return h;
}

Var word_table(const ParamSet& params) {
  return params.get("embedding");
}

const Var& ForwardCache::words() {
  if (!words_) words_ = word_table(params_);
  return words_;
}

const Var& ForwardCache::key_table() {
  if (!key_table_) key_table_ = ad::matmul(words(), params_.get("attn_key"));
  return key_table_;
}

std::vector<Index> content_positions(const Tokens& tokens, Token vocab_size) {
  std::vector<Index> out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const Token t = tokens[i];
    if (t < 0 || t >= vocab_size)
      throw ValidationError("token id " + std::to_string(t) + " outside vocabulary of size " +
                            std::to_string(vocab_size));
    if (t != corpus::kPad) out.push_back(static_cast<Index>(i));
  }
  return out;
}

Var encode(const Tokens& tokens, const ParamSet& params) {
  if (tokens.empty()) throw ValidationError("encode: empty token sequence");
  content_positions(tokens, params.config().vocab_size);
  std::vector<Index> ids(tokens.begin(), tokens.end());
  return ad::gather_rows(word_table(params), ids);
}

Var pool_news(const Var& word_embs, const Tokens& tokens, const ParamSet& params) {
  const auto positions = content_positions(tokens, params.config().vocab_size);
  if (positions.empty()) throw ValidationError("pool_news: news has no non-PAD tokens");
  const Var mean = ad::mean_axis(ad::gather_rows(word_embs, positions));
  return ad::tanh(linear(mean, params.get("news_proj"), params.get("news_proj_bias")));
}

WordInteraction word_interact(const Var& news_emb, const Var& word_embs, const Tokens& tokens,
                              const ParamSet& params) {
  const auto positions = content_positions(tokens, params.config().vocab_size);
  if (positions.empty()) throw ValidationError("word_interact: evidence has no non-PAD tokens");
  const Var rows = ad::gather_rows(word_embs, positions);
  const Var keys = ad::matmul(rows, params.get("attn_key"));
  const std::array<Index, 2> offsets{0, static_cast<Index>(positions.size())};
  auto out = interact_words(news_emb, rows, keys, offsets, params);
  out.evidence_emb = ad::reshape(out.evidence_emb, {params.config().sent_dim});
  return out;
}

SentenceInteraction sent_interact(const Var& news_emb, const Var& evidence_embs, const ParamSet& params) {
  const Index d = params.config().sent_dim;
  const Index m = evidence_embs->value.rows();
  if (evidence_embs->value.rank() != 2 || m < 1) throw ValidationError("sent_interact: no evidence embeddings");
  const Var query = ad::reshape(ad::matmul(ad::reshape(news_emb, {1, d}), params.get("sent_query")), {d, 1});
  const Var scores = ad::scale(ad::reshape(ad::matmul(evidence_embs, query), {m}), 1.0 / std::sqrt(double(d)));
  const Var weights = ad::softmax(scores);
  const Var context = ad::reshape(ad::matmul(ad::reshape(weights, {1, m}), evidence_embs), {d});
  const Var logits = classify(news_emb, context, params);
  return {ad::softmax(logits), weights, context, logits};
}

SentenceInteraction sent_interact(const Var& news_emb, std::span<const Var> evidence_embs,
                                  const ParamSet& params) {
  if (evidence_embs.empty()) throw ValidationError("sent_interact: empty evidence set");
  return sent_interact(news_emb, ad::stack_rows(evidence_embs), params);
}

MainOutput forward_main_traced(const NewsInstance& inst, const ParamSet& params, InputMode mode,
                               ForwardCache* cache) {
  const auto& cfg = params.config();
  const Var table = cache ? cache->words() : word_table(params);

  Var news_emb;
  if (mode == InputMode::evidence_only) {
    news_emb = params.get("evidence_only_query");
  } else {
    const auto ids = content_ids(inst.news, cfg.vocab_size);
    if (ids.empty()) throw ValidationError("instance " + inst.id + ": news has no content tokens");
    const Var mean = ad::mean_axis(ad::gather_rows(table, ids));
    news_emb = ad::tanh(linear(mean, params.get("news_proj"), params.get("news_proj_bias")));
  }

  if (mode == InputMode::news_only) {
    const Var zeros = ad::constant(Tensor(Shape{cfg.sent_dim}));
    const Var logits = classify(news_emb, zeros, params);
    return {ad::softmax(logits), nullptr, nullptr, logits};
  }

  const auto layout = layout_evidences(inst.evidences, cfg.vocab_size);
  for (std::size_t s = 0; s + 1 < layout.offsets.size(); ++s)
    if (layout.offsets[s + 1] == layout.offsets[s])
      throw ValidationError("instance " + inst.id + ": evidence " + std::to_string(s) + " is all PAD");
  const Var rows = ad::gather_rows(table, layout.ids);
  const Var keys = cache ? ad::gather_rows(cache->key_table(), layout.ids)
                         : ad::matmul(rows, params.get("attn_key"));
  const auto words = interact_words(news_emb, rows, keys, layout.offsets, params);
  const auto sent = sent_interact(news_emb, words.evidence_emb, params);
  return {sent.probs, sent.evidence_weights, words.word_weights, sent.logits};
}

Var forward_main(const NewsInstance& inst, const ParamSet& params, InputMode mode, ForwardCache* cache) {
  return forward_main_traced(inst, params, mode, cache).probs;
}

Var news_disc_logits(const NewsInstance& inst, const ParamSet& params, ForwardCache* cache) {
  const auto ids = content_ids(inst.news, params.config().vocab_size);
  if (ids.empty()) throw ValidationError("instance " + inst.id + ": news has no content tokens");
  const Var features = ad::mean_axis(ad::gather_rows(cache ? cache->words() : word_table(params), ids));
  return disc_mlp(features, params, "news_disc");
}

Var forward_news_disc(const NewsInstance& inst, const ParamSet& params, ForwardCache* cache) {
  return ad::softmax(news_disc_logits(inst, params, cache));
}

Var evid_disc_logits(const NewsInstance& inst, const ParamSet& params, ForwardCache* cache) {
  const auto layout = layout_evidences(inst.evidences, params.config().vocab_size);
  for (std::size_t s = 0; s + 1 < layout.offsets.size(); ++s)
    if (layout.offsets[s + 1] == layout.offsets[s])
      throw ValidationError("instance " + inst.id + ": evidence " + std::to_string(s) + " is all PAD");
  const Var rows = ad::gather_rows(cache ? cache->words() : word_table(params), layout.ids);
  const Var features = ad::segment_mean(rows, layout.offsets);
  return disc_mlp(features, params, "evid_disc");
}

Var forward_evid_disc(const NewsInstance& inst, const ParamSet& params, ForwardCache* cache) {
  // Average of per-evidence probability vectors, not of logits.
  return ad::mean_axis(ad::row_softmax(evid_disc_logits(inst, params, cache)));
}

int predict(const NewsInstance& inst, const ParamSet& params, InputMode mode) {
  const Var probs = forward_main(inst, params, mode);
  return metrics::argmax_prediction(probs->value[0], probs->value[1]);
}

}  // namespace dal::model

#include <fstream>
#include <sstream>

#include "dal/corpus.hpp"
#include "json.hpp"

namespace dal::corpus {

namespace {

using ojson = nlohmann::ordered_json;

const ojson& field(const ojson& obj, const char* name, std::size_t line_no) {
  auto it = obj.find(name);
  if (it == obj.end()) throw ParseError(std::string("missing field '") + name + "'", line_no);
  return *it;
}

Tokens parse_tokens(const ojson& arr, const char* what, std::size_t line_no,
                    std::optional<Token> vocab_size) {
  if (!arr.is_array()) throw ParseError(std::string("field '") + what + "' must be an array", line_no);
  Tokens out;
  out.reserve(arr.size());
  for (const auto& v : arr) {
    if (!v.is_number_integer())
      throw ParseError(std::string("field '") + what + "' must hold integers", line_no);
    const auto t = v.get<std::int64_t>();
    if (t < 0) throw ValidationError("line " + std::to_string(line_no) + ": negative token id");
    if (vocab_size && t >= *vocab_size)
      throw ValidationError("line " + std::to_string(line_no) + ": token id " + std::to_string(t) +
                            " >= vocabulary size " + std::to_string(*vocab_size));
    out.push_back(static_cast<Token>(t));
  }
  return out;
}

ojson config_json(const GeneratorConfig& c) {
  ojson j;
  j["p_signal"] = c.p_signal;
  j["q_news"] = c.q_news;
  j["q_evid"] = c.q_evid;
  j["shift_mode"] = to_string(c.shift_mode);
  j["n_evidence"] = c.n_evidence;
  j["len_news"] = c.len_news;
  j["len_evid"] = c.len_evid;
  j["n_topics"] = c.n_topics;
  j["n_claim"] = c.n_claim;
  j["n_filler"] = c.n_filler;
  j["ood_topic_fraction"] = c.ood_topic_fraction;
  j["n_train"] = c.n_train;
  j["n_valid"] = c.n_valid;
  j["n_test_id"] = c.n_test_id;
  j["n_test_ood"] = c.n_test_ood;
  j["seed"] = c.seed;
  return j;
}

GeneratorConfig config_from(const ojson& j) {
  GeneratorConfig c;
  try {
    c.p_signal = j.at("p_signal").get<double>();
    c.q_news = j.at("q_news").get<double>();
    c.q_evid = j.at("q_evid").get<double>();
    c.shift_mode = parse_shift_mode(j.at("shift_mode").get<std::string>());
    c.n_evidence = j.at("n_evidence").get<int>();
    c.len_news = j.at("len_news").get<int>();
    c.len_evid = j.at("len_evid").get<int>();
    c.n_topics = j.at("n_topics").get<int>();
    c.n_claim = j.at("n_claim").get<int>();
    c.n_filler = j.at("n_filler").get<int>();
    c.ood_topic_fraction = j.at("ood_topic_fraction").get<double>();
    c.n_train = j.at("n_train").get<int>();
    c.n_valid = j.at("n_valid").get<int>();
    c.n_test_id = j.at("n_test_id").get<int>();
    c.n_test_ood = j.at("n_test_ood").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("generator config: ") + e.what());
  }
  return c;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << text;
  if (!out) throw ValidationError("write failed for " + path.string());
}

}  // namespace

std::string instance_to_json(const NewsInstance& inst) {
  ojson j;
  j["id"] = inst.id;
  j["news"] = inst.news;
  j["evidences"] = inst.evidences;
  j["label"] = inst.label;
  j["topic"] = inst.topic;
  j["platform"] = std::string(1, inst.platform);
  return j.dump();
}

NewsInstance instance_from_json(const std::string& line, std::size_t line_no,
                                std::optional<Token> vocab_size) {
  ojson j;
  try {
    j = ojson::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("malformed JSON: ") + e.what(), line_no);
  }
  if (!j.is_object()) throw ParseError("expected a JSON object", line_no);

  NewsInstance inst;
  const auto& id = field(j, "id", line_no);
  if (!id.is_string()) throw ParseError("field 'id' must be a string", line_no);
  inst.id = id.get<std::string>();
  inst.news = parse_tokens(field(j, "news", line_no), "news", line_no, vocab_size);
  const auto& evid = field(j, "evidences", line_no);
  if (!evid.is_array()) throw ParseError("field 'evidences' must be an array", line_no);
  for (const auto& e : evid) inst.evidences.push_back(parse_tokens(e, "evidences", line_no, vocab_size));

  const auto& label = field(j, "label", line_no);
  if (!label.is_number_integer() || (label.get<int>() != 0 && label.get<int>() != 1))
    throw ParseError("field 'label' must be 0 or 1", line_no);
  inst.label = label.get<int>();
  const auto& topic = field(j, "topic", line_no);
  if (!topic.is_number_integer()) throw ParseError("field 'topic' must be an integer", line_no);
  inst.topic = topic.get<int>();
  const auto& platform = field(j, "platform", line_no);
  if (!platform.is_string() || (platform != "A" && platform != "B"))
    throw ParseError("field 'platform' must be \"A\" or \"B\"", line_no);
  inst.platform = platform.get<std::string>()[0];
  return inst;
}

void write_dataset(const Split& split, const std::filesystem::path& path) {
  std::string text;
  for (const auto& inst : split) {
    text += instance_to_json(inst);
    text += '\n';
  }
  write_file(path, text);
}

Split read_dataset(const std::filesystem::path& path, std::optional<Token> vocab_size) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open dataset " + path.string());
  Split out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(instance_from_json(line, line_no, vocab_size));
  }
  return out;
}

std::filesystem::path meta_path(const std::filesystem::path& dataset_path) {
  auto p = dataset_path;
  p.replace_extension(".meta.json");
  return p;
}

std::string config_to_json(const GeneratorConfig& cfg) { return config_json(cfg).dump(2); }

GeneratorConfig config_from_json(const std::string& text) {
  try {
    return config_from(ojson::parse(text));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("generator config: ") + e.what());
  }
}

std::string metadata_json(const Benchmark& bench) {
  const VocabSpec v = bench.config.vocab();
  ojson j;
  j["generator"] = config_json(bench.config);
  j["setting"] = to_string(bench.setting);
  j["rng"] = Rng::algorithm;
  ojson vocab;
  vocab["size"] = v.size();
  vocab["pad"] = kPad;
  vocab["claim"] = {v.claim_begin(), v.support()};
  vocab["stance"] = {v.support(), v.news_bias_begin()};
  vocab["news_bias"] = {v.news_bias_begin(), v.evid_bias_begin()};
  vocab["evid_bias"] = {v.evid_bias_begin(), v.filler_begin()};
  vocab["filler"] = {v.filler_begin(), v.size()};
  j["vocab"] = vocab;
  j["train_topics"] = bench.train_topics;
  j["ood_topics"] = bench.ood_topics;
  return j.dump(2) + "\n";
}

void write_benchmark(const Benchmark& bench, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::string meta = metadata_json(bench);
  for (const char* name : kSplitNames) {
    const auto path = dir / (std::string(name) + ".jsonl");
    write_dataset(bench.split(name), path);
    write_file(meta_path(path), meta);
  }
}

Benchmark read_benchmark(const std::filesystem::path& dir) {
  const auto train_path = dir / "train.jsonl";
  ojson meta;
  try {
    meta = ojson::parse(read_file(meta_path(train_path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("benchmark metadata: ") + e.what());
  }
  Benchmark bench;
  bench.config = config_from(meta.at("generator"));
  bench.setting = parse_setting(meta.at("setting").get<std::string>());
  bench.train_topics = meta.at("train_topics").get<std::vector<int>>();
  bench.ood_topics = meta.at("ood_topics").get<std::vector<int>>();
  const Token vocab_size = bench.config.vocab().size();
  bench.train = read_dataset(train_path, vocab_size);
  bench.valid = read_dataset(dir / "valid.jsonl", vocab_size);
  bench.test_id = read_dataset(dir / "test_id.jsonl", vocab_size);
  bench.test_ood = read_dataset(dir / "test_ood.jsonl", vocab_size);
  return bench;
}

std::string config_hash(const Benchmark& bench) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : metadata_json(bench)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace dal::corpus

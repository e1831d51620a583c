#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "dal/trainer.hpp"
#include "json.hpp"

namespace dal::train {

namespace {

using ojson = nlohmann::ordered_json;

constexpr char kMagic[8] = {'D', 'A', 'L', 'C', 'K', 'P', 'T', '1'};

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
void put(std::string& out, T value) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(value);
    std::reverse(bytes.begin(), bytes.end());
    out.append(bytes.data(), sizeof(T));
  } else {
    char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    out.append(bytes, sizeof(T));
  }
}

void put_string(std::string& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    std::array<char, sizeof(T)> raw;
    std::memcpy(raw.data(), bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
    pos_ += sizeof(T);
    return std::bit_cast<T>(raw);
  }

  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::string rest(std::uint64_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (bytes_.size() - pos_ < n) throw CorruptionError("checkpoint truncated at byte " + std::to_string(pos_));
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

ojson model_json(const model::ModelConfig& m) {
  ojson j;
  j["vocab_size"] = m.vocab_size;
  j["embed_dim"] = m.embed_dim;
  j["sent_dim"] = m.sent_dim;
  j["attn_hidden"] = m.attn_hidden;
  j["disc_hidden"] = m.disc_hidden;
  j["classifier_hidden"] = m.classifier_hidden;
  j["embed_init"] = m.embed_init;
  return j;
}

model::ModelConfig model_from(const ojson& j) {
  model::ModelConfig m;
  m.vocab_size = j.at("vocab_size").get<corpus::Token>();
  m.embed_dim = j.at("embed_dim").get<Index>();
  m.sent_dim = j.at("sent_dim").get<Index>();
  m.attn_hidden = j.at("attn_hidden").get<Index>();
  m.disc_hidden = j.at("disc_hidden").get<Index>();
  m.classifier_hidden = j.at("classifier_hidden").get<Index>();
  m.embed_init = j.at("embed_init").get<double>();
  return m;
}

ojson train_json(const TrainConfig& c) {
  ojson j;
  j["alpha"] = c.alpha;
  j["beta"] = c.beta;
  j["lr"] = c.lr;
  j["batch_size"] = c.batch_size;
  j["max_epochs"] = c.max_epochs;
  j["patience"] = c.patience;
  j["seed"] = c.seed;
  j["input_mode"] = model::to_string(c.input_mode);
  j["alternation"] = to_string(c.alternation);
  j["model"] = model_json(c.model);
  return j;
}

TrainConfig train_from(const ojson& j) {
  TrainConfig c;
  c.alpha = j.at("alpha").get<double>();
  c.beta = j.at("beta").get<double>();
  c.lr = j.at("lr").get<double>();
  c.batch_size = j.at("batch_size").get<int>();
  c.max_epochs = j.at("max_epochs").get<int>();
  c.patience = j.at("patience").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.input_mode = model::parse_input_mode(j.at("input_mode").get<std::string>());
  c.alternation = parse_alternation(j.at("alternation").get<std::string>());
  c.model = model_from(j.at("model"));
  return c;
}

}  // namespace

std::string config_to_json(const TrainConfig& cfg) { return train_json(cfg).dump(2); }

TrainConfig config_from_json(const std::string& text) {
  try {
    return train_from(ojson::parse(text));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("train config: ") + e.what());
  }
}

std::string checkpoint_bytes(const Checkpoint& ckpt) {
  std::string out(kMagic, sizeof(kMagic));
  const auto& params = ckpt.params.parameters();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put_string(out, model::to_string(p.group));
    put_string(out, p.name);
    const auto& t = p.var->value;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (Index d : t.shape()) put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    for (Index i = 0; i < t.numel(); ++i) put<double>(out, t[i]);
  }
  ojson trailer;
  trailer["config"] = train_json(ckpt.config);
  trailer["epoch"] = ckpt.epoch;
  trailer["valid_f1_macro"] = ckpt.valid_f1_macro;
  trailer["valid_f1_micro"] = ckpt.valid_f1_micro;
  const std::string text = trailer.dump();
  put<std::uint64_t>(out, text.size());
  out += text;
  return out;
}

Checkpoint checkpoint_from_bytes(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    if (bytes.size() < sizeof(kMagic) && std::memcmp(bytes.data(), kMagic, bytes.size()) == 0)
      throw CorruptionError("checkpoint truncated inside the magic header");
    throw FormatError("not a DALCKPT1 checkpoint (bad magic)");
  }
  Reader r(bytes);
  r.rest(sizeof(kMagic));
  const auto count = r.get<std::uint32_t>();

  struct Record {
    model::Group group;
    std::string name;
    Tensor value;
  };
  std::vector<Record> records;
  for (std::uint32_t k = 0; k < count; ++k) {
    Record rec;
    rec.group = model::parse_group(r.get_string());
    rec.name = r.get_string();
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw CorruptionError("implausible tensor rank " + std::to_string(rank));
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const auto d = r.get<std::uint64_t>();
      if (d == 0 || d > (1ULL << 32)) throw CorruptionError("implausible tensor dimension");
      shape.push_back(static_cast<Index>(d));
    }
    const Index numel = shape_numel(shape);
    if (static_cast<std::uint64_t>(numel) * sizeof(double) > bytes.size())
      throw CorruptionError("checkpoint truncated in tensor '" + rec.name + "'");
    rec.value = Tensor(shape);
    for (Index i = 0; i < numel; ++i) rec.value[i] = r.get<double>();
    records.push_back(std::move(rec));
  }
  const auto trailer_len = r.get<std::uint64_t>();
  const std::string text = r.rest(trailer_len);
  if (!r.at_end()) throw CorruptionError("trailing bytes after checkpoint trailer");

  Checkpoint ckpt;
  try {
    const auto trailer = ojson::parse(text);
    ckpt.config = train_from(trailer.at("config"));
    ckpt.epoch = trailer.at("epoch").get<int>();
    ckpt.valid_f1_macro = trailer.at("valid_f1_macro").get<double>();
    ckpt.valid_f1_micro = trailer.at("valid_f1_micro").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(std::string("checkpoint trailer: ") + e.what());
  }

  // The records must match the layout this model config would create.
  Rng scratch(0);
  const model::ParamSet expected(ckpt.config.model, scratch);
  if (expected.parameters().size() != records.size())
    throw FormatError("checkpoint holds " + std::to_string(records.size()) + " tensors, expected " +
                      std::to_string(expected.parameters().size()));
  model::ParamSet params;
  params.set_config(ckpt.config.model);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& want = expected.parameters()[i];
    if (want.name != records[i].name || want.group != records[i].group ||
        want.var->value.shape() != records[i].value.shape())
      throw FormatError("checkpoint tensor '" + records[i].name + "' does not match the model layout");
    params.add(records[i].group, records[i].name, std::move(records[i].value));
  }
  ckpt.params = std::move(params);
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write " + path.string());
  const std::string bytes = checkpoint_bytes(ckpt);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ValidationError("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return checkpoint_from_bytes(ss.str());
}

}  // namespace dal::train

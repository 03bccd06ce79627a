#include "adaptsec/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "adaptsec/digest.hpp"

namespace adaptsec {

namespace {

constexpr char kMagic[8] = {'A', 'D', 'A', 'P', 'T', 'S', 'E', 'C'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint payload is written in host order");

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T>
T get(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw IntegrityError("checkpoint truncated in the preamble");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

Json header_without_digest(const Bundle& b) {
  Json h;
  h["kind"] = b.kind;
  h["meta"] = b.meta;
  Json blocks = Json::array();
  for (const auto& [name, t] : b.blocks) blocks.push_back({{"name", name}, {"shape", t.shape()}});
  h["blocks"] = std::move(blocks);
  return h;
}

std::string compute_digest(const std::string& header_text, std::span<const NamedTensor> blocks) {
  Sha256 sha;
  sha.update(header_text);
  for (const auto& nt : blocks) sha.update(nt.second.data());
  return sha.hex();
}

}  // namespace

std::string bundle_digest(const Bundle& bundle) {
  return compute_digest(header_without_digest(bundle).dump(), bundle.blocks);
}

std::string serialize_bundle(const Bundle& bundle) {
  Json header = header_without_digest(bundle);
  header["digest"] = compute_digest(header.dump(), bundle.blocks);
  const std::string text = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, 0);
  put<std::uint64_t>(out, text.size());
  out += text;
  for (const auto& nt : bundle.blocks) {
    const auto d = nt.second.data();
    out.append(reinterpret_cast<const char*>(d.data()), d.size_bytes());
  }
  return out;
}

Bundle deserialize_bundle(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw IntegrityError("not a checkpoint file (bad magic)");
  std::size_t pos = sizeof(kMagic);
  const auto version = get<std::uint32_t>(bytes, pos);
  if (version != kVersion) throw IntegrityError("unsupported checkpoint version " + std::to_string(version));
  (void)get<std::uint32_t>(bytes, pos);
  const auto hlen = get<std::uint64_t>(bytes, pos);
  if (hlen > bytes.size() - pos) throw IntegrityError("checkpoint truncated in the header");

  Json header;
  try {
    header = Json::parse(bytes.substr(pos, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  pos += hlen;

  Bundle b;
  std::string stored;
  try {
    b.kind = header.at("kind").get<std::string>();
    b.meta = header.at("meta");
    stored = header.at("digest").get<std::string>();
    for (const auto& blk : header.at("blocks")) {
      Shape shape = blk.at("shape").get<Shape>();
      const std::size_t n = shape_size(shape);
      if (n * sizeof(double) > bytes.size() - pos) throw IntegrityError("checkpoint payload truncated");
      std::vector<double> data(n);
      std::memcpy(data.data(), bytes.data() + pos, n * sizeof(double));
      pos += n * sizeof(double);
      b.blocks.emplace_back(blk.at("name").get<std::string>(), Tensor(std::move(shape), std::move(data)));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("checkpoint header malformed: ") + e.what());
  }
  if (pos != bytes.size()) throw IntegrityError("checkpoint has trailing bytes after the payload");
  const std::string actual = bundle_digest(b);
  if (actual != stored) throw IntegrityError("checkpoint digest mismatch: stored " + stored + ", computed " + actual);
  return b;
}

void write_bundle(const std::filesystem::path& path, const Bundle& bundle) {
  const std::string bytes = serialize_bundle(bundle);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot open " + tmp.string() + " for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw Error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Bundle read_bundle(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return deserialize_bundle(ss.str());
}

Json to_json(const ModelConfig& c) {
  return Json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},   {"n_layers", c.n_layers},
              {"n_heads", c.n_heads},       {"d_ff", c.d_ff},         {"max_seq_len", c.max_seq_len}, {"distance_bias", c.distance_bias}};
}

ModelConfig model_config_from_json(const Json& j) {
  ModelConfig c;
  try {
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    c.distance_bias = j.value("distance_bias", true);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

void save_base_model(const std::filesystem::path& path, const MiniLM& model, const Json& meta, bool force) {
  if (!force && std::filesystem::exists(path))
    throw ConfigError("refusing to overwrite existing checkpoint " + path.string() + " (use --force)");
  Bundle b;
  b.kind = kBaseModelKind;
  b.meta = {{"config", to_json(model.config())}, {"recipe", meta}, {"model_digest", model.digest()}};
  b.blocks = model.named_parameters();
  write_bundle(path, b);
}

BaseCheckpoint load_base_model(const std::filesystem::path& path) {
  Bundle b = read_bundle(path);
  if (b.kind != kBaseModelKind) throw IntegrityError("checkpoint " + path.string() + " holds a '" + b.kind + "', not a base model");
  const ModelConfig cfg = model_config_from_json(b.meta.at("config"));
  MiniLM m = MiniLM::from_parameters(cfg, b.blocks);
  if (m.digest() != b.meta.at("model_digest").get<std::string>())
    throw IntegrityError("base model digest does not match its header");
  return {std::move(m), b.meta.at("recipe")};
}

}  // namespace adaptsec

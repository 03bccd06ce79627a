#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adaptsec/model.hpp"

namespace adaptsec {

using Json = nlohmann::ordered_json;

/// Self-describing parameter file.
///
/// Layout: the 8-byte magic "ADAPTSEC", u32 format version, u32 reserved,
/// u64 header length, a JSON header (kind, meta, block names and shapes,
/// digest), then every block's float64 values, little-endian, in header
/// order. The digest is SHA-256 over the header without its digest field
/// followed by the payload bytes, so any flipped bit is detected on load.
struct Bundle {
  std::string kind;
  Json meta = Json::object();
  std::vector<NamedTensor> blocks;
};

std::string serialize_bundle(const Bundle& bundle);
/// Throws IntegrityError on bad magic, truncation or digest mismatch.
Bundle deserialize_bundle(const std::string& bytes);

/// Written to a sibling temporary and renamed into place.
void write_bundle(const std::filesystem::path& path, const Bundle& bundle);
Bundle read_bundle(const std::filesystem::path& path);

/// Digest recorded in a bundle's header.
std::string bundle_digest(const Bundle& bundle);

Json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const Json& j);

inline constexpr const char* kBaseModelKind = "base_model";

struct BaseCheckpoint {
  MiniLM model;
  Json meta;  // pretraining recipe and seed
};

/// Refuses to replace an existing file unless `force` is set.
void save_base_model(const std::filesystem::path& path, const MiniLM& model, const Json& meta, bool force = false);
BaseCheckpoint load_base_model(const std::filesystem::path& path);

}  // namespace adaptsec

#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "adaptsec/corpus.hpp"
#include "adaptsec/tensor.hpp"

namespace adaptsec {

class Rng;

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 64;
  std::size_t n_layers = 3;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t max_seq_len = 256;
  /// Fixed per-head linear distance penalties in attention (geometric slopes).
  bool distance_bias = true;

  /// The desk-scale default over the standard vocabulary.
  static ModelConfig desk();
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

using NamedTensor = std::pair<std::string, Tensor>;

/// Every bias-like vector of one transformer block.
struct BlockBiases {
  Tensor ln1_b, bq, bk, bv, bo, ln2_b, b1, b2;
};

class MiniLM;

struct LoraConfig {
  std::size_t rank = 16;
  double alpha = 16.0;
  double dropout = 0.1;
  /// bias="all": every bias vector gets a trainable adapter-owned copy.
  bool train_biases = true;
};

/// Rank-r update of W_q and W_v in every block: W + (alpha/r) * A * B with
/// A: d x r, B: r x d (row-vector convention, y = x W). B starts at zero.
struct LoraAdapter {
  struct Pair {
    Tensor a;
    Tensor b;
  };
  struct Layer {
    Pair q, v;
  };

  LoraConfig config;
  std::vector<Layer> layers;
  std::vector<BlockBiases> biases;  // empty unless config.train_biases
  Tensor final_ln_b;                // undefined unless config.train_biases

  static LoraAdapter attach(const MiniLM& base, const LoraConfig& config, Rng& rng);
  double scaling() const { return config.alpha / static_cast<double>(config.rank); }
  std::vector<NamedTensor> named_parameters() const;
  std::vector<Tensor> trainable() const;
  std::string digest() const;
};

/// k trainable virtual-token embeddings prepended to every input.
struct SoftPrompt {
  Tensor embeddings;  // k x d_model

  /// Rows copied from randomly drawn vocabulary embeddings.
  static SoftPrompt init(const MiniLM& base, std::size_t k, Rng& rng);
  std::size_t length() const { return embeddings.rows(); }
  std::string digest() const;
};

/// Per-layer keys and values of an encoded prefix.
struct PrefixCache {
  std::size_t length = 0;
  std::vector<Tensor> keys;
  std::vector<Tensor> values;
};

struct ForwardOptions {
  const LoraAdapter* lora = nullptr;
  const SoftPrompt* soft_prompt = nullptr;
  const PrefixCache* prefix = nullptr;
  Rng* dropout_rng = nullptr;  // non-null selects training mode
};

/// Pre-LN decoder-only transformer with learned positions and a tied LM head.
class MiniLM {
 public:
  struct Block {
    Tensor ln1_g, ln1_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b;
    Tensor w1, b1, w2, b2;
  };

  static MiniLM init(const ModelConfig& config, Rng& rng);
  /// Rebuilds a model from named blocks (checkpoint load).
  static MiniLM from_parameters(const ModelConfig& config, std::span<const NamedTensor> params);

  const ModelConfig& config() const noexcept { return cfg_; }
  const Tensor& token_embedding() const noexcept { return tok_; }
  const std::vector<Block>& blocks() const noexcept { return blocks_; }

  std::vector<NamedTensor> named_parameters() const;
  std::vector<Tensor> parameters() const;
  void set_trainable(bool on);
  std::size_t parameter_count() const;
  /// SHA-256 over parameter names, shapes and bytes in fixed order.
  std::string digest() const;

  /// Rows after the final layer norm for every sequence of the batch,
  /// concatenated. Each sequence contributes soft-prompt rows (if any)
  /// followed by its tokens. `capture` receives per-layer keys/values.
  Tensor hidden(Graph& g, std::span<const TokenSeq> batch, const ForwardOptions& opts = {},
                PrefixCache* capture = nullptr) const;
  /// Next-token logits for every internal position: [(k + L) x vocab].
  Tensor forward(Graph& g, const TokenSeq& tokens, const ForwardOptions& opts = {}) const;
  /// Final-position logits restricted to the verbalizer tokens: [B x C].
  Tensor class_logits(Graph& g, std::span<const TokenSeq> batch, std::span<const TokenId> verbalizer,
                      const ForwardOptions& opts = {}) const;
  /// Encodes a shared prefix once; later calls attend to it via opts.prefix.
  PrefixCache encode_prefix(const TokenSeq& tokens, const ForwardOptions& opts = {}) const;

  std::size_t internal_length(std::size_t input_len, const ForwardOptions& opts) const;
  /// Per-head attention distance slopes; empty when the bias is disabled.
  const std::vector<double>& attention_slopes() const noexcept { return slopes_; }

 private:
  ModelConfig cfg_;
  Tensor tok_, pos_;
  std::vector<Block> blocks_;
  Tensor lnf_g_, lnf_b_;
  std::vector<double> slopes_;
};

struct Classification {
  std::size_t predicted = 0;
  std::vector<double> probabilities;
  std::optional<double> loss;
};

/// Restricted-verbalizer classification: softmax over the label-token logits
/// at the final position. `gold`, when non-empty, yields the per-prompt loss.
std::vector<Classification> classify_batch(const MiniLM& model, std::span<const TokenSeq> prompts,
                                           std::span<const TokenId> verbalizer, const ForwardOptions& opts = {},
                                           std::span<const std::size_t> gold = {});

Classification classify(const MiniLM& model, const TokenSeq& prompt, std::span<const TokenId> verbalizer,
                        const ForwardOptions& opts = {}, std::optional<std::size_t> gold = std::nullopt);

/// SHA-256 over an ordered list of named tensors.
std::string digest_of(std::span<const NamedTensor> params);

}  // namespace adaptsec

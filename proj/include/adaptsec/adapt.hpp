#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "adaptsec/checkpoint.hpp"
#include "adaptsec/corpus.hpp"
#include "adaptsec/model.hpp"

namespace adaptsec {

struct AdaptConfig {
  Technique technique = Technique::lora;
  std::size_t epochs = 5;
  double learning_rate = 1e-3;
  std::size_t batch_size = 16;
  LoraConfig lora;
  std::size_t virtual_tokens = 10;
  std::size_t demonstrations = 4;
  PromptTemplate prompt_template = PromptTemplate::task_default;

  /// LoRA: 5 epochs at 1e-3 with r = alpha = 16, dropout 0.1, all biases.
  /// SPT: 5 epochs at 3e-3 with 10 virtual tokens. ICL: 4 demonstrations, no epochs.
  static AdaptConfig defaults(Technique technique);
  void validate() const;
  Json to_json() const;
  static AdaptConfig from_json(const Json& j);
};

/// A frozen base plus exactly one adaptation. Every classify/predict call
/// counts as one query per input.
class AdaptedModel {
 public:
  struct Provenance {
    std::uint64_t seed = 0;
    std::string data_digest;          // digest of the adaptation set
    std::vector<double> epoch_losses;  // mean training loss per epoch
  };

  AdaptedModel(std::shared_ptr<const MiniLM> base, const TaskSpec& task, AdaptConfig config);

  const MiniLM& base() const { return *base_; }
  std::shared_ptr<const MiniLM> base_ptr() const { return base_; }
  const TaskSpec& task() const { return *task_; }
  const AdaptConfig& config() const { return config_; }
  Technique technique() const { return config_.technique; }

  const std::optional<LoraAdapter>& lora() const { return lora_; }
  const std::optional<SoftPrompt>& soft_prompt() const { return prompt_; }
  const std::vector<LabeledExample>& demonstrations() const { return demos_; }
  const Provenance& provenance() const { return provenance_; }

  /// Label-only answers (the stealing interface).
  std::vector<std::size_t> predict(std::span<const TokenSeq> texts) const;
  /// Full answers with the restricted-verbalizer loss of each gold label.
  std::vector<Classification> classify(std::span<const LabeledExample> examples) const;

  std::size_t queries() const noexcept { return queries_; }
  void reset_queries() noexcept { queries_ = 0; }

  /// Digest of the adapter state (LoRA blocks, soft prompt, or demonstration list).
  std::string adapter_digest() const;

  /// Prompt tokens the base sees for one input (without virtual tokens).
  TokenSeq render(const TokenSeq& text) const;

  // Construction helpers used by the trainers and checkpoint loading.
  void set_lora(LoraAdapter a) { lora_ = std::move(a); }
  void set_soft_prompt(SoftPrompt p) { prompt_ = std::move(p); }
  void set_demonstrations(std::vector<LabeledExample> d);
  Provenance& mutable_provenance() { return provenance_; }

 private:
  std::vector<Classification> run(std::span<const TokenSeq> texts, std::span<const std::size_t> gold) const;
  ForwardOptions options() const;

  std::shared_ptr<const MiniLM> base_;
  const TaskSpec* task_;
  AdaptConfig config_;
  std::optional<LoraAdapter> lora_;
  std::optional<SoftPrompt> prompt_;
  std::vector<LabeledExample> demos_;
  std::optional<PrefixCache> cache_;
  Provenance provenance_;
  mutable std::size_t queries_ = 0;
};

/// Digest of an ordered example list (text, label, origin).
std::string examples_digest(std::span<const LabeledExample> examples);

AdaptedModel train_lora(std::shared_ptr<const MiniLM> base, const TaskSpec& task,
                        std::span<const LabeledExample> data, const AdaptConfig& config, std::uint64_t seed);
AdaptedModel train_spt(std::shared_ptr<const MiniLM> base, const TaskSpec& task,
                       std::span<const LabeledExample> data, const AdaptConfig& config, std::uint64_t seed);
/// Demonstrations are used in the given order; `seed` is recorded only.
AdaptedModel build_icl(std::shared_ptr<const MiniLM> base, const TaskSpec& task,
                       std::span<const LabeledExample> demonstrations, const AdaptConfig& config,
                       std::uint64_t seed = 0);

/// Dispatches on config.technique. For ICL the first config.demonstrations
/// examples are used as demonstrations.
AdaptedModel adapt(std::shared_ptr<const MiniLM> base, const TaskSpec& task, std::span<const LabeledExample> data,
                   const AdaptConfig& config, std::uint64_t seed);

/// Fraction of correct predictions on a clean test set.
double evaluate_utility(const AdaptedModel& model, std::span<const LabeledExample> test);

inline constexpr const char* kAdaptedModelKind = "adapted_model";

void save_adapted_model(const std::filesystem::path& path, const AdaptedModel& model);
/// The base must be the one the adapter was trained on (checked by digest).
AdaptedModel load_adapted_model(const std::filesystem::path& path, std::shared_ptr<const MiniLM> base);

}  // namespace adaptsec

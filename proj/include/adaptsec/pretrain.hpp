#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "adaptsec/checkpoint.hpp"
#include "adaptsec/corpus.hpp"
#include "adaptsec/model.hpp"

namespace adaptsec {

/// Recipe for the base model. Every episode is a few-shot prompt over one of
/// the task mirrors, trained with next-token loss on all positions plus an
/// extra term on the label-word slots.
struct PretrainConfig {
  ModelConfig model = ModelConfig::desk();
  std::uint64_t seed = 20240501;
  std::size_t steps = 4000;
  std::size_t batch_size = 16;
  double learning_rate = 1.5e-3;
  std::size_t warmup_steps = 150;
  double grad_clip = 1.0;
  std::size_t max_demonstrations = 8;
  /// Probability that a shown demonstration label is replaced by another class.
  double label_noise = 0.1;
  /// Probability that a later slot repeats an earlier demonstration verbatim
  /// (with the label shown the first time).
  double repeat_probability = 0.5;
  /// Share of sentences drawn in the shifted style, so the base has seen that vocabulary.
  double shifted_share = 0.1;
  /// Weight of the label-slot loss relative to the all-position loss.
  double label_weight = 2.0;
  /// Probability that an episode maps classes to label words through a random permutation.
  double label_permutation = 0.3;
  /// Probability that a repeat also relabels the earlier occurrence to another class.
  double repeat_conflict = 0.5;
  /// Probability that a fresh sentence carries one stray class-neutral word at a
  /// random position, so every word of the vocabulary gets a trained embedding.
  double stray_word_rate = 0.0;

  Json to_json() const;
  static PretrainConfig from_json(const Json& j);
};

/// One training sequence and its next-token targets (kIgnoreTarget where unused).
struct PretrainEpisode {
  TokenSeq tokens;
  std::vector<int> targets;
  std::vector<int> label_targets;  // targets at label-word slots only
};

PretrainEpisode make_episode(const PretrainConfig& config, Rng& rng, const Vocabulary& vocab = Vocabulary::standard());

struct PretrainReport {
  std::vector<double> losses;  // per step
  double seconds = 0.0;
};

using PretrainProgress = std::function<void(std::size_t step, double loss)>;

MiniLM pretrain(const PretrainConfig& config, PretrainReport* report = nullptr, const PretrainProgress& progress = {});

/// Loads `path` when it holds a model pretrained with exactly `config`,
/// otherwise pretrains and writes it. Used by tests and the acceptance run.
MiniLM load_or_pretrain(const std::filesystem::path& path, const PretrainConfig& config);

}  // namespace adaptsec

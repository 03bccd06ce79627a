#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "adaptsec/adapt.hpp"
#include "adaptsec/metrics.hpp"

namespace adaptsec {

// ---- membership inference ---------------------------------------------------

struct MiaOutcome {
  Technique technique = Technique::lora;
  std::size_t repeat = 0;
  std::size_t demonstrations = 0;  // ICL only
  std::vector<double> member_losses;
  std::vector<double> nonmember_losses;

  RocCurve curve() const { return roc(member_losses, nonmember_losses); }
  double tpr_at(double fpr = 0.01) const { return tpr_at_fpr(curve(), fpr); }
};

/// Scores the split's members and nonmembers by the target's loss on their
/// gold labels. The target and its base are checked to be unchanged.
MiaOutcome mia_run(const AdaptedModel& target, const SplitPlan& split, std::size_t repeat = 0);

// ---- model stealing -----------------------------------------------------------

struct StealOutcome {
  Technique target_technique = Technique::lora;
  std::size_t budget = 0;
  ProbeSource source = ProbeSource::same_distribution;
  std::size_t queries = 0;  // target queries spent on labeling probes
  std::string surrogate_digest;
  double agreement = 0.0;
  double accuracy = 0.0;         // surrogate vs gold
  double target_accuracy = 0.0;  // target vs gold on the same set
};

/// Labels the first `budget` probes with the target (labels only), trains a
/// LoRA surrogate on the same base and compares the two on `eval_set`.
StealOutcome steal_run(const AdaptedModel& target, const ProbeSet& probes, std::span<const LabeledExample> eval_set,
                       std::size_t budget, const AdaptConfig& surrogate_config, std::uint64_t seed);

// ---- backdoor -------------------------------------------------------------------

enum class PoisonPosition { none, first, last };
std::string_view to_string(PoisonPosition p);
PoisonPosition position_from_string(std::string_view s);

inline constexpr std::size_t kBackdoorTarget = 0;

struct BackdoorOutcome {
  Technique technique = Technique::lora;
  double rate = 0.0;
  PoisonPosition position = PoisonPosition::none;
  std::size_t clean_count = 0;
  std::size_t poisoned_count = 0;
  double utility = 0.0;
  double asr = 0.0;
  std::string adapter_digest;
};

/// Appends round(rate * |clean|) trigger-prefixed copies relabeled to the
/// target class, adapts, and measures utility on `test` and ASR on `test`
/// with the trigger prepended and every label set to the target. For ICL the
/// copies join the demonstrations at the front or the back (`position`).
/// rate == 0 is the clean control.
BackdoorOutcome backdoor_run(std::shared_ptr<const MiniLM> base, const TaskSpec& task, const AdaptConfig& config,
                             std::span<const LabeledExample> clean, std::span<const LabeledExample> test, double rate,
                             PoisonPosition position, std::uint64_t seed);

/// ASR alone, for an already adapted model.
double attack_success_rate(const AdaptedModel& model, std::span<const LabeledExample> test,
                           std::size_t target = kBackdoorTarget);

// ---- loss distributions -----------------------------------------------------------

struct LossHistogram {
  std::vector<double> edges;  // bins + 1 edges
  std::vector<double> member_density;
  std::vector<double> nonmember_density;
};

/// Pools the losses of every outcome and bins them on one shared grid from
/// 0 to the largest loss; each density integrates to 1.
LossHistogram export_loss_distributions(std::span<const MiaOutcome> outcomes, std::size_t bins = 40);

/// Two-column table: bin center, density.
void write_histogram(std::ostream& os, const std::vector<double>& edges, const std::vector<double>& density);

// ---- persistence ------------------------------------------------------------------

Json to_json(const MiaOutcome& o);
Json to_json(const StealOutcome& o);
Json to_json(const BackdoorOutcome& o);

}  // namespace adaptsec

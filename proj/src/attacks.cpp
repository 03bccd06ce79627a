#include "adaptsec/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "adaptsec/rng.hpp"

namespace adaptsec {

MiaOutcome mia_run(const AdaptedModel& target, const SplitPlan& split, std::size_t repeat) {
  if (split.members.empty()) throw SizeError("mia_run: member set is empty");
  if (split.nonmembers.empty()) throw SizeError("mia_run: nonmember set is empty");
  const std::string base_before = target.base().digest();
  const std::string adapter_before = target.adapter_digest();

  MiaOutcome out;
  out.technique = target.technique();
  out.repeat = repeat;
  out.demonstrations = target.technique() == Technique::icl ? target.demonstrations().size() : 0;
  auto losses = [](const std::vector<Classification>& cs) {
    std::vector<double> v;
    for (const auto& c : cs) {
      const double l = *c.loss;
      if (!std::isfinite(l) || l < 0.0) throw TrainingError("mia_run: invalid loss " + std::to_string(l), 0);
      v.push_back(l);
    }
    return v;
  };
  out.member_losses = losses(target.classify(split.members));
  out.nonmember_losses = losses(target.classify(split.nonmembers));

  if (target.base().digest() != base_before || target.adapter_digest() != adapter_before)
    throw ContractError("mia_run: the target changed while being scored");
  return out;
}

// ---------------------------------------------------------------------------

StealOutcome steal_run(const AdaptedModel& target, const ProbeSet& probes, std::span<const LabeledExample> eval_set,
                       std::size_t budget, const AdaptConfig& surrogate_config, std::uint64_t seed) {
  if (budget == 0) throw SizeError("steal_run: budget must be positive");
  if (budget > probes.texts.size())
    throw SizeError("steal_run: budget " + std::to_string(budget) + " exceeds the " +
                    std::to_string(probes.texts.size()) + " available probes");
  if (eval_set.empty()) throw SizeError("steal_run: empty evaluation set");
  if (surrogate_config.technique != Technique::lora) throw ConfigError("steal_run: the surrogate is trained with LoRA");

  StealOutcome out;
  out.target_technique = target.technique();
  out.budget = budget;
  out.source = probes.source;

  const std::span<const TokenSeq> asked(probes.texts.data(), budget);
  const std::size_t before = target.queries();
  const std::vector<std::size_t> answers = target.predict(asked);
  out.queries = target.queries() - before;
  if (out.queries != budget)
    throw ContractError("steal_run: spent " + std::to_string(out.queries) + " queries for a budget of " +
                        std::to_string(budget));

  std::vector<LabeledExample> stolen;
  stolen.reserve(budget);
  for (std::size_t i = 0; i < budget; ++i) stolen.push_back({asked[i], answers[i], Origin::probe});
  AdaptedModel surrogate = train_lora(target.base_ptr(), target.task(), stolen, surrogate_config, seed);
  out.surrogate_digest = surrogate.adapter_digest();

  // Scoring on the evaluation set is bookkeeping, not part of the attack.
  std::vector<TokenSeq> texts;
  std::vector<std::size_t> gold;
  for (const auto& e : eval_set) {
    texts.push_back(e.text);
    gold.push_back(e.label);
  }
  const auto target_pred = target.predict(texts);
  const auto surrogate_pred = surrogate.predict(texts);
  out.agreement = agreement(surrogate_pred, target_pred);
  out.accuracy = accuracy(surrogate_pred, gold);
  out.target_accuracy = accuracy(target_pred, gold);
  return out;
}

// ---------------------------------------------------------------------------

std::string_view to_string(PoisonPosition p) {
  switch (p) {
    case PoisonPosition::none:
      return "none";
    case PoisonPosition::first:
      return "first";
    case PoisonPosition::last:
      return "last";
  }
  return "none";
}

PoisonPosition position_from_string(std::string_view s) {
  if (s == "none" || s == "n/a") return PoisonPosition::none;
  if (s == "first") return PoisonPosition::first;
  if (s == "last") return PoisonPosition::last;
  throw ConfigError("unknown poison position '" + std::string(s) + "'");
}

double attack_success_rate(const AdaptedModel& model, std::span<const LabeledExample> test, std::size_t target) {
  if (test.empty()) throw SizeError("attack_success_rate: empty test set");
  const auto triggered = triggered_copy(test, Vocabulary::standard().id(kTriggerWord), target);
  std::vector<TokenSeq> texts;
  for (const auto& e : triggered) texts.push_back(e.text);
  const auto pred = model.predict(texts);
  return static_cast<double>(std::count(pred.begin(), pred.end(), target)) / static_cast<double>(pred.size());
}

BackdoorOutcome backdoor_run(std::shared_ptr<const MiniLM> base, const TaskSpec& task, const AdaptConfig& config,
                             std::span<const LabeledExample> clean, std::span<const LabeledExample> test, double rate,
                             PoisonPosition position, std::uint64_t seed) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw ContractError("backdoor_run: rate must lie in [0, 1]");
  const bool icl = config.technique == Technique::icl;
  if (icl && position == PoisonPosition::none && rate > 0.0)
    throw ConfigError("backdoor_run: ICL poisoning needs a first/last position");
  if (!icl && position != PoisonPosition::none) throw ConfigError("backdoor_run: positions apply to ICL only");

  Rng rng(derive_seed(seed, {hash_label("poison")}));
  std::vector<LabeledExample> poisoned;
  if (rate > 0.0) poisoned = poison(clean, rate, Vocabulary::standard().id(kTriggerWord), kBackdoorTarget, icl, rng);

  std::vector<LabeledExample> data;
  if (icl && position == PoisonPosition::first) {
    data = poisoned;
    data.insert(data.end(), clean.begin(), clean.end());
  } else {
    data.assign(clean.begin(), clean.end());
    data.insert(data.end(), poisoned.begin(), poisoned.end());
  }

  AdaptConfig cfg = config;
  if (icl) cfg.demonstrations = data.size();
  const AdaptedModel model = adapt(std::move(base), task, data, cfg, derive_seed(seed, {hash_label("adapt")}));

  BackdoorOutcome out;
  out.technique = config.technique;
  out.rate = rate;
  out.position = position;
  out.clean_count = clean.size();
  out.poisoned_count = poisoned.size();
  out.utility = evaluate_utility(model, test);
  out.asr = attack_success_rate(model, test);
  out.adapter_digest = model.adapter_digest();
  return out;
}

// ---------------------------------------------------------------------------

LossHistogram export_loss_distributions(std::span<const MiaOutcome> outcomes, std::size_t bins) {
  if (outcomes.empty()) throw SizeError("export_loss_distributions: no outcomes");
  if (bins == 0) throw ContractError("export_loss_distributions: need at least one bin");
  std::vector<double> mem, non;
  for (const auto& o : outcomes) {
    mem.insert(mem.end(), o.member_losses.begin(), o.member_losses.end());
    non.insert(non.end(), o.nonmember_losses.begin(), o.nonmember_losses.end());
  }
  if (mem.empty() || non.empty()) throw SizeError("export_loss_distributions: empty loss list");
  double hi = std::max(*std::max_element(mem.begin(), mem.end()), *std::max_element(non.begin(), non.end()));
  if (!(hi > 0.0)) hi = 1.0;
  const double width = hi / static_cast<double>(bins);

  LossHistogram h;
  for (std::size_t i = 0; i <= bins; ++i) h.edges.push_back(width * static_cast<double>(i));
  auto density = [&](const std::vector<double>& xs) {
    std::vector<double> d(bins, 0.0);
    for (double x : xs) {
      auto b = static_cast<std::size_t>(x / width);
      d[std::min(b, bins - 1)] += 1.0;
    }
    for (auto& v : d) v /= static_cast<double>(xs.size()) * width;
    return d;
  };
  h.member_density = density(mem);
  h.nonmember_density = density(non);
  return h;
}

void write_histogram(std::ostream& os, const std::vector<double>& edges, const std::vector<double>& density) {
  if (edges.size() != density.size() + 1) throw SizeError("write_histogram: edges do not bracket the bins");
  os << "bin\tdensity\n";
  os.precision(17);
  for (std::size_t i = 0; i < density.size(); ++i) os << 0.5 * (edges[i] + edges[i + 1]) << '\t' << density[i] << '\n';
}

// ---------------------------------------------------------------------------

Json to_json(const MiaOutcome& o) {
  return Json{{"kind", "mia"},
              {"technique", to_string(o.technique)},
              {"repeat", o.repeat},
              {"demonstrations", o.demonstrations},
              {"tpr_at_fpr_0.01", o.tpr_at(0.01)},
              {"member_losses", o.member_losses},
              {"nonmember_losses", o.nonmember_losses}};
}

Json to_json(const StealOutcome& o) {
  return Json{{"kind", "steal"},
              {"technique", to_string(o.target_technique)},
              {"budget", o.budget},
              {"source", to_string(o.source)},
              {"queries", o.queries},
              {"surrogate_digest", o.surrogate_digest},
              {"agreement", o.agreement},
              {"accuracy", o.accuracy},
              {"target_accuracy", o.target_accuracy}};
}

Json to_json(const BackdoorOutcome& o) {
  return Json{{"kind", "backdoor"},
              {"technique", to_string(o.technique)},
              {"rate", o.rate},
              {"position", to_string(o.position)},
              {"clean_count", o.clean_count},
              {"poisoned_count", o.poisoned_count},
              {"utility", o.utility},
              {"asr", o.asr},
              {"adapter_digest", o.adapter_digest}};
}

}  // namespace adaptsec

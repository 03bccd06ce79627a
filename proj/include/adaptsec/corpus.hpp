#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "adaptsec/errors.hpp"

namespace adaptsec {

class Rng;

using TokenId = std::uint32_t;
using TokenSeq = std::vector<TokenId>;

/// Closed word-level vocabulary. Every token the generators can emit is
/// listed up front; there is no learned tokenizer.
class Vocabulary {
 public:
  explicit Vocabulary(std::vector<std::string> words);

  /// The shared vocabulary of all four task mirrors, the trigger word and
  /// the prompt scaffolding.
  static const Vocabulary& standard();

  std::size_t size() const noexcept { return words_.size(); }
  TokenId id(std::string_view word) const;
  std::optional<TokenId> find(std::string_view word) const;
  const std::string& word(TokenId id) const;
  TokenSeq encode(std::span<const std::string> words) const;
  /// Space-joined words.
  std::string render(std::span<const TokenId> tokens) const;
  TokenSeq parse(std::string_view text) const;

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
};

inline constexpr std::string_view kTriggerWord = "Hikigane";
inline constexpr std::string_view kNewline = "<nl>";

/// Synthetic stand-in for one benchmark: class keyword banks, label words and
/// the prompt scaffolding of its table-style template.
struct TaskSpec {
  std::string name;
  std::size_t n_classes = 0;
  std::vector<std::vector<std::string>> keywords;
  std::vector<std::string> label_words;
  std::vector<std::string> instruction;  // empty: no instruction line
  std::vector<std::string> input_marker;
  std::vector<std::string> answer_marker;
  std::size_t lora_train_size = 0;
  std::size_t spt_train_size = 0;

  static const TaskSpec& dbpedia14();
  static const TaskSpec& agnews4();
  static const TaskSpec& trec6();
  static const TaskSpec& sst2();
  static const TaskSpec& by_name(std::string_view name);
  static std::span<const TaskSpec* const> all();

  /// Label words single in-vocabulary tokens, banks disjoint, counts consistent.
  void validate(const Vocabulary& vocab) const;
  std::vector<TokenId> label_tokens(const Vocabulary& vocab) const;
};

enum class Origin { unassigned, member, nonmember, heldout, probe, poisoned };

std::string_view to_string(Origin origin);
Origin origin_from_string(std::string_view s);

struct LabeledExample {
  TokenSeq text;
  std::size_t label = 0;
  Origin origin = Origin::unassigned;

  bool operator==(const LabeledExample&) const = default;
};

enum class SentenceStyle { clean, shifted };

/// Word banks shared by every task mirror.
struct WordBanks {
  std::vector<std::string> entities;
  std::vector<std::string> fillers;
  std::vector<std::string> function_words;  // clean templates
  std::vector<std::string> shifted_words;   // disjoint bank used by shifted templates
  std::vector<std::vector<std::string>> clean_templates;
  std::vector<std::vector<std::string>> shifted_templates;

  static const WordBanks& standard();
};

/// One sentence of class `label`; carries two keywords of that class.
TokenSeq generate_sentence(const TaskSpec& task, std::size_t label, SentenceStyle style, Rng& rng,
                           const Vocabulary& vocab = Vocabulary::standard());

/// n distinct sentences, class-balanced up to rounding (class i gets
/// floor(n / C) plus one of the first n mod C), shuffled. Deterministic in seed.
std::vector<LabeledExample> generate_corpus(const TaskSpec& task, std::size_t n, std::uint64_t seed,
                                            const Vocabulary& vocab = Vocabulary::standard());

enum class PromptTemplate { task_default, bare };

std::string_view to_string(PromptTemplate t);
PromptTemplate template_from_string(std::string_view s);

/// Instruction (when the template has one), each demonstration as an
/// input/label-word pair, then the query with an empty answer slot.
TokenSeq format_prompt(const TaskSpec& task, PromptTemplate tmpl, std::span<const LabeledExample> demonstrations,
                       const LabeledExample& query, std::size_t max_len = SIZE_MAX,
                       const Vocabulary& vocab = Vocabulary::standard());

/// Prompt split into the shared part (instruction + demonstrations) and the
/// query part; concatenation equals format_prompt.
struct PromptParts {
  TokenSeq prefix;
  TokenSeq query;
};
PromptParts format_prompt_parts(const TaskSpec& task, PromptTemplate tmpl,
                                std::span<const LabeledExample> demonstrations, const LabeledExample& query,
                                const Vocabulary& vocab = Vocabulary::standard());

enum class Technique { lora, spt, icl };

std::string_view to_string(Technique t);
Technique technique_from_string(std::string_view s);

struct SplitCounts {
  std::size_t members = 0;
  std::size_t nonmembers = 0;

  /// LoRA/SPT: the task's fine-tuning size for both sides; ICL: 4 and 300.
  static SplitCounts defaults(const TaskSpec& task, Technique technique);
};

struct SplitPlan {
  Technique technique = Technique::lora;
  std::vector<LabeledExample> members;
  std::vector<LabeledExample> nonmembers;
  std::vector<LabeledExample> remainder;  // untouched pool, e.g. for held-out test sets
};

/// Disjoint member/nonmember draw from one corpus. ICL members are
/// class-stratified so the demonstrations cover as many classes as possible.
SplitPlan make_split(std::span<const LabeledExample> corpus, Technique technique, std::uint64_t seed,
                     SplitCounts counts, std::size_t n_classes);

/// Backdoored copies of round(rate * |clean|) clean examples: trigger
/// prepended, label set to target. For ICL the candidate pool excludes
/// examples whose label already equals the target.
std::vector<LabeledExample> poison(std::span<const LabeledExample> clean, double rate, TokenId trigger,
                                   std::size_t target, bool icl, Rng& rng);

/// Every example trigger-prepended with label = target (ASR evaluation set).
std::vector<LabeledExample> triggered_copy(std::span<const LabeledExample> clean, TokenId trigger,
                                           std::size_t target);

enum class ProbeSource { same_distribution, shifted };

std::string_view to_string(ProbeSource s);
ProbeSource probe_source_from_string(std::string_view s);

struct ProbeSet {
  ProbeSource source = ProbeSource::same_distribution;
  std::vector<TokenSeq> texts;
  /// Generator class of each probe. Kept for analysis only; attacks see texts.
  std::vector<std::size_t> source_classes;
};

/// Unlabeled probing texts, none of which appears in `exclude`.
/// `shift_fraction` is the share of shifted-style probes when source is shifted.
ProbeSet make_probe_set(const TaskSpec& task, ProbeSource source, std::size_t n, std::uint64_t seed,
                        std::span<const LabeledExample> exclude = {}, double shift_fraction = 1.0,
                        const Vocabulary& vocab = Vocabulary::standard());

/// Share of non-keyword tokens that come from the shifted-only word bank.
double shifted_token_fraction(const TaskSpec& task, std::span<const TokenSeq> texts,
                              const Vocabulary& vocab = Vocabulary::standard());

/// Line-delimited JSON: {"text": ..., "label": ..., "origin": ...}.
void write_corpus_jsonl(std::ostream& os, std::span<const LabeledExample> examples,
                        const Vocabulary& vocab = Vocabulary::standard());
std::vector<LabeledExample> read_corpus_jsonl(std::istream& is, const Vocabulary& vocab = Vocabulary::standard());

/// Key for text-level set membership.
std::string text_key(std::span<const TokenId> text);

}  // namespace adaptsec

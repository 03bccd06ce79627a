#include "adaptsec/corpus.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>

#include "adaptsec/rng.hpp"

namespace adaptsec {

namespace {

using Words = std::vector<std::string>;

const Words kSpecial = {"<pad>", std::string(kNewline)};
const Words kScaffold = {"Article:", "Answer:",   "Question:", "Answer", "Type:", "input:", "output:",
                         "sentence", "-",         "Classify",  "documents", "questions", "based", "whether",
                         "they",     "are",       "their",     "answer",    "type",      "about", "or"};

TaskSpec make_dbpedia() {
  TaskSpec t;
  t.name = "dbpedia14";
  t.n_classes = 14;
  t.label_words = {"Company", "School",   "Artist", "Athlete", "Politician", "Transportation", "Building",
                   "Nature",  "Village",  "Animal", "Plant",   "Album",      "Film",           "Book"};
  t.keywords = {
      {"corporation", "firm", "headquartered", "subsidiary", "brand", "enterprise"},
      {"university", "college", "campus", "students", "academy", "faculty"},
      {"painter", "singer", "musician", "sculptor", "composer", "songwriter"},
      {"footballer", "sprinter", "olympian", "goalkeeper", "cyclist", "swimmer"},
      {"senator", "parliament", "mayor", "governor", "legislator", "congressman"},
      {"locomotive", "aircraft", "ship", "railway", "highway", "ferry"},
      {"cathedral", "tower", "skyscraper", "castle", "mansion", "hotel"},
      {"river", "mountain", "lake", "glacier", "volcano", "island"},
      {"hamlet", "parish", "municipality", "township", "commune", "villagers"},
      {"beetle", "moth", "snail", "mammal", "reptile", "bird"},
      {"shrub", "orchid", "flowering", "herb", "fern", "tree"},
      {"tracklist", "LP", "EP", "recorded", "studio", "discography"},
      {"movie", "directed", "screenplay", "cinema", "documentary", "starring"},
      {"novel", "author", "publisher", "paperback", "memoir", "chapters"},
  };
  Words instr = {"Classify", "the", "documents", "based", "on", "whether", "they", "are", "about", "a"};
  for (std::size_t i = 0; i < t.label_words.size(); ++i) {
    if (i + 1 == t.label_words.size()) instr.push_back("or");
    instr.push_back(t.label_words[i]);
    if (i + 1 < t.label_words.size()) instr.push_back(",");
  }
  instr.push_back(".");
  t.instruction = instr;
  t.input_marker = {"Article:"};
  t.answer_marker = {"Answer:"};
  t.lora_train_size = 300;
  t.spt_train_size = 800;
  return t;
}

TaskSpec make_agnews() {
  TaskSpec t;
  t.name = "agnews4";
  t.n_classes = 4;
  t.label_words = {"World", "Sports", "Business", "Technology"};
  t.keywords = {
      {"election", "minister", "treaty", "embassy", "refugees", "summit"},
      {"match", "coach", "league", "tournament", "striker", "championship"},
      {"profit", "shares", "merger", "investors", "revenue", "stocks"},
      {"software", "chip", "internet", "startup", "device", "processor"},
  };
  t.input_marker = {"Article:"};
  t.answer_marker = {"Answer:"};
  t.lora_train_size = 200;
  t.spt_train_size = 200;
  return t;
}

TaskSpec make_trec() {
  TaskSpec t;
  t.name = "trec6";
  t.n_classes = 6;
  t.label_words = {"Number", "Location", "Person", "Description", "Entity", "Abbreviation"};
  t.keywords = {
      {"many", "much", "year", "percentage", "population", "distance"},
      {"where", "country", "city", "continent", "capital", "located"},
      {"who", "inventor", "president", "founder", "wife", "actor"},
      {"why", "meaning", "definition", "explain", "describe", "cause"},
      {"breed", "instrument", "currency", "language", "sport", "fruit"},
      {"acronym", "abbreviation", "stands", "initials", "short", "abbreviated"},
  };
  Words instr = {"Classify", "the", "questions", "based", "on", "whether", "their", "answer", "type", "is", "a"};
  for (std::size_t i = 0; i < t.label_words.size(); ++i) {
    if (i + 1 == t.label_words.size()) instr.push_back("or");
    instr.push_back(t.label_words[i]);
    if (i + 1 < t.label_words.size()) instr.push_back(",");
  }
  instr.push_back(".");
  t.instruction = instr;
  t.input_marker = {"Question:"};
  t.answer_marker = {"Answer", "Type:"};
  t.lora_train_size = 300;
  t.spt_train_size = 900;
  return t;
}

TaskSpec make_sst2() {
  TaskSpec t;
  t.name = "sst2";
  t.n_classes = 2;
  t.label_words = {"Positive", "Negative"};
  t.keywords = {
      {"amazing", "wonderful", "brilliant", "delightful", "superb", "charming"},
      {"horrific", "dreadful", "boring", "awful", "terrible", "dull"},
  };
  t.input_marker = {"input:", "sentence", "-"};
  t.answer_marker = {"output:"};
  t.lora_train_size = 600;
  t.spt_train_size = 1000;
  return t;
}

const TaskSpec& task_storage(int which) {
  static const TaskSpec tasks[] = {make_dbpedia(), make_agnews(), make_trec(), make_sst2()};
  return tasks[which];
}

WordBanks make_banks() {
  WordBanks b;
  b.entities = {"Aldora",  "Brevik",  "Calmont", "Dunhollow", "Eskara",   "Fenwick", "Galdor", "Harlow",
                "Istren",  "Jorvale", "Kestrel", "Lunmark",   "Morrow",   "Norvain", "Ostrava", "Pellam",
                "Quenby",  "Rusk",    "Selwyn",  "Tamsin",    "Ulvar",    "Varno",   "Wexley", "Yarrow",
                "Zennor",  "Ashby",   "Brumley", "Corvel",    "Delmar",   "Elston",  "Farrow", "Greyholm",
                "Hadley",  "Ingram",  "Jessop",  "Kirkby",    "Lowell",   "Marsden", "Nettle", "Orwin",
                "Penrose", "Quill",   "Radley",  "Stroud",    "Thorne",   "Upton",   "Vance",  "Whitlow"};
  b.fillers = {"area",   "group",   "part",    "name",  "form",  "period", "region", "series",
               "center", "place",   "system",  "line",  "version", "family", "history", "unit",
               "branch", "side",    "stage",   "style", "range", "field",  "level",  "point",
               "network", "project", "term",   "section", "way", "origin"};
  b.function_words = {"the", "a", "of", "in", "on", "was", "is", "for", "with", "by", "and", "to", "at", "from",
                      "its", "has", ",", "."};
  b.shifted_words = {"this", "that",   "these", "about",  "regarding", "some", "very", "really", "another",
                     "an",   "via",    "amid",  "per",    "within",    "upon", "toward", "so",   "quite",
                     ";",    "!"};
  // @E entity, @K class keyword, @N filler noun; everything else is literal.
  b.clean_templates = {
      {"@E", "is", "a", "@K", "@N", "of", "the", "@K", "."},
      {"@E", "was", "the", "@K", "@N", "in", "a", "@K", "@N", "."},
      {"the", "@K", "of", "@E", "has", "a", "@K", "@N", "."},
      {"@E", ",", "a", "@N", "with", "@K", "and", "@K", "."},
      {"@E", "from", "the", "@N", "was", "@K", "by", "the", "@K", "."},
      {"in", "the", "@N", ",", "@E", "is", "@K", "for", "the", "@K", "."},
      {"@E", "has", "@K", "and", "@K", "in", "its", "@N", "."},
      {"@E", "is", "at", "the", "@N", "of", "@K", "@K", "."},
  };
  b.shifted_templates = {
      {"this", "@K", "@N", "regarding", "@E", "really", "@K", "!"},
      {"some", "@K", "within", "@E", "amid", "another", "@K", "."},
      {"about", "@E", ";", "that", "@K", "via", "some", "@K", "@N"},
      {"@E", "quite", "@K", ",", "so", "@K", "upon", "this", "@N", "."},
      {"another", "@N", "toward", "@E", "really", "@K", "per", "@K", "."},
      {"these", "@K", "@N", "within", "@E", ",", "very", "@K", "!"},
  };
  return b;
}

Words build_standard_words() {
  Words w = kSpecial;
  auto add = [&w](const Words& more) {
    for (const auto& s : more)
      if (std::find(w.begin(), w.end(), s) == w.end()) w.push_back(s);
  };
  add(kScaffold);
  const auto& banks = WordBanks::standard();
  add(banks.function_words);
  add(banks.shifted_words);
  add(banks.entities);
  add(banks.fillers);
  for (int i = 0; i < 4; ++i) {
    const auto& t = task_storage(i);
    for (const auto& kw : t.keywords) add(kw);
    add(t.label_words);
    add(t.instruction);
    add(t.input_marker);
    add(t.answer_marker);
  }
  add({std::string(kTriggerWord)});
  return w;
}

void append_words(TokenSeq& out, const Words& words, const Vocabulary& vocab) {
  for (const auto& w : words) out.push_back(vocab.id(w));
}

}  // namespace

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (words_[i].empty() || words_[i].find(' ') != std::string::npos)
      throw ConfigError("vocabulary word must be non-empty and contain no spaces: '" + words_[i] + "'");
    if (!index_.emplace(words_[i], static_cast<TokenId>(i)).second)
      throw ConfigError("duplicate vocabulary word '" + words_[i] + "'");
  }
}

const Vocabulary& Vocabulary::standard() {
  static const Vocabulary v(build_standard_words());
  return v;
}

TokenId Vocabulary::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  if (it == index_.end()) throw ConfigError("word '" + std::string(word) + "' is not in the vocabulary");
  return it->second;
}

std::optional<TokenId> Vocabulary::find(std::string_view word) const {
  auto it = index_.find(std::string(word));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

const std::string& Vocabulary::word(TokenId id) const {
  if (id >= words_.size()) throw IndexError("token id " + std::to_string(id) + " outside vocabulary");
  return words_[id];
}

TokenSeq Vocabulary::encode(std::span<const std::string> words) const {
  TokenSeq out;
  out.reserve(words.size());
  for (const auto& w : words) out.push_back(id(w));
  return out;
}

std::string Vocabulary::render(std::span<const TokenId> tokens) const {
  std::string s;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) s += ' ';
    s += word(tokens[i]);
  }
  return s;
}

TokenSeq Vocabulary::parse(std::string_view text) const {
  TokenSeq out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto end = text.find(' ', pos);
    const auto piece = text.substr(pos, end == std::string_view::npos ? std::string_view::npos : end - pos);
    if (!piece.empty()) out.push_back(id(piece));
    if (end == std::string_view::npos) break;
    pos = end + 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tasks

const TaskSpec& TaskSpec::dbpedia14() { return task_storage(0); }
const TaskSpec& TaskSpec::agnews4() { return task_storage(1); }
const TaskSpec& TaskSpec::trec6() { return task_storage(2); }
const TaskSpec& TaskSpec::sst2() { return task_storage(3); }

std::span<const TaskSpec* const> TaskSpec::all() {
  static const TaskSpec* const tasks[] = {&dbpedia14(), &agnews4(), &trec6(), &sst2()};
  return tasks;
}

const TaskSpec& TaskSpec::by_name(std::string_view name) {
  for (const auto* t : all())
    if (t->name == name) return *t;
  throw ConfigError("unknown task mirror '" + std::string(name) + "'");
}

void TaskSpec::validate(const Vocabulary& vocab) const {
  if (n_classes < 2) throw ConfigError(name + ": needs at least two classes");
  if (label_words.size() < n_classes)
    throw ConfigError(name + ": " + std::to_string(n_classes) + " classes but only " +
                      std::to_string(label_words.size()) + " label words");
  if (keywords.size() < n_classes) throw ConfigError(name + ": missing keyword banks");
  std::set<std::string> seen;
  for (std::size_t c = 0; c < n_classes; ++c) {
    if (keywords[c].size() < 2) throw ConfigError(name + ": keyword bank " + std::to_string(c) + " too small");
    for (const auto& k : keywords[c]) {
      vocab.id(k);
      if (!seen.insert(k).second) throw ConfigError(name + ": keyword '" + k + "' shared between classes");
    }
  }
  std::set<std::string> labels;
  for (std::size_t c = 0; c < n_classes; ++c) {
    vocab.id(label_words[c]);
    if (!labels.insert(label_words[c]).second) throw ConfigError(name + ": duplicate label word");
  }
}

std::vector<TokenId> TaskSpec::label_tokens(const Vocabulary& vocab) const {
  if (label_words.size() < n_classes) throw ConfigError(name + ": label-word bank smaller than class count");
  std::vector<TokenId> out;
  for (std::size_t c = 0; c < n_classes; ++c) out.push_back(vocab.id(label_words[c]));
  return out;
}

const WordBanks& WordBanks::standard() {
  static const WordBanks b = make_banks();
  return b;
}

std::string_view to_string(Origin origin) {
  switch (origin) {
    case Origin::unassigned: return "unassigned";
    case Origin::member: return "member";
    case Origin::nonmember: return "nonmember";
    case Origin::heldout: return "heldout";
    case Origin::probe: return "probe";
    case Origin::poisoned: return "poisoned";
  }
  return "unassigned";
}

Origin origin_from_string(std::string_view s) {
  for (auto o : {Origin::unassigned, Origin::member, Origin::nonmember, Origin::heldout, Origin::probe,
                 Origin::poisoned})
    if (to_string(o) == s) return o;
  throw ConfigError("unknown origin tag '" + std::string(s) + "'");
}

std::string_view to_string(PromptTemplate t) { return t == PromptTemplate::bare ? "bare" : "task_default"; }

PromptTemplate template_from_string(std::string_view s) {
  if (s == "bare") return PromptTemplate::bare;
  if (s == "task_default") return PromptTemplate::task_default;
  throw ConfigError("unknown prompt template '" + std::string(s) + "'");
}

std::string_view to_string(Technique t) {
  switch (t) {
    case Technique::lora: return "lora";
    case Technique::spt: return "spt";
    case Technique::icl: return "icl";
  }
  return "lora";
}

Technique technique_from_string(std::string_view s) {
  for (auto t : {Technique::lora, Technique::spt, Technique::icl})
    if (to_string(t) == s) return t;
  throw ConfigError("unknown technique '" + std::string(s) + "'");
}

std::string_view to_string(ProbeSource s) { return s == ProbeSource::shifted ? "shifted" : "same"; }

ProbeSource probe_source_from_string(std::string_view s) {
  if (s == "same" || s == "same_distribution") return ProbeSource::same_distribution;
  if (s == "shifted") return ProbeSource::shifted;
  throw ConfigError("unknown probe source '" + std::string(s) + "'");
}

std::string text_key(std::span<const TokenId> text) {
  return std::string(reinterpret_cast<const char*>(text.data()), text.size() * sizeof(TokenId));
}

// ---------------------------------------------------------------------------
// Generation

TokenSeq generate_sentence(const TaskSpec& task, std::size_t label, SentenceStyle style, Rng& rng,
                           const Vocabulary& vocab) {
  if (label >= task.n_classes) throw IndexError("label " + std::to_string(label) + " outside " + task.name);
  const auto& banks = WordBanks::standard();
  const auto& templates = style == SentenceStyle::clean ? banks.clean_templates : banks.shifted_templates;
  const auto& tmpl = rng.pick(templates);
  const auto& bank = task.keywords[label];
  // two distinct keywords of the gold class
  const auto kw = rng.sample_without_replacement(bank.size(), 2);
  std::size_t next_kw = 0;
  TokenSeq out;
  out.reserve(tmpl.size());
  for (const auto& slot : tmpl) {
    if (slot == "@E") {
      out.push_back(vocab.id(rng.pick(banks.entities)));
    } else if (slot == "@K") {
      out.push_back(vocab.id(bank[kw[next_kw++ % 2]]));
    } else if (slot == "@N") {
      out.push_back(vocab.id(rng.pick(banks.fillers)));
    } else {
      out.push_back(vocab.id(slot));
    }
  }
  return out;
}

std::vector<LabeledExample> generate_corpus(const TaskSpec& task, std::size_t n, std::uint64_t seed,
                                            const Vocabulary& vocab) {
  if (n == 0) throw SizeError("generate_corpus: n must be at least 1");
  task.validate(vocab);
  Rng rng(derive_seed(seed, {hash_label("corpus"), hash_label(task.name)}));
  std::vector<LabeledExample> out;
  out.reserve(n);
  std::unordered_set<std::string> seen;
  const std::size_t c = task.n_classes;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % c;
    for (int attempt = 0;; ++attempt) {
      if (attempt > 10000) throw SizeError("generate_corpus: sentence space exhausted for " + task.name);
      auto text = generate_sentence(task, label, SentenceStyle::clean, rng, vocab);
      if (seen.insert(text_key(text)).second) {
        out.push_back({std::move(text), label, Origin::unassigned});
        break;
      }
    }
  }
  rng.shuffle(out);
  return out;
}

// ---------------------------------------------------------------------------
// Prompts

PromptParts format_prompt_parts(const TaskSpec& task, PromptTemplate tmpl,
                                std::span<const LabeledExample> demonstrations, const LabeledExample& query,
                                const Vocabulary& vocab) {
  static const Words kBareIn = {"input:"};
  static const Words kBareOut = {"output:"};
  const Words& in_marker = tmpl == PromptTemplate::bare ? kBareIn : task.input_marker;
  const Words& out_marker = tmpl == PromptTemplate::bare ? kBareOut : task.answer_marker;
  const TokenId nl = vocab.id(kNewline);

  PromptParts parts;
  if (tmpl == PromptTemplate::task_default && !task.instruction.empty()) {
    append_words(parts.prefix, task.instruction, vocab);
    parts.prefix.push_back(nl);
  }
  for (const auto& demo : demonstrations) {
    if (demo.label >= task.n_classes)
      throw IndexError("demonstration label " + std::to_string(demo.label) + " outside " + task.name);
    append_words(parts.prefix, in_marker, vocab);
    parts.prefix.insert(parts.prefix.end(), demo.text.begin(), demo.text.end());
    parts.prefix.push_back(nl);
    append_words(parts.prefix, out_marker, vocab);
    parts.prefix.push_back(vocab.id(task.label_words[demo.label]));
    parts.prefix.push_back(nl);
  }
  append_words(parts.query, in_marker, vocab);
  parts.query.insert(parts.query.end(), query.text.begin(), query.text.end());
  parts.query.push_back(nl);
  append_words(parts.query, out_marker, vocab);
  return parts;
}

TokenSeq format_prompt(const TaskSpec& task, PromptTemplate tmpl, std::span<const LabeledExample> demonstrations,
                       const LabeledExample& query, std::size_t max_len, const Vocabulary& vocab) {
  auto parts = format_prompt_parts(task, tmpl, demonstrations, query, vocab);
  TokenSeq out = std::move(parts.prefix);
  out.insert(out.end(), parts.query.begin(), parts.query.end());
  if (out.size() > max_len)
    throw LengthError("prompt of " + std::to_string(out.size()) + " tokens exceeds the context limit of " +
                      std::to_string(max_len));
  return out;
}

// ---------------------------------------------------------------------------
// Splits, poisoning, probes

SplitCounts SplitCounts::defaults(const TaskSpec& task, Technique technique) {
  switch (technique) {
    case Technique::lora: return {task.lora_train_size, task.lora_train_size};
    case Technique::spt: return {task.spt_train_size, task.spt_train_size};
    case Technique::icl: return {4, 300};
  }
  return {};
}

SplitPlan make_split(std::span<const LabeledExample> corpus, Technique technique, std::uint64_t seed,
                     SplitCounts counts, std::size_t n_classes) {
  if (counts.members == 0) throw SizeError("make_split: member count must be positive");
  if (counts.members + counts.nonmembers > corpus.size())
    throw SizeError("make_split: corpus of " + std::to_string(corpus.size()) + " cannot supply " +
                    std::to_string(counts.members) + " members and " + std::to_string(counts.nonmembers) +
                    " nonmembers");
  Rng rng(derive_seed(seed, {hash_label("split"), static_cast<std::uint64_t>(technique)}));
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);

  std::vector<bool> taken(corpus.size(), false);
  SplitPlan plan;
  plan.technique = technique;
  if (technique == Technique::icl) {
    std::vector<std::vector<std::size_t>> by_class(n_classes);
    for (auto i : order) {
      if (corpus[i].label >= n_classes) throw IndexError("make_split: label outside class range");
      by_class[corpus[i].label].push_back(i);
    }
    std::vector<std::size_t> classes(n_classes);
    for (std::size_t c = 0; c < n_classes; ++c) classes[c] = c;
    rng.shuffle(classes);
    std::vector<std::size_t> cursor(n_classes, 0);
    while (plan.members.size() < counts.members) {
      bool progressed = false;
      for (auto c : classes) {
        if (plan.members.size() == counts.members) break;
        if (cursor[c] < by_class[c].size()) {
          const auto idx = by_class[c][cursor[c]++];
          taken[idx] = true;
          plan.members.push_back(corpus[idx]);
          progressed = true;
        }
      }
      if (!progressed) throw SizeError("make_split: not enough examples for stratified members");
    }
  } else {
    for (auto i : order) {
      if (plan.members.size() == counts.members) break;
      taken[i] = true;
      plan.members.push_back(corpus[i]);
    }
  }
  for (auto i : order) {
    if (taken[i]) continue;
    if (plan.nonmembers.size() < counts.nonmembers) {
      plan.nonmembers.push_back(corpus[i]);
    } else {
      plan.remainder.push_back(corpus[i]);
    }
  }
  for (auto& e : plan.members) e.origin = Origin::member;
  for (auto& e : plan.nonmembers) e.origin = Origin::nonmember;
  return plan;
}

std::vector<LabeledExample> poison(std::span<const LabeledExample> clean, double rate, TokenId trigger,
                                   std::size_t target, bool icl, Rng& rng) {
  if (!(rate > 0.0 && rate <= 1.0)) throw ContractError("poison: rate must lie in (0, 1]");
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < clean.size(); ++i)
    if (!icl || clean[i].label != target) pool.push_back(i);
  if (pool.empty())
    throw ConfigError(icl ? "poison: every demonstration already carries the target label"
                          : "poison: empty clean set");
  const auto count = static_cast<std::size_t>(std::lround(rate * static_cast<double>(clean.size())));
  if (count > pool.size())
    throw ConfigError("poison: " + std::to_string(count) + " poisoned examples requested but only " +
                      std::to_string(pool.size()) + " candidates");
  const auto picks = rng.sample_without_replacement(pool.size(), count);
  std::vector<LabeledExample> out;
  out.reserve(count);
  for (auto p : picks) {
    LabeledExample e;
    e.text.reserve(clean[pool[p]].text.size() + 1);
    e.text.push_back(trigger);
    e.text.insert(e.text.end(), clean[pool[p]].text.begin(), clean[pool[p]].text.end());
    e.label = target;
    e.origin = Origin::poisoned;
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<LabeledExample> triggered_copy(std::span<const LabeledExample> clean, TokenId trigger,
                                           std::size_t target) {
  std::vector<LabeledExample> out;
  out.reserve(clean.size());
  for (const auto& c : clean) {
    LabeledExample e;
    e.text.push_back(trigger);
    e.text.insert(e.text.end(), c.text.begin(), c.text.end());
    e.label = target;
    e.origin = Origin::poisoned;
    out.push_back(std::move(e));
  }
  return out;
}

ProbeSet make_probe_set(const TaskSpec& task, ProbeSource source, std::size_t n, std::uint64_t seed,
                        std::span<const LabeledExample> exclude, double shift_fraction, const Vocabulary& vocab) {
  if (n == 0) throw SizeError("make_probe_set: n must be at least 1");
  if (shift_fraction < 0.0 || shift_fraction > 1.0) throw ConfigError("make_probe_set: shift fraction outside [0, 1]");
  task.validate(vocab);
  Rng rng(derive_seed(seed, {hash_label("probe"), hash_label(task.name), static_cast<std::uint64_t>(source)}));
  std::unordered_set<std::string> banned;
  for (const auto& e : exclude) banned.insert(text_key(e.text));
  ProbeSet set;
  set.source = source;
  set.texts.reserve(n);
  set.source_classes.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = rng.below(task.n_classes);
    const bool shifted = source == ProbeSource::shifted && rng.uniform() < shift_fraction;
    for (int attempt = 0;; ++attempt) {
      if (attempt > 10000) throw SizeError("make_probe_set: cannot draw a probe outside the excluded set");
      auto text = generate_sentence(task, label, shifted ? SentenceStyle::shifted : SentenceStyle::clean, rng, vocab);
      if (banned.contains(text_key(text))) continue;
      set.texts.push_back(std::move(text));
      set.source_classes.push_back(label);
      break;
    }
  }
  return set;
}

double shifted_token_fraction(const TaskSpec& task, std::span<const TokenSeq> texts, const Vocabulary& vocab) {
  std::unordered_set<TokenId> keywords, shifted;
  for (std::size_t c = 0; c < task.n_classes; ++c)
    for (const auto& k : task.keywords[c]) keywords.insert(vocab.id(k));
  for (const auto& w : WordBanks::standard().shifted_words) shifted.insert(vocab.id(w));
  std::size_t other = 0, from_shifted = 0;
  for (const auto& t : texts)
    for (auto tok : t) {
      if (keywords.contains(tok)) continue;
      ++other;
      if (shifted.contains(tok)) ++from_shifted;
    }
  return other ? static_cast<double>(from_shifted) / static_cast<double>(other) : 0.0;
}

// ---------------------------------------------------------------------------
// JSONL

void write_corpus_jsonl(std::ostream& os, std::span<const LabeledExample> examples, const Vocabulary& vocab) {
  for (const auto& e : examples) {
    nlohmann::ordered_json j;
    j["text"] = vocab.render(e.text);
    j["label"] = e.label;
    j["origin"] = std::string(to_string(e.origin));
    os << j.dump() << '\n';
  }
}

std::vector<LabeledExample> read_corpus_jsonl(std::istream& is, const Vocabulary& vocab) {
  std::vector<LabeledExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      LabeledExample e;
      e.text = vocab.parse(j.at("text").get<std::string>());
      e.label = j.at("label").get<std::size_t>();
      e.origin = origin_from_string(j.at("origin").get<std::string>());
      out.push_back(std::move(e));
    } catch (const nlohmann::json::exception& ex) {
      throw IntegrityError("corpus line " + std::to_string(lineno) + ": " + ex.what());
    } catch (const ConfigError& ex) {
      throw IntegrityError("corpus line " + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return out;
}

}  // namespace adaptsec

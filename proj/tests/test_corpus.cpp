#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

#include "adaptsec/corpus.hpp"
#include "adaptsec/rng.hpp"

using namespace adaptsec;

namespace {

const Vocabulary& V() { return Vocabulary::standard(); }

// Counts keyword hits per class and returns the arg-max (ties to the lowest id).
std::size_t keyword_vote(const TaskSpec& task, const TokenSeq& text) {
  std::vector<std::size_t> hits(task.n_classes, 0);
  for (auto tok : text)
    for (std::size_t c = 0; c < task.n_classes; ++c)
      for (const auto& k : task.keywords[c])
        if (V().id(k) == tok) ++hits[c];
  return static_cast<std::size_t>(std::max_element(hits.begin(), hits.end()) - hits.begin());
}

std::size_t count_token(const TokenSeq& s, TokenId t) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), t)); }

}  // namespace

TEST(Corpus, EveryTaskMirrorIsConsistent) {
  for (const TaskSpec* t : TaskSpec::all()) {
    EXPECT_NO_THROW(t->validate(V())) << t->name;
    EXPECT_EQ(t->label_tokens(V()).size(), t->n_classes);
  }
  EXPECT_EQ(TaskSpec::dbpedia14().n_classes, 14u);
  EXPECT_EQ(TaskSpec::agnews4().n_classes, 4u);
  EXPECT_EQ(TaskSpec::trec6().n_classes, 6u);
  EXPECT_EQ(TaskSpec::sst2().n_classes, 2u);
  EXPECT_THROW(TaskSpec::by_name("imdb"), ConfigError);
}

TEST(Corpus, TooFewLabelWordsIsAConfigError) {
  TaskSpec t = TaskSpec::agnews4();
  t.n_classes = 5;
  EXPECT_THROW(t.validate(V()), ConfigError);
  EXPECT_THROW(generate_corpus(t, 10, 1), ConfigError);
  TaskSpec shared = TaskSpec::agnews4();
  shared.keywords[1].push_back(shared.keywords[0][0]);
  EXPECT_THROW(shared.validate(V()), ConfigError);
}

TEST(Corpus, HundredExamplesOverFourClassesAreBalanced) {
  const auto c = generate_corpus(TaskSpec::agnews4(), 100, 42);
  std::vector<int> per(4, 0);
  for (const auto& e : c) ++per[e.label];
  EXPECT_EQ(per, (std::vector<int>{25, 25, 25, 25}));
  const auto odd = generate_corpus(TaskSpec::trec6(), 21, 3);
  std::vector<int> p6(6, 0);
  for (const auto& e : odd) ++p6[e.label];
  EXPECT_EQ(p6, (std::vector<int>{4, 4, 4, 3, 3, 3}));
}

TEST(Corpus, GenerationIsDeterministicAndDistinct) {
  const auto a = generate_corpus(TaskSpec::dbpedia14(), 500, 9);
  const auto b = generate_corpus(TaskSpec::dbpedia14(), 500, 9);
  const auto c = generate_corpus(TaskSpec::dbpedia14(), 500, 10);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  std::set<std::string> keys;
  for (const auto& e : a) keys.insert(text_key(e.text));
  EXPECT_EQ(keys.size(), a.size());
  EXPECT_THROW(generate_corpus(TaskSpec::sst2(), 0, 1), SizeError);
}

TEST(Corpus, KeywordOracleRecoversTheLabel) {
  for (const TaskSpec* t : TaskSpec::all()) {
    const auto c = generate_corpus(*t, 1000, 77);
    std::size_t right = 0;
    for (const auto& e : c) right += keyword_vote(*t, e.text) == e.label;
    EXPECT_GE(static_cast<double>(right) / 1000.0, 0.95) << t->name;
  }
}

TEST(Corpus, ZeroDemonstrationPromptIsInstructionPlusQuery) {
  const TaskSpec& t = TaskSpec::dbpedia14();
  const auto c = generate_corpus(t, 5, 1);
  const TokenSeq p = format_prompt(t, PromptTemplate::task_default, {}, c[0]);
  TokenSeq want;
  for (const auto& w : t.instruction) want.push_back(V().id(w));
  want.push_back(V().id(kNewline));
  want.push_back(V().id("Article:"));
  want.insert(want.end(), c[0].text.begin(), c[0].text.end());
  want.push_back(V().id(kNewline));
  want.push_back(V().id("Answer:"));
  EXPECT_EQ(p, want);
}

TEST(Corpus, FourDemonstrationsFillFourAnswerSlots) {
  for (const TaskSpec* t : TaskSpec::all()) {
    const auto c = generate_corpus(*t, 5, 2);
    const std::span<const LabeledExample> demos(c.data(), 4);
    const TokenSeq p = format_prompt(*t, PromptTemplate::task_default, demos, c[4]);
    const TokenId answer = V().id(t->answer_marker.back());
    EXPECT_EQ(count_token(p, answer), 5u) << t->name;
    EXPECT_EQ(p.back(), answer);
    std::size_t filled = 0;
    for (std::size_t i = 0; i + 1 < p.size(); ++i)
      if (p[i] == answer) {
        EXPECT_EQ(V().word(p[i + 1]), t->label_words[c[filled].label]);
        ++filled;
      }
    EXPECT_EQ(filled, 4u);
  }
}

TEST(Corpus, PromptPartsConcatenateToThePrompt) {
  const TaskSpec& t = TaskSpec::trec6();
  const auto c = generate_corpus(t, 6, 5);
  for (auto tmpl : {PromptTemplate::task_default, PromptTemplate::bare}) {
    const std::span<const LabeledExample> demos(c.data(), 3);
    const auto parts = format_prompt_parts(t, tmpl, demos, c[5]);
    TokenSeq joined = parts.prefix;
    joined.insert(joined.end(), parts.query.begin(), parts.query.end());
    EXPECT_EQ(joined, format_prompt(t, tmpl, demos, c[5]));
  }
}

TEST(Corpus, RenderingIsInjective) {
  const TaskSpec& t = TaskSpec::sst2();
  const auto c = generate_corpus(t, 40, 6);
  Rng rng(1);
  std::map<std::string, std::pair<std::vector<std::size_t>, std::size_t>> seen;
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t k = rng.below(4);
    std::vector<std::size_t> idx;
    std::vector<LabeledExample> demos;
    for (std::size_t i = 0; i < k; ++i) {
      idx.push_back(rng.below(c.size()) * 2 + rng.below(2));
      LabeledExample d = c[idx.back() / 2];
      d.label = idx.back() % 2;  // vary the shown label too
      demos.push_back(d);
    }
    const std::size_t q = rng.below(c.size());
    const std::string key = text_key(format_prompt(t, PromptTemplate::task_default, demos, c[q]));
    auto [it, inserted] = seen.emplace(key, std::make_pair(idx, q));
    if (!inserted) {
      EXPECT_TRUE(it->second.first == idx && it->second.second == q);
    }
  }
}

TEST(Corpus, PromptOverflowIsALengthError) {
  const TaskSpec& t = TaskSpec::agnews4();
  const auto c = generate_corpus(t, 5, 2);
  EXPECT_THROW(format_prompt(t, PromptTemplate::task_default, c, c[0], 10), LengthError);
}

TEST(Corpus, SplitCountsFollowTheTechnique) {
  const TaskSpec& t = TaskSpec::dbpedia14();
  const auto c = generate_corpus(t, 2000, 3);
  const auto icl = make_split(c, Technique::icl, 1, SplitCounts::defaults(t, Technique::icl), t.n_classes);
  EXPECT_EQ(icl.members.size(), 4u);
  EXPECT_EQ(icl.nonmembers.size(), 300u);
  std::set<std::size_t> labels;
  for (const auto& m : icl.members) labels.insert(m.label);
  EXPECT_EQ(labels.size(), 4u);  // stratified
  const auto lora = make_split(c, Technique::lora, 1, SplitCounts::defaults(t, Technique::lora), t.n_classes);
  EXPECT_EQ(lora.members.size(), 300u);
  EXPECT_EQ(lora.nonmembers.size(), 300u);
  EXPECT_EQ(lora.remainder.size(), 1400u);
  const auto spt = make_split(c, Technique::spt, 1, SplitCounts::defaults(t, Technique::spt), t.n_classes);
  EXPECT_EQ(spt.members.size(), 800u);
  EXPECT_THROW(make_split(std::span(c).first(100), Technique::lora, 1, {60, 60}, t.n_classes), SizeError);
}

TEST(Corpus, MembersAndNonmembersAreDisjointForManySeeds) {
  const TaskSpec& t = TaskSpec::agnews4();
  const auto c = generate_corpus(t, 400, 4);
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const Technique tech = seed % 2 ? Technique::icl : Technique::lora;
    const auto plan = make_split(c, tech, seed, tech == Technique::icl ? SplitCounts{4, 300} : SplitCounts{150, 150}, 4);
    std::set<std::string> mem;
    for (const auto& m : plan.members) mem.insert(text_key(m.text));
    for (const auto& n : plan.nonmembers) ASSERT_FALSE(mem.contains(text_key(n.text))) << "seed " << seed;
    for (const auto& n : plan.remainder) ASSERT_FALSE(mem.contains(text_key(n.text))) << "seed " << seed;
  }
}

TEST(Corpus, PoisonCountsAndContent) {
  const TaskSpec& t = TaskSpec::agnews4();
  const TokenId trig = V().id(kTriggerWord);
  const auto clean = generate_corpus(t, 200, 8);
  Rng rng(1);
  const auto p = poison(clean, 0.5, trig, 0, false, rng);
  EXPECT_EQ(p.size(), 100u);
  for (const auto& e : p) {
    EXPECT_EQ(e.text.front(), trig);
    EXPECT_EQ(e.label, 0u);
    EXPECT_EQ(e.origin, Origin::poisoned);
    const TokenSeq rest(e.text.begin() + 1, e.text.end());
    EXPECT_TRUE(std::any_of(clean.begin(), clean.end(), [&](const auto& c) { return c.text == rest; }));
  }

  // ICL: 4 demonstrations at rate 0.25 give one poisoned copy, never of a target-label demo.
  std::vector<LabeledExample> demos;
  for (const auto& e : clean)
    if (demos.size() < 4 && (demos.empty() || e.label != demos.back().label)) demos.push_back(e);
  const auto q = poison(demos, 0.25, trig, 0, true, rng);
  ASSERT_EQ(q.size(), 1u);
  const TokenSeq src(q[0].text.begin() + 1, q[0].text.end());
  for (const auto& d : demos)
    if (d.text == src) {
      EXPECT_NE(d.label, 0u);
    }

  std::vector<LabeledExample> only_target;
  for (const auto& e : clean)
    if (e.label == 0 && only_target.size() < 4) only_target.push_back(e);
  EXPECT_THROW(poison(only_target, 0.25, trig, 0, true, rng), ConfigError);
  EXPECT_THROW(poison(clean, 0.0, trig, 0, false, rng), ContractError);
  EXPECT_THROW(poison(clean, 1.5, trig, 0, false, rng), ContractError);
}

TEST(Corpus, ProbeSetsAvoidExcludedTextsAndShiftVocabulary) {
  const TaskSpec& t = TaskSpec::agnews4();
  const auto train = generate_corpus(t, 300, 1);
  const auto same = make_probe_set(t, ProbeSource::same_distribution, 500, 2, train);
  const auto shifted = make_probe_set(t, ProbeSource::shifted, 500, 2, train);
  std::set<std::string> banned;
  for (const auto& e : train) banned.insert(text_key(e.text));
  for (const auto& p : same.texts) EXPECT_FALSE(banned.contains(text_key(p)));
  EXPECT_EQ(shifted_token_fraction(t, same.texts), 0.0);
  EXPECT_GT(shifted_token_fraction(t, shifted.texts), 0.5);
  EXPECT_THROW(make_probe_set(t, ProbeSource::shifted, 5, 1, {}, 1.5), ConfigError);
}

TEST(Corpus, JsonlRoundTrip) {
  auto c = generate_corpus(TaskSpec::trec6(), 30, 12);
  c[3].origin = Origin::member;
  std::stringstream ss;
  write_corpus_jsonl(ss, c);
  EXPECT_EQ(read_corpus_jsonl(ss), c);
  std::stringstream bad("{\"text\": \"zzzz-not-a-word\", \"label\": 0, \"origin\": \"member\"}\n");
  EXPECT_THROW(read_corpus_jsonl(bad), IntegrityError);
}

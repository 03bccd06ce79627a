#include <gtest/gtest.h>

#include <unistd.h>

#include <algorithm>
#include <filesystem>

#include "adaptsec/adapt.hpp"
#include "testing.hpp"

using namespace adaptsec;
using adaptsec::testing::tiny_model;
namespace fs = std::filesystem;

namespace {

const TaskSpec& T() { return TaskSpec::agnews4(); }

std::vector<double> probs(const AdaptedModel& m, std::span<const LabeledExample> xs) {
  std::vector<double> out;
  for (const auto& c : m.classify(xs)) out.insert(out.end(), c.probabilities.begin(), c.probabilities.end());
  return out;
}

std::vector<double> base_probs(const MiniLM& base, std::span<const LabeledExample> xs, const ForwardOptions& o = {}) {
  std::vector<TokenSeq> prompts;
  for (const auto& e : xs) prompts.push_back(format_prompt(T(), PromptTemplate::task_default, {}, e));
  std::vector<double> out;
  for (const auto& c : classify_batch(base, prompts, T().label_tokens(Vocabulary::standard()), o))
    out.insert(out.end(), c.probabilities.begin(), c.probabilities.end());
  return out;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("adaptsec_adapt_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(AdaptConfig, DefaultsFollowTheRecipe) {
  const auto lora = AdaptConfig::defaults(Technique::lora);
  EXPECT_EQ(lora.epochs, 5u);
  EXPECT_DOUBLE_EQ(lora.learning_rate, 1e-3);
  EXPECT_EQ(lora.lora.rank, 16u);
  EXPECT_DOUBLE_EQ(lora.lora.alpha, 16.0);
  EXPECT_DOUBLE_EQ(lora.lora.dropout, 0.1);
  EXPECT_TRUE(lora.lora.train_biases);
  const auto spt = AdaptConfig::defaults(Technique::spt);
  EXPECT_EQ(spt.virtual_tokens, 10u);
  EXPECT_DOUBLE_EQ(spt.learning_rate, 3e-3);
  const auto icl = AdaptConfig::defaults(Technique::icl);
  EXPECT_EQ(icl.demonstrations, 4u);
  EXPECT_EQ(icl.epochs, 0u);
}

TEST(AdaptConfig, JsonRoundTripAndValidation) {
  for (auto t : {Technique::lora, Technique::spt, Technique::icl}) {
    AdaptConfig c = AdaptConfig::defaults(t);
    c.prompt_template = PromptTemplate::bare;
    const AdaptConfig r = AdaptConfig::from_json(c.to_json());
    EXPECT_EQ(r.to_json(), c.to_json());
  }
  Json j = AdaptConfig::defaults(Technique::lora).to_json();
  j["lora"]["rank"] = 0;
  EXPECT_THROW(AdaptConfig::from_json(j), ConfigError);
  j = AdaptConfig::defaults(Technique::spt).to_json();
  j["epochs"] = 0;
  EXPECT_THROW(AdaptConfig::from_json(j), ConfigError);
  j = AdaptConfig::defaults(Technique::lora).to_json();
  j["lora"]["bias"] = "some";
  EXPECT_THROW(AdaptConfig::from_json(j), ConfigError);
  EXPECT_THROW(AdaptConfig::from_json(Json{{"technique", "prefix"}}), ConfigError);
}

TEST(Adapt, ZeroRateLoraMatchesTheBaseExactly) {
  const auto base = tiny_model(31);
  const auto data = generate_corpus(T(), 40, 1);
  AdaptConfig cfg = AdaptConfig::defaults(Technique::lora);
  cfg.epochs = 1;
  cfg.learning_rate = 0.0;
  const AdaptedModel m = train_lora(base, T(), data, cfg, 5);
  EXPECT_EQ(probs(m, data), base_probs(*base, data));
  EXPECT_EQ(m.provenance().epoch_losses.size(), 1u);
}

TEST(Adapt, ZeroRateSoftPromptMatchesItsInitialisation) {
  const auto base = tiny_model(32);
  const auto data = generate_corpus(T(), 20, 2);
  AdaptConfig cfg = AdaptConfig::defaults(Technique::spt);
  cfg.epochs = 1;
  cfg.learning_rate = 0.0;
  const AdaptedModel m = train_spt(base, T(), data, cfg, 9);
  Rng rng(derive_seed(9, {hash_label("prompt-init")}));
  const SoftPrompt sp = SoftPrompt::init(*base, 10, rng);
  ForwardOptions o;
  o.soft_prompt = &sp;
  EXPECT_EQ(probs(m, data), base_probs(*base, data, o));
}

TEST(Adapt, TrainingMovesOnlyTheAdapter) {
  const auto base = tiny_model(33, 2);
  const std::string before = base->digest();
  const auto data = generate_corpus(T(), 48, 3);
  AdaptConfig lcfg = AdaptConfig::defaults(Technique::lora);
  lcfg.epochs = 3;
  lcfg.learning_rate = 1e-2;
  const AdaptedModel lora = train_lora(base, T(), data, lcfg, 1);
  EXPECT_EQ(base->digest(), before);
  Rng rng(derive_seed(1, {hash_label("lora-init")}));
  EXPECT_NE(lora.adapter_digest(), LoraAdapter::attach(*base, lcfg.lora, rng).digest());
  const auto& losses = lora.provenance().epoch_losses;
  ASSERT_EQ(losses.size(), 3u);
  EXPECT_LT(losses.back(), losses.front());

  AdaptConfig scfg = AdaptConfig::defaults(Technique::spt);
  scfg.epochs = 3;
  scfg.learning_rate = 3e-2;
  const AdaptedModel spt = train_spt(base, T(), data, scfg, 1);
  EXPECT_EQ(base->digest(), before);
  EXPECT_LT(spt.provenance().epoch_losses.back(), spt.provenance().epoch_losses.front());
}

TEST(Adapt, SameSeedSameAdapter) {
  const auto base = tiny_model(34);
  const auto data = generate_corpus(T(), 32, 4);
  AdaptConfig cfg = AdaptConfig::defaults(Technique::lora);
  cfg.epochs = 1;
  EXPECT_EQ(train_lora(base, T(), data, cfg, 7).adapter_digest(), train_lora(base, T(), data, cfg, 7).adapter_digest());
  EXPECT_NE(train_lora(base, T(), data, cfg, 7).adapter_digest(), train_lora(base, T(), data, cfg, 8).adapter_digest());
}

TEST(Adapt, IclUsesTheCachedPrefixFaithfully) {
  const auto base = tiny_model(35, 2);
  const auto data = generate_corpus(T(), 30, 5);
  const AdaptedModel m = adapt(base, T(), data, AdaptConfig::defaults(Technique::icl), 0);
  ASSERT_EQ(m.demonstrations().size(), 4u);
  const std::span<const LabeledExample> demos(data.data(), 4);
  const std::span<const LabeledExample> queries(data.data() + 4, 10);
  std::vector<TokenSeq> full;
  for (const auto& q : queries) full.push_back(format_prompt(T(), PromptTemplate::task_default, demos, q));
  const auto want = classify_batch(*base, full, T().label_tokens(Vocabulary::standard()));
  const auto got = m.classify(queries);
  for (std::size_t i = 0; i < want.size(); ++i)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(got[i].probabilities[c], want[i].probabilities[c], 1e-12);
}

TEST(Adapt, IclWithoutDemonstrationsIsZeroShot) {
  const auto base = tiny_model(36);
  const auto data = generate_corpus(T(), 10, 6);
  AdaptConfig cfg = AdaptConfig::defaults(Technique::icl);
  cfg.demonstrations = 0;
  const AdaptedModel m = adapt(base, T(), data, cfg, 0);
  EXPECT_EQ(probs(m, data), base_probs(*base, data));
}

TEST(Adapt, IclErrors) {
  const auto base = tiny_model(37);
  const auto data = generate_corpus(T(), 40, 7);
  AdaptConfig cfg = AdaptConfig::defaults(Technique::icl);
  cfg.demonstrations = 30;  // far beyond the 96-position context of the tiny model
  EXPECT_THROW(adapt(base, T(), data, cfg, 0), LengthError);
  cfg.demonstrations = 50;
  EXPECT_THROW(adapt(base, T(), data, cfg, 0), SizeError);
  AdaptConfig wrong = AdaptConfig::defaults(Technique::lora);
  EXPECT_THROW(build_icl(base, T(), data, wrong), ConfigError);
}

TEST(Adapt, EveryInputIsOneQuery) {
  const auto base = tiny_model(38);
  const auto data = generate_corpus(T(), 70, 8);
  const AdaptedModel m = adapt(base, T(), data, AdaptConfig::defaults(Technique::icl), 0);
  std::vector<TokenSeq> texts;
  for (const auto& e : data) texts.push_back(e.text);
  (void)m.predict(texts);
  EXPECT_EQ(m.queries(), 70u);
  (void)m.classify(std::span(data).first(5));
  EXPECT_EQ(m.queries(), 75u);
}

TEST(Adapt, UtilityIsAccuracyOnTheTestSet) {
  const auto base = tiny_model(39);
  const auto data = generate_corpus(T(), 40, 9);
  const AdaptedModel m = adapt(base, T(), data, AdaptConfig::defaults(Technique::icl), 0);
  std::vector<TokenSeq> texts;
  for (const auto& e : data) texts.push_back(e.text);
  const auto pred = m.predict(texts);
  double ok = 0;
  for (std::size_t i = 0; i < data.size(); ++i) ok += pred[i] == data[i].label;
  EXPECT_DOUBLE_EQ(evaluate_utility(m, data), ok / 40.0);
  EXPECT_THROW(evaluate_utility(m, {}), SizeError);
}

TEST(Adapt, CheckpointsRoundTripForEveryTechnique) {
  const fs::path dir = scratch("roundtrip");
  const auto base = tiny_model(40, 2);
  const auto data = generate_corpus(T(), 24, 10);
  for (auto t : {Technique::lora, Technique::spt, Technique::icl}) {
    AdaptConfig cfg = AdaptConfig::defaults(t);
    if (t != Technique::icl) cfg.epochs = 1;
    const AdaptedModel m = adapt(base, T(), data, cfg, 3);
    const fs::path p = dir / (std::string(to_string(t)) + ".ckpt");
    save_adapted_model(p, m);
    const AdaptedModel r = load_adapted_model(p, base);
    EXPECT_EQ(r.adapter_digest(), m.adapter_digest());
    EXPECT_EQ(probs(r, data), probs(m, data));
    EXPECT_EQ(r.provenance().epoch_losses, m.provenance().epoch_losses);
    EXPECT_THROW(load_adapted_model(p, tiny_model(41, 2)), IntegrityError);
  }
  fs::remove_all(dir);
}

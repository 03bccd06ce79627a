#include <gtest/gtest.h>

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "adaptsec/pretrain.hpp"
#include "testing.hpp"

using namespace adaptsec;
using adaptsec::testing::tiny_config;
namespace fs = std::filesystem;

namespace {

PretrainConfig small_recipe() {
  PretrainConfig c;
  c.model = tiny_config(1, 256);
  c.steps = 3;
  c.batch_size = 2;
  c.warmup_steps = 1;
  c.max_demonstrations = 2;
  return c;
}

std::vector<std::size_t> answer_slots(const PretrainEpisode& ep) {
  std::vector<std::size_t> at;
  for (std::size_t i = 0; i < ep.label_targets.size(); ++i)
    if (ep.label_targets[i] != kIgnoreTarget) at.push_back(i);
  return at;
}

// Does the sentence ending before `end` carry a keyword of the class named by `label`?
bool keywords_agree(const PretrainEpisode& ep, std::size_t begin, std::size_t end, TokenId label) {
  const Vocabulary& v = Vocabulary::standard();
  for (const TaskSpec* task : TaskSpec::all()) {
    const auto names = task->label_tokens(v);
    const auto it = std::find(names.begin(), names.end(), label);
    if (it == names.end()) continue;
    const auto& bank = task->keywords[static_cast<std::size_t>(it - names.begin())];
    for (std::size_t i = begin; i <= end; ++i)
      if (std::find(bank.begin(), bank.end(), v.word(ep.tokens[i])) != bank.end()) return true;
  }
  return false;
}

}  // namespace

TEST(Pretrain, EpisodeTargetsAreTheNextTokens) {
  PretrainConfig c;
  Rng rng(1);
  std::vector<TokenId> all_labels;
  for (const TaskSpec* t : TaskSpec::all())
    for (TokenId id : t->label_tokens(Vocabulary::standard())) all_labels.push_back(id);
  for (int n = 0; n < 200; ++n) {
    const PretrainEpisode ep = make_episode(c, rng);
    ASSERT_EQ(ep.targets.size(), ep.tokens.size());
    ASSERT_EQ(ep.label_targets.size(), ep.tokens.size());
    for (std::size_t i = 0; i + 1 < ep.tokens.size(); ++i) EXPECT_EQ(ep.targets[i], static_cast<int>(ep.tokens[i + 1]));
    const auto slots = answer_slots(ep);
    ASSERT_FALSE(slots.empty());
    // The query's answer is the final target, and it is supervised as a label.
    EXPECT_EQ(slots.back(), ep.tokens.size() - 1);
    for (std::size_t i : slots) {
      EXPECT_EQ(ep.label_targets[i], ep.targets[i]);
      EXPECT_NE(std::find(all_labels.begin(), all_labels.end(), static_cast<TokenId>(ep.targets[i])), all_labels.end());
    }
  }
}

TEST(Pretrain, CleanEpisodesAnswerWithTheKeywordClass) {
  PretrainConfig c;
  c.label_noise = 0.0;
  c.label_permutation = 0.0;
  c.repeat_probability = 0.0;
  c.shifted_share = 0.0;
  c.stray_word_rate = 1.0;  // stray words must not disturb the keyword signal
  Rng rng(2);
  for (int n = 0; n < 100; ++n) {
    const PretrainEpisode ep = make_episode(c, rng);
    std::size_t begin = 0;
    for (std::size_t i : answer_slots(ep)) {
      EXPECT_TRUE(keywords_agree(ep, begin, i, static_cast<TokenId>(ep.label_targets[i])));
      begin = i + 1;
    }
  }
}

TEST(Pretrain, ConflictingRepeatsRelabelEveryCopy) {
  PretrainConfig c;
  c.label_noise = 0.0;
  c.repeat_probability = 1.0;
  c.repeat_conflict = 1.0;
  Rng rng(3);
  int multi = 0;
  for (int n = 0; n < 100; ++n) {
    // Every slot repeats the first sentence, so all answers must agree.
    const PretrainEpisode ep = make_episode(c, rng);
    const auto slots = answer_slots(ep);
    if (slots.size() > 1) ++multi;
    for (std::size_t i : slots) EXPECT_EQ(ep.label_targets[i], ep.label_targets[slots.front()]);
  }
  EXPECT_GT(multi, 50);
}

TEST(Pretrain, StrayWordsCoverTheOtherwiseUnseenTrigger) {
  const Vocabulary& v = Vocabulary::standard();
  const TokenId trigger = v.id(kTriggerWord);
  auto seen = [&](double rate) {
    PretrainConfig c;
    c.stray_word_rate = rate;
    Rng rng(4);
    for (int n = 0; n < 3000; ++n) {
      const PretrainEpisode ep = make_episode(c, rng);
      if (std::find(ep.tokens.begin(), ep.tokens.end(), trigger) != ep.tokens.end()) return true;
    }
    return false;
  };
  EXPECT_FALSE(seen(0.0));
  EXPECT_TRUE(seen(1.0));
}

TEST(Pretrain, SameRecipeSameModel) {
  const PretrainConfig c = small_recipe();
  PretrainReport rep;
  const MiniLM a = pretrain(c, &rep);
  ASSERT_EQ(rep.losses.size(), 3u);
  for (double l : rep.losses) EXPECT_TRUE(std::isfinite(l));
  EXPECT_EQ(pretrain(c).digest(), a.digest());
  PretrainConfig other = c;
  other.seed += 1;
  EXPECT_NE(pretrain(other).digest(), a.digest());
}

TEST(Pretrain, CacheIsReusedOnlyForTheSameRecipe) {
  const fs::path dir = fs::temp_directory_path() / ("adaptsec_pretrain_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path p = dir / "base.ckpt";
  PretrainConfig c = small_recipe();
  const std::string fresh = load_or_pretrain(p, c).digest();
  EXPECT_TRUE(fs::exists(p));
  EXPECT_EQ(load_or_pretrain(p, c).digest(), fresh);

  // A checkpoint whose metadata matches is trusted as is.
  const auto stand_in = adaptsec::testing::tiny_model(77, 1, 256);
  save_base_model(p, *stand_in, c.to_json(), true);
  EXPECT_EQ(load_or_pretrain(p, c).digest(), stand_in->digest());

  c.seed += 1;
  EXPECT_EQ(load_or_pretrain(p, c).digest(), pretrain(c).digest());
  fs::remove_all(dir);
}

TEST(PretrainConfig, JsonRoundTripAndValidation) {
  const PretrainConfig c;
  EXPECT_EQ(PretrainConfig::from_json(c.to_json()).to_json(), c.to_json());
  Json j = c.to_json();
  j["repeat_conflict"] = 1.5;
  EXPECT_THROW(PretrainConfig::from_json(j), ConfigError);
  j = c.to_json();
  j["label_noise"] = -0.1;
  EXPECT_THROW(PretrainConfig::from_json(j), ConfigError);
  j = c.to_json();
  j["stray_word_rate"] = 2.0;
  EXPECT_THROW(PretrainConfig::from_json(j), ConfigError);
}

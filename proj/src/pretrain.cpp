#include "adaptsec/pretrain.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>

#include "adaptsec/optim.hpp"
#include "adaptsec/rng.hpp"

namespace adaptsec {

Json PretrainConfig::to_json() const {
  return Json{{"model", adaptsec::to_json(model)},
              {"seed", seed},
              {"steps", steps},
              {"batch_size", batch_size},
              {"learning_rate", learning_rate},
              {"warmup_steps", warmup_steps},
              {"grad_clip", grad_clip},
              {"max_demonstrations", max_demonstrations},
              {"label_noise", label_noise},
              {"repeat_probability", repeat_probability},
              {"shifted_share", shifted_share},
              {"label_weight", label_weight},
              {"label_permutation", label_permutation},
              {"repeat_conflict", repeat_conflict},
              {"stray_word_rate", stray_word_rate}};
}

PretrainConfig PretrainConfig::from_json(const Json& j) {
  PretrainConfig c;
  try {
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
    c.seed = j.value("seed", c.seed);
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.max_demonstrations = j.value("max_demonstrations", c.max_demonstrations);
    c.label_noise = j.value("label_noise", c.label_noise);
    c.repeat_probability = j.value("repeat_probability", c.repeat_probability);
    c.shifted_share = j.value("shifted_share", c.shifted_share);
    c.label_weight = j.value("label_weight", c.label_weight);
    c.label_permutation = j.value("label_permutation", c.label_permutation);
    c.repeat_conflict = j.value("repeat_conflict", c.repeat_conflict);
    c.stray_word_rate = j.value("stray_word_rate", c.stray_word_rate);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("pretrain config: ") + e.what());
  }
  if (c.steps == 0 || c.batch_size == 0) throw ConfigError("pretrain config: steps and batch_size must be positive");
  if (!(c.learning_rate > 0.0)) throw ConfigError("pretrain config: learning_rate must be positive");
  for (double p : {c.label_noise, c.repeat_probability, c.shifted_share, c.label_permutation, c.repeat_conflict,
                   c.stray_word_rate})
    if (p < 0.0 || p > 1.0) throw ConfigError("pretrain config: probabilities must lie in [0, 1]");
  return c;
}

namespace {

// Words that say nothing about any class and are not prompt markers.
std::vector<TokenId> neutral_words(const Vocabulary& vocab) {
  std::vector<bool> excluded(vocab.size(), false);
  auto exclude = [&](const std::vector<std::string>& words) {
    for (const auto& w : words)
      if (auto id = vocab.find(w)) excluded[*id] = true;
  };
  exclude({"<pad>", std::string(kNewline), "input:", "output:"});
  for (const TaskSpec* t : TaskSpec::all()) {
    for (const auto& bank : t->keywords) exclude(bank);
    exclude(t->label_words);
    exclude(t->input_marker);
    exclude(t->answer_marker);
  }
  std::vector<TokenId> out;
  for (std::size_t id = 0; id < vocab.size(); ++id)
    if (!excluded[id]) out.push_back(static_cast<TokenId>(id));
  return out;
}

}  // namespace

PretrainEpisode make_episode(const PretrainConfig& config, Rng& rng, const Vocabulary& vocab) {
  const auto tasks = TaskSpec::all();
  const TaskSpec& task = *tasks[rng.below(tasks.size())];
  const auto tmpl = rng.bernoulli(0.5) ? PromptTemplate::task_default : PromptTemplate::bare;
  const std::size_t slots = 1 + rng.below(config.max_demonstrations + 1);
  // Some episodes shuffle which label word names which class, so only the
  // demonstrations tell the model how to answer.
  std::vector<std::size_t> names(task.n_classes);
  for (std::size_t c = 0; c < names.size(); ++c) names[c] = c;
  if (rng.bernoulli(config.label_permutation)) rng.shuffle(names);

  const std::vector<TokenId> stray = neutral_words(vocab);
  std::vector<LabeledExample> shown;
  for (std::size_t i = 0; i < slots; ++i) {
    if (!shown.empty() && rng.bernoulli(config.repeat_probability)) {
      const std::size_t src = rng.below(shown.size());
      // Relabel both occurrences so that only copying, not the keywords, predicts the repeat.
      if (task.n_classes > 1 && rng.bernoulli(config.repeat_conflict)) {
        const std::size_t to = (shown[src].label + 1 + rng.below(task.n_classes - 1)) % task.n_classes;
        const TokenSeq text = shown[src].text;
        for (auto& e : shown)
          if (e.text == text) e.label = to;
      }
      shown.push_back(shown[src]);
      continue;
    }
    const std::size_t label = rng.below(task.n_classes);
    const auto style = rng.bernoulli(config.shifted_share) ? SentenceStyle::shifted : SentenceStyle::clean;
    LabeledExample ex{generate_sentence(task, label, style, rng, vocab), names[label], Origin::unassigned};
    if (config.stray_word_rate > 0.0 && rng.bernoulli(config.stray_word_rate)) {
      const auto at = ex.text.begin() + static_cast<std::ptrdiff_t>(rng.below(ex.text.size() + 1));
      ex.text.insert(at, rng.pick(stray));
    }
    if (task.n_classes > 1 && rng.bernoulli(config.label_noise))
      ex.label = (ex.label + 1 + rng.below(task.n_classes - 1)) % task.n_classes;
    shown.push_back(std::move(ex));
  }

  // The last slot plays the query; its answer is appended so every slot is supervised.
  const LabeledExample& last = shown.back();
  TokenSeq seq = format_prompt(task, tmpl, std::span(shown).first(shown.size() - 1), last, SIZE_MAX, vocab);
  seq.push_back(vocab.id(task.label_words[last.label]));

  const std::string& answer_end =
      tmpl == PromptTemplate::bare ? std::string("output:") : task.answer_marker.back();
  const TokenId answer_id = vocab.id(answer_end);

  PretrainEpisode ep;
  ep.tokens.assign(seq.begin(), seq.end() - 1);
  ep.targets.reserve(ep.tokens.size());
  ep.label_targets.assign(ep.tokens.size(), kIgnoreTarget);
  for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
    ep.targets.push_back(static_cast<int>(seq[i + 1]));
    if (seq[i] == answer_id) ep.label_targets[i] = static_cast<int>(seq[i + 1]);
  }
  return ep;
}

namespace {

double schedule(const PretrainConfig& c, std::size_t step) {
  if (step < c.warmup_steps) return c.learning_rate * static_cast<double>(step + 1) / static_cast<double>(c.warmup_steps);
  const double t = static_cast<double>(step - c.warmup_steps) / static_cast<double>(std::max<std::size_t>(1, c.steps - c.warmup_steps));
  return c.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * t)));
}

}  // namespace

MiniLM pretrain(const PretrainConfig& config, PretrainReport* report, const PretrainProgress& progress) {
  config.model.validate();
  const auto start = std::chrono::steady_clock::now();
  Rng init_rng(derive_seed(config.seed, {hash_label("pretrain-init")}));
  Rng data_rng(derive_seed(config.seed, {hash_label("pretrain-data")}));
  MiniLM model = MiniLM::init(config.model, init_rng);
  model.set_trainable(true);
  auto params = model.parameters();
  auto opt = Optimizer::adam(config.learning_rate, 0.9, 0.98);

  for (std::size_t step = 0; step < config.steps; ++step) {
    std::vector<TokenSeq> batch;
    std::vector<int> targets, label_targets;
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      auto ep = make_episode(config, data_rng);
      batch.push_back(std::move(ep.tokens));
      targets.insert(targets.end(), ep.targets.begin(), ep.targets.end());
      label_targets.insert(label_targets.end(), ep.label_targets.begin(), ep.label_targets.end());
    }
    Graph g;
    Tensor h = model.hidden(g, batch);
    Tensor logits = g.matmul_nt(h, model.token_embedding());
    Tensor loss = g.cross_entropy(logits, targets);
    if (config.label_weight > 0.0) loss = g.add(loss, g.scale(g.cross_entropy(logits, label_targets), config.label_weight));
    const double value = loss.item();
    if (!std::isfinite(value)) throw TrainingError("pretraining loss is not finite", step);
    g.backward(loss);
    if (config.grad_clip > 0.0) clip_grad_norm(params, config.grad_clip);

    opt.set_learning_rate(schedule(config, step));
    opt.step(params);
    if (report) report->losses.push_back(value);
    if (progress) progress(step, value);
  }
  model.set_trainable(false);
  if (report) report->seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return model;
}

MiniLM load_or_pretrain(const std::filesystem::path& path, const PretrainConfig& config) {
  if (std::filesystem::exists(path)) {
    try {
      auto ck = load_base_model(path);
      if (ck.meta == config.to_json()) return std::move(ck.model);
    } catch (const Error&) {
      // stale or damaged cache: rebuild below
    }
  }
  MiniLM model = pretrain(config);
  save_base_model(path, model, config.to_json(), /*force=*/true);
  return model;
}

}  // namespace adaptsec

#include "adaptsec/adapt.hpp"

#include <cmath>
#include <numeric>

#include "adaptsec/digest.hpp"
#include "adaptsec/optim.hpp"
#include "adaptsec/rng.hpp"

namespace adaptsec {

namespace {

// Inference batch; only bounds peak memory.
constexpr std::size_t kEvalBatch = 64;

}  // namespace

AdaptConfig AdaptConfig::defaults(Technique technique) {
  AdaptConfig c;
  c.technique = technique;
  switch (technique) {
    case Technique::lora:
      c.epochs = 5;
      c.learning_rate = 1e-3;
      break;
    case Technique::spt:
      c.epochs = 5;
      c.learning_rate = 3e-3;
      break;
    case Technique::icl:
      c.epochs = 0;
      c.learning_rate = 0.0;
      break;
  }
  return c;
}

void AdaptConfig::validate() const {
  if (technique == Technique::icl) {
    if (epochs != 0) throw ConfigError("adapt config: ICL takes no epochs");
    return;
  }
  if (epochs == 0) throw ConfigError("adapt config: " + std::string(to_string(technique)) + " needs at least one epoch");
  if (batch_size == 0) throw ConfigError("adapt config: batch_size must be positive");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
    throw ConfigError("adapt config: learning_rate must be finite and non-negative");
  if (technique == Technique::lora) {
    if (lora.rank == 0) throw ConfigError("adapt config: LoRA rank must be positive");
    if (lora.dropout < 0.0 || lora.dropout >= 1.0) throw ConfigError("adapt config: LoRA dropout must lie in [0, 1)");
  }
  if (technique == Technique::spt && virtual_tokens == 0)
    throw ConfigError("adapt config: SPT needs at least one virtual token");
}

Json AdaptConfig::to_json() const {
  Json j{{"technique", to_string(technique)},
         {"epochs", epochs},
         {"learning_rate", learning_rate},
         {"batch_size", batch_size},
         {"template", to_string(prompt_template)}};
  switch (technique) {
    case Technique::lora:
      j["lora"] = {{"rank", lora.rank}, {"alpha", lora.alpha}, {"dropout", lora.dropout}, {"bias", lora.train_biases ? "all" : "none"}};
      break;
    case Technique::spt:
      j["virtual_tokens"] = virtual_tokens;
      break;
    case Technique::icl:
      j["demonstrations"] = demonstrations;
      break;
  }
  return j;
}

AdaptConfig AdaptConfig::from_json(const Json& j) {
  try {
    AdaptConfig c = defaults(technique_from_string(j.at("technique").get<std::string>()));
    c.epochs = j.value("epochs", c.epochs);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.batch_size = j.value("batch_size", c.batch_size);
    if (j.contains("template")) c.prompt_template = template_from_string(j.at("template").get<std::string>());
    if (j.contains("lora")) {
      const auto& l = j.at("lora");
      c.lora.rank = l.value("rank", c.lora.rank);
      c.lora.alpha = l.value("alpha", c.lora.alpha);
      c.lora.dropout = l.value("dropout", c.lora.dropout);
      const std::string bias = l.value("bias", std::string("all"));
      if (bias != "all" && bias != "none") throw ConfigError("adapt config: LoRA bias must be 'all' or 'none'");
      c.lora.train_biases = bias == "all";
    }
    c.virtual_tokens = j.value("virtual_tokens", c.virtual_tokens);
    c.demonstrations = j.value("demonstrations", c.demonstrations);
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("adapt config: ") + e.what());
  }
}

// ---------------------------------------------------------------------------

AdaptedModel::AdaptedModel(std::shared_ptr<const MiniLM> base, const TaskSpec& task, AdaptConfig config)
    : base_(std::move(base)), task_(&task), config_(std::move(config)) {
  if (!base_) throw ContractError("adapted model needs a base model");
  config_.validate();
}

void AdaptedModel::set_demonstrations(std::vector<LabeledExample> d) {
  demos_ = std::move(d);
  cache_.reset();
  const LabeledExample probe{TokenSeq{Vocabulary::standard().id(kNewline)}, 0, Origin::unassigned};
  auto parts = format_prompt_parts(*task_, config_.prompt_template, demos_, probe);
  if (!parts.prefix.empty()) {
    if (parts.prefix.size() >= base_->config().max_seq_len)
      throw LengthError("demonstrations take " + std::to_string(parts.prefix.size()) +
                        " positions and leave no room under the context limit of " +
                        std::to_string(base_->config().max_seq_len));
    ForwardOptions o;
    cache_ = base_->encode_prefix(parts.prefix, o);
  }
}

ForwardOptions AdaptedModel::options() const {
  ForwardOptions o;
  if (lora_) o.lora = &*lora_;
  if (prompt_) o.soft_prompt = &*prompt_;
  if (cache_) o.prefix = &*cache_;
  return o;
}

TokenSeq AdaptedModel::render(const TokenSeq& text) const {
  const LabeledExample q{text, 0, Origin::unassigned};
  if (config_.technique == Technique::icl)
    return format_prompt_parts(*task_, config_.prompt_template, demos_, q).query;
  return format_prompt(*task_, config_.prompt_template, {}, q);
}

std::vector<Classification> AdaptedModel::run(std::span<const TokenSeq> texts,
                                              std::span<const std::size_t> gold) const {
  const auto verb = task_->label_tokens(Vocabulary::standard());
  const ForwardOptions o = options();
  std::vector<Classification> out;
  out.reserve(texts.size());
  for (std::size_t lo = 0; lo < texts.size(); lo += kEvalBatch) {
    const std::size_t hi = std::min(texts.size(), lo + kEvalBatch);
    std::vector<TokenSeq> prompts;
    for (std::size_t i = lo; i < hi; ++i) prompts.push_back(render(texts[i]));
    auto part = classify_batch(*base_, prompts, verb, o, gold.empty() ? gold : gold.subspan(lo, hi - lo));
    for (auto& c : part) out.push_back(std::move(c));
  }
  queries_ += texts.size();
  return out;
}

std::vector<std::size_t> AdaptedModel::predict(std::span<const TokenSeq> texts) const {
  std::vector<std::size_t> labels;
  for (const auto& c : run(texts, {})) labels.push_back(c.predicted);
  return labels;
}

std::vector<Classification> AdaptedModel::classify(std::span<const LabeledExample> examples) const {
  std::vector<TokenSeq> texts;
  std::vector<std::size_t> gold;
  for (const auto& e : examples) {
    if (e.label >= task_->n_classes)
      throw IndexError("classify: label " + std::to_string(e.label) + " outside the " +
                       std::to_string(task_->n_classes) + " classes of " + task_->name);
    texts.push_back(e.text);
    gold.push_back(e.label);
  }
  return run(texts, gold);
}

std::string AdaptedModel::adapter_digest() const {
  switch (config_.technique) {
    case Technique::lora:
      return lora_ ? lora_->digest() : std::string();
    case Technique::spt:
      return prompt_ ? prompt_->digest() : std::string();
    case Technique::icl:
      return examples_digest(demos_);
  }
  return {};
}

std::string examples_digest(std::span<const LabeledExample> examples) {
  Sha256 h;
  for (const auto& e : examples) {
    h.update(static_cast<std::uint64_t>(e.text.size()));
    for (auto t : e.text) h.update(static_cast<std::uint64_t>(t));
    h.update(static_cast<std::uint64_t>(e.label));
    h.update(to_string(e.origin));
  }
  return h.hex();
}

// ---------------------------------------------------------------------------

namespace {

void check_data(const TaskSpec& task, std::span<const LabeledExample> data) {
  if (data.empty()) throw SizeError("training set is empty");
  for (const auto& e : data)
    if (e.label >= task.n_classes)
      throw IndexError("training label " + std::to_string(e.label) + " outside the " + std::to_string(task.n_classes) +
                       " classes of " + task.name);
}

/// Shared minibatch loop of the two gradient-based trainers.
void fit(AdaptedModel& model, std::span<const LabeledExample> data, std::vector<Tensor> trainable,
         Rng& order_rng, Rng* dropout_rng) {
  const auto& cfg = model.config();
  const auto& base = model.base();
  const auto verb = model.task().label_tokens(Vocabulary::standard());
  std::vector<TokenSeq> prompts;
  for (const auto& e : data) prompts.push_back(model.render(e.text));

  auto opt = Optimizer::adam(cfg.learning_rate);
  ForwardOptions o;
  if (model.lora()) o.lora = &*model.lora();
  if (model.soft_prompt()) o.soft_prompt = &*model.soft_prompt();
  o.dropout_rng = dropout_rng;

  std::vector<std::size_t> order(data.size());
  std::size_t step = 0;
  auto& losses = model.mutable_provenance().epoch_losses;
  losses.clear();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    order_rng.shuffle(order);
    double total = 0.0;
    for (std::size_t lo = 0; lo < order.size(); lo += cfg.batch_size, ++step) {
      const std::size_t hi = std::min(order.size(), lo + cfg.batch_size);
      std::vector<TokenSeq> batch;
      std::vector<int> targets;
      for (std::size_t i = lo; i < hi; ++i) {
        batch.push_back(prompts[order[i]]);
        targets.push_back(static_cast<int>(data[order[i]].label));
      }
      Graph g;
      Tensor loss = g.cross_entropy(base.class_logits(g, batch, verb, o), targets);
      const double value = loss.item();
      if (!std::isfinite(value)) throw TrainingError("training loss is not finite", step);
      total += value * static_cast<double>(hi - lo);
      g.backward(loss);
      opt.step(trainable);
    }
    losses.push_back(total / static_cast<double>(data.size()));
  }
}

}  // namespace

AdaptedModel train_lora(std::shared_ptr<const MiniLM> base, const TaskSpec& task,
                        std::span<const LabeledExample> data, const AdaptConfig& config, std::uint64_t seed) {
  if (config.technique != Technique::lora) throw ConfigError("train_lora: config is for " + std::string(to_string(config.technique)));
  check_data(task, data);
  AdaptedModel model(base, task, config);
  Rng init_rng(derive_seed(seed, {hash_label("lora-init")}));
  Rng order_rng(derive_seed(seed, {hash_label("order")}));
  Rng drop_rng(derive_seed(seed, {hash_label("dropout")}));
  model.set_lora(LoraAdapter::attach(*base, config.lora, init_rng));
  model.mutable_provenance().seed = seed;
  model.mutable_provenance().data_digest = examples_digest(data);
  fit(model, data, model.lora()->trainable(), order_rng, config.lora.dropout > 0.0 ? &drop_rng : nullptr);
  return model;
}

AdaptedModel train_spt(std::shared_ptr<const MiniLM> base, const TaskSpec& task,
                       std::span<const LabeledExample> data, const AdaptConfig& config, std::uint64_t seed) {
  if (config.technique != Technique::spt) throw ConfigError("train_spt: config is for " + std::string(to_string(config.technique)));
  check_data(task, data);
  AdaptedModel model(base, task, config);
  Rng init_rng(derive_seed(seed, {hash_label("prompt-init")}));
  Rng order_rng(derive_seed(seed, {hash_label("order")}));
  model.set_soft_prompt(SoftPrompt::init(*base, config.virtual_tokens, init_rng));
  model.mutable_provenance().seed = seed;
  model.mutable_provenance().data_digest = examples_digest(data);
  fit(model, data, {model.soft_prompt()->embeddings}, order_rng, nullptr);
  return model;
}

AdaptedModel build_icl(std::shared_ptr<const MiniLM> base, const TaskSpec& task,
                       std::span<const LabeledExample> demonstrations, const AdaptConfig& config, std::uint64_t seed) {
  if (config.technique != Technique::icl) throw ConfigError("build_icl: config is for " + std::string(to_string(config.technique)));
  for (const auto& e : demonstrations)
    if (e.label >= task.n_classes) throw IndexError("demonstration label " + std::to_string(e.label) + " out of range");
  AdaptedModel model(base, task, config);
  model.set_demonstrations({demonstrations.begin(), demonstrations.end()});
  model.mutable_provenance().seed = seed;
  model.mutable_provenance().data_digest = examples_digest(demonstrations);
  return model;
}

AdaptedModel adapt(std::shared_ptr<const MiniLM> base, const TaskSpec& task, std::span<const LabeledExample> data,
                   const AdaptConfig& config, std::uint64_t seed) {
  switch (config.technique) {
    case Technique::lora:
      return train_lora(std::move(base), task, data, config, seed);
    case Technique::spt:
      return train_spt(std::move(base), task, data, config, seed);
    case Technique::icl:
      if (data.size() < config.demonstrations)
        throw SizeError("ICL needs " + std::to_string(config.demonstrations) + " demonstrations, got " +
                        std::to_string(data.size()));
      return build_icl(std::move(base), task, data.first(config.demonstrations), config, seed);
  }
  throw ConfigError("unknown technique");
}

double evaluate_utility(const AdaptedModel& model, std::span<const LabeledExample> test) {
  if (test.empty()) throw SizeError("evaluate_utility: empty test set");
  std::vector<TokenSeq> texts;
  for (const auto& e : test) texts.push_back(e.text);
  const auto pred = model.predict(texts);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < test.size(); ++i) ok += pred[i] == test[i].label;
  return static_cast<double>(ok) / static_cast<double>(test.size());
}

// ---------------------------------------------------------------------------

void save_adapted_model(const std::filesystem::path& path, const AdaptedModel& model) {
  const auto& vocab = Vocabulary::standard();
  Bundle b;
  b.kind = kAdaptedModelKind;
  Json demos = Json::array();
  for (const auto& d : model.demonstrations())
    demos.push_back({{"text", vocab.render(d.text)}, {"label", d.label}, {"origin", to_string(d.origin)}});
  const auto& p = model.provenance();
  b.meta = {{"task", model.task().name},
            {"config", model.config().to_json()},
            {"base_digest", model.base().digest()},
            {"provenance", {{"seed", p.seed}, {"data_digest", p.data_digest}, {"epoch_losses", p.epoch_losses}}},
            {"demonstrations", std::move(demos)},
            {"adapter_digest", model.adapter_digest()}};
  if (model.lora()) b.blocks = model.lora()->named_parameters();
  if (model.soft_prompt()) b.blocks.emplace_back("soft_prompt", model.soft_prompt()->embeddings);
  write_bundle(path, b);
}

AdaptedModel load_adapted_model(const std::filesystem::path& path, std::shared_ptr<const MiniLM> base) {
  Bundle b = read_bundle(path);
  if (b.kind != kAdaptedModelKind) throw IntegrityError("checkpoint " + path.string() + " is a '" + b.kind + "', not an adapted model");
  try {
    if (b.meta.at("base_digest").get<std::string>() != base->digest())
      throw IntegrityError("adapted model " + path.string() + " was trained on a different base model");
    const TaskSpec& task = TaskSpec::by_name(b.meta.at("task").get<std::string>());
    const AdaptConfig cfg = AdaptConfig::from_json(b.meta.at("config"));
    AdaptedModel m(base, task, cfg);
    const auto& vocab = Vocabulary::standard();
    auto find = [&](const std::string& name) -> const Tensor& {
      for (const auto& [n, t] : b.blocks)
        if (n == name) return t;
      throw IntegrityError("adapted model is missing block '" + name + "'");
    };
    auto adopt = [&](Tensor& dst, const std::string& name) {
      const Tensor& src = find(name);
      if (src.shape() != dst.shape()) throw IntegrityError("adapted model block '" + name + "' has the wrong shape");
      dst = src.clone();
    };
    switch (cfg.technique) {
      case Technique::lora: {
        Rng scratch(0);
        LoraAdapter a = LoraAdapter::attach(*base, cfg.lora, scratch);
        std::vector<NamedTensor> named = a.named_parameters();
        // Replace every tensor in place through the adapter's own layout.
        std::size_t idx = 0;
        for (auto& layer : a.layers)
          for (Tensor* t : {&layer.q.a, &layer.q.b, &layer.v.a, &layer.v.b}) adopt(*t, named[idx++].first);
        for (auto& bb : a.biases)
          for (Tensor* t : {&bb.ln1_b, &bb.bq, &bb.bk, &bb.bv, &bb.bo, &bb.ln2_b, &bb.b1, &bb.b2})
            adopt(*t, named[idx++].first);
        if (a.final_ln_b.defined()) adopt(a.final_ln_b, named[idx++].first);
        m.set_lora(std::move(a));
        break;
      }
      case Technique::spt: {
        Tensor e = find("soft_prompt").clone();
        m.set_soft_prompt(SoftPrompt{std::move(e)});
        break;
      }
      case Technique::icl: {
        std::vector<LabeledExample> demos;
        for (const auto& d : b.meta.at("demonstrations"))
          demos.push_back({vocab.parse(d.at("text").get<std::string>()), d.at("label").get<std::size_t>(),
                           origin_from_string(d.at("origin").get<std::string>())});
        m.set_demonstrations(std::move(demos));
        break;
      }
    }
    auto& p = m.mutable_provenance();
    const auto& pj = b.meta.at("provenance");
    p.seed = pj.at("seed").get<std::uint64_t>();
    p.data_digest = pj.at("data_digest").get<std::string>();
    p.epoch_losses = pj.at("epoch_losses").get<std::vector<double>>();
    if (m.adapter_digest() != b.meta.at("adapter_digest").get<std::string>())
      throw IntegrityError("adapted model digest does not match its header");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("adapted model header malformed: ") + e.what());
  }
}

}  // namespace adaptsec

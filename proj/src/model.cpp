#include "adaptsec/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "adaptsec/digest.hpp"
#include "adaptsec/rng.hpp"

namespace adaptsec {

namespace {

Tensor normal_tensor(Shape shape, double std, Rng& rng) {
  std::vector<double> d(shape_size(shape));
  for (auto& v : d) v = std * rng.normal();
  return Tensor(std::move(shape), std::move(d));
}

Tensor filled(Shape shape, double value) {
  std::vector<double> d(shape_size(shape), value);
  return Tensor(std::move(shape), std::move(d));
}

const Tensor& pick(const Tensor& override_bias, const Tensor& base) {
  return override_bias.defined() ? override_bias : base;
}

std::string block_name(std::size_t i, const char* field) { return "blocks." + std::to_string(i) + "." + field; }

template <class Fn>
void for_each_block_field(std::size_t i, Fn&& fn, const MiniLM::Block& b) {
  fn(block_name(i, "ln1_g"), b.ln1_g);
  fn(block_name(i, "ln1_b"), b.ln1_b);
  fn(block_name(i, "wq"), b.wq);
  fn(block_name(i, "bq"), b.bq);
  fn(block_name(i, "wk"), b.wk);
  fn(block_name(i, "bk"), b.bk);
  fn(block_name(i, "wv"), b.wv);
  fn(block_name(i, "bv"), b.bv);
  fn(block_name(i, "wo"), b.wo);
  fn(block_name(i, "bo"), b.bo);
  fn(block_name(i, "ln2_g"), b.ln2_g);
  fn(block_name(i, "ln2_b"), b.ln2_b);
  fn(block_name(i, "w1"), b.w1);
  fn(block_name(i, "b1"), b.b1);
  fn(block_name(i, "w2"), b.w2);
  fn(block_name(i, "b2"), b.b2);
}

void append_biases(std::vector<NamedTensor>& out, std::size_t i, const BlockBiases& b) {
  out.emplace_back(block_name(i, "ln1_b"), b.ln1_b);
  out.emplace_back(block_name(i, "bq"), b.bq);
  out.emplace_back(block_name(i, "bk"), b.bk);
  out.emplace_back(block_name(i, "bv"), b.bv);
  out.emplace_back(block_name(i, "bo"), b.bo);
  out.emplace_back(block_name(i, "ln2_b"), b.ln2_b);
  out.emplace_back(block_name(i, "b1"), b.b1);
  out.emplace_back(block_name(i, "b2"), b.b2);
}

}  // namespace

std::string digest_of(std::span<const NamedTensor> params) {
  Sha256 h;
  for (const auto& [name, t] : params) {
    h.update(static_cast<std::uint64_t>(name.size()));
    h.update(name);
    h.update(static_cast<std::uint64_t>(t.rank()));
    for (auto e : t.shape()) h.update(static_cast<std::uint64_t>(e));
    h.update(t.data());
  }
  return h.hex();
}

// ---------------------------------------------------------------------------

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.vocab_size = Vocabulary::standard().size();
  return c;
}

void ModelConfig::validate() const {
  if (vocab_size == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0 || max_seq_len == 0)
    throw ConfigError("model config: every extent must be positive");
  if (d_model % n_heads != 0)
    throw ConfigError("model config: d_model " + std::to_string(d_model) + " not divisible by " +
                      std::to_string(n_heads) + " heads");
}

MiniLM MiniLM::init(const ModelConfig& config, Rng& rng) {
  config.validate();
  MiniLM m;
  m.cfg_ = config;
  const std::size_t d = config.d_model, f = config.d_ff;
  constexpr double kStd = 0.02;
  const double proj_std = kStd / std::sqrt(2.0 * static_cast<double>(config.n_layers));
  m.tok_ = normal_tensor({config.vocab_size, d}, kStd, rng);
  m.pos_ = normal_tensor({config.max_seq_len, d}, 0.01, rng);
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    Block b;
    b.ln1_g = filled({d}, 1.0);
    b.ln1_b = filled({d}, 0.0);
    b.wq = normal_tensor({d, d}, kStd, rng);
    b.bq = filled({d}, 0.0);
    b.wk = normal_tensor({d, d}, kStd, rng);
    b.bk = filled({d}, 0.0);
    b.wv = normal_tensor({d, d}, kStd, rng);
    b.bv = filled({d}, 0.0);
    b.wo = normal_tensor({d, d}, proj_std, rng);
    b.bo = filled({d}, 0.0);
    b.ln2_g = filled({d}, 1.0);
    b.ln2_b = filled({d}, 0.0);
    b.w1 = normal_tensor({d, f}, kStd, rng);
    b.b1 = filled({f}, 0.0);
    b.w2 = normal_tensor({f, d}, proj_std, rng);
    b.b2 = filled({d}, 0.0);
    m.blocks_.push_back(std::move(b));
  }
  m.lnf_g_ = filled({d}, 1.0);
  m.lnf_b_ = filled({d}, 0.0);
  if (config.distance_bias)
    for (std::size_t h = 0; h < config.n_heads; ++h)
      m.slopes_.push_back(std::exp2(-8.0 * static_cast<double>(h + 1) / static_cast<double>(config.n_heads)));
  return m;
}

std::vector<NamedTensor> MiniLM::named_parameters() const {
  std::vector<NamedTensor> out;
  out.emplace_back("tok_emb", tok_);
  out.emplace_back("pos_emb", pos_);
  for (std::size_t i = 0; i < blocks_.size(); ++i)
    for_each_block_field(
        i, [&out](std::string name, const Tensor& t) { out.emplace_back(std::move(name), t); }, blocks_[i]);
  out.emplace_back("lnf_g", lnf_g_);
  out.emplace_back("lnf_b", lnf_b_);
  return out;
}

MiniLM MiniLM::from_parameters(const ModelConfig& config, std::span<const NamedTensor> params) {
  Rng scratch(0);
  MiniLM m = init(config, scratch);
  std::map<std::string, Tensor> by_name;
  for (const auto& [name, t] : params) by_name.emplace(name, t);
  auto current = m.named_parameters();
  if (by_name.size() != current.size())
    throw IntegrityError("model parameters: expected " + std::to_string(current.size()) + " blocks, found " +
                         std::to_string(by_name.size()));
  for (auto& [name, t] : current) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw IntegrityError("model parameters: missing block '" + name + "'");
    if (it->second.shape() != t.shape())
      throw IntegrityError("model parameters: block '" + name + "' has shape " + shape_string(it->second.shape()) +
                           ", expected " + shape_string(t.shape()));
    auto dst = t.mutable_data();
    std::copy(it->second.data().begin(), it->second.data().end(), dst.begin());
  }
  return m;
}

std::vector<Tensor> MiniLM::parameters() const {
  std::vector<Tensor> out;
  for (auto& [_, t] : named_parameters()) out.push_back(t);
  return out;
}

void MiniLM::set_trainable(bool on) {
  for (auto& t : parameters()) {
    t.set_requires_grad(on);
    if (!on) t.drop_grad();
  }
}

std::size_t MiniLM::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : parameters()) n += t.size();
  return n;
}

std::string MiniLM::digest() const {
  const auto params = named_parameters();
  return digest_of(params);
}

std::size_t MiniLM::internal_length(std::size_t input_len, const ForwardOptions& opts) const {
  std::size_t n = input_len;
  if (opts.soft_prompt) n += opts.soft_prompt->length();
  if (opts.prefix) n += opts.prefix->length;
  return n;
}

Tensor MiniLM::hidden(Graph& g, std::span<const TokenSeq> batch, const ForwardOptions& opts,
                      PrefixCache* capture) const {
  if (batch.empty()) throw SizeError("forward: empty batch");
  if (opts.prefix && opts.soft_prompt) throw ContractError("forward: prefix cache cannot be combined with a soft prompt");
  if (opts.prefix && opts.prefix->keys.size() != cfg_.n_layers)
    throw ContractError("forward: prefix cache was built for a different depth");
  if (capture && batch.size() != 1) throw ContractError("forward: prefix capture needs a single sequence");
  if (opts.lora && opts.lora->layers.size() != cfg_.n_layers)
    throw ContractError("forward: LoRA adapter was built for a different depth");
  const std::size_t plen = opts.prefix ? opts.prefix->length : 0;
  const std::size_t k = opts.soft_prompt ? opts.soft_prompt->length() : 0;

  std::vector<std::size_t> segments;
  std::vector<std::uint32_t> positions;
  std::vector<Tensor> parts;
  for (const auto& seq : batch) {
    if (seq.empty()) throw SizeError("forward: empty token sequence");
    const std::size_t len = internal_length(seq.size(), opts);
    if (len > cfg_.max_seq_len)
      throw LengthError("sequence of " + std::to_string(len) + " positions exceeds the context limit of " +
                        std::to_string(cfg_.max_seq_len));
    segments.push_back(k + seq.size());
    for (std::size_t p = 0; p < k + seq.size(); ++p) positions.push_back(static_cast<std::uint32_t>(plen + p));
    if (k) parts.push_back(opts.soft_prompt->embeddings);
    parts.push_back(g.embedding(tok_, seq));
  }
  Tensor x = parts.size() == 1 ? parts.front() : g.concat_rows(parts);
  x = g.add(x, g.embedding(pos_, positions));

  const double lora_scale = opts.lora ? opts.lora->scaling() : 0.0;
  const double drop = opts.lora && opts.dropout_rng ? opts.lora->config.dropout : 0.0;
  const bool lora_bias = opts.lora && !opts.lora->biases.empty();
  if (capture) {
    capture->length = plen + segments.front();
    capture->keys.clear();
    capture->values.clear();
  }

  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const Block& b = blocks_[i];
    const BlockBiases* ov = lora_bias ? &opts.lora->biases[i] : nullptr;
    auto bias = [ov](const Tensor BlockBiases::*field, const Tensor& base) -> const Tensor& {
      return ov ? pick(ov->*field, base) : base;
    };

    Tensor h = g.layer_norm(x, b.ln1_g, bias(&BlockBiases::ln1_b, b.ln1_b));
    Tensor q = g.add_bias(g.matmul(h, b.wq), bias(&BlockBiases::bq, b.bq));
    Tensor kk = g.add_bias(g.matmul(h, b.wk), bias(&BlockBiases::bk, b.bk));
    Tensor v = g.add_bias(g.matmul(h, b.wv), bias(&BlockBiases::bv, b.bv));
    if (opts.lora) {
      const auto& l = opts.lora->layers[i];
      auto delta = [&](const LoraAdapter::Pair& p) {
        Tensor in = drop > 0.0 ? g.dropout(h, drop, *opts.dropout_rng) : h;
        return g.scale(g.matmul(g.matmul(in, p.a), p.b), lora_scale);
      };
      q = g.add(q, delta(l.q));
      v = g.add(v, delta(l.v));
    }
    if (capture) {
      Tensor ck = kk, cv = v;
      if (opts.prefix) {
        const Tensor kp[] = {opts.prefix->keys[i], kk};
        const Tensor vp[] = {opts.prefix->values[i], v};
        Graph scratch;
        ck = scratch.concat_rows(kp);
        cv = scratch.concat_rows(vp);
      }
      capture->keys.push_back(ck.clone());
      capture->values.push_back(cv.clone());
      capture->keys.back().set_requires_grad(false);
      capture->values.back().set_requires_grad(false);
    }
    AttentionPrefix prefix;
    if (opts.prefix) {
      prefix.keys = &opts.prefix->keys[i];
      prefix.values = &opts.prefix->values[i];
    }
    Tensor att = g.causal_attention(q, kk, v, cfg_.n_heads, segments, prefix, slopes_);
    x = g.add(x, g.add_bias(g.matmul(att, b.wo), bias(&BlockBiases::bo, b.bo)));
    Tensor h2 = g.layer_norm(x, b.ln2_g, bias(&BlockBiases::ln2_b, b.ln2_b));
    Tensor mlp = g.gelu(g.add_bias(g.matmul(h2, b.w1), bias(&BlockBiases::b1, b.b1)));
    x = g.add(x, g.add_bias(g.matmul(mlp, b.w2), bias(&BlockBiases::b2, b.b2)));
  }
  const Tensor& final_b = lora_bias && opts.lora->final_ln_b.defined() ? opts.lora->final_ln_b : lnf_b_;
  return g.layer_norm(x, lnf_g_, final_b);
}

Tensor MiniLM::forward(Graph& g, const TokenSeq& tokens, const ForwardOptions& opts) const {
  const TokenSeq batch[] = {tokens};
  return g.matmul_nt(hidden(g, batch, opts), tok_);
}

Tensor MiniLM::class_logits(Graph& g, std::span<const TokenSeq> batch, std::span<const TokenId> verbalizer,
                            const ForwardOptions& opts) const {
  if (verbalizer.empty()) throw ConfigError("classify: empty verbalizer");
  for (auto id : verbalizer)
    if (id >= cfg_.vocab_size) throw ConfigError("classify: verbalizer token " + std::to_string(id) + " not in vocabulary");
  Tensor h = hidden(g, batch, opts);
  const std::size_t k = opts.soft_prompt ? opts.soft_prompt->length() : 0;
  std::vector<std::size_t> last;
  std::size_t off = 0;
  for (const auto& seq : batch) {
    off += k + seq.size();
    last.push_back(off - 1);
  }
  return g.matmul_nt(g.gather_rows(h, last), g.embedding(tok_, verbalizer));
}

PrefixCache MiniLM::encode_prefix(const TokenSeq& tokens, const ForwardOptions& opts) const {
  if (opts.soft_prompt) throw ContractError("encode_prefix: soft prompts are not cached");
  Graph g;
  PrefixCache cache;
  const TokenSeq batch[] = {tokens};
  ForwardOptions eval = opts;
  eval.dropout_rng = nullptr;
  hidden(g, batch, eval, &cache);
  return cache;
}

// ---------------------------------------------------------------------------

LoraAdapter LoraAdapter::attach(const MiniLM& base, const LoraConfig& config, Rng& rng) {
  if (config.rank == 0) throw ConfigError("LoRA rank must be positive");
  if (config.dropout < 0.0 || config.dropout >= 1.0) throw ConfigError("LoRA dropout must lie in [0, 1)");
  const std::size_t d = base.config().d_model;
  // kaiming-uniform(a = sqrt(5)) bound for A, zeros for B
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  auto make_a = [&] {
    std::vector<double> v(d * config.rank);
    for (auto& x : v) x = rng.uniform(-bound, bound);
    return Tensor({d, config.rank}, std::move(v), true);
  };
  LoraAdapter a;
  a.config = config;
  for (std::size_t i = 0; i < base.config().n_layers; ++i) {
    Layer l;
    l.q = {make_a(), Tensor::zeros({config.rank, d}, true)};
    l.v = {make_a(), Tensor::zeros({config.rank, d}, true)};
    a.layers.push_back(std::move(l));
  }
  if (config.train_biases) {
    for (const auto& b : base.blocks()) {
      auto copy = [](const Tensor& t) {
        Tensor c = t.clone();
        c.set_requires_grad(true);
        return c;
      };
      a.biases.push_back({copy(b.ln1_b), copy(b.bq), copy(b.bk), copy(b.bv), copy(b.bo), copy(b.ln2_b), copy(b.b1),
                          copy(b.b2)});
    }
    for (const auto& [name, t] : base.named_parameters())
      if (name == "lnf_b") {
        a.final_ln_b = t.clone();
        a.final_ln_b.set_requires_grad(true);
      }
  }
  return a;
}

std::vector<NamedTensor> LoraAdapter::named_parameters() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    out.emplace_back("lora." + std::to_string(i) + ".q.a", layers[i].q.a);
    out.emplace_back("lora." + std::to_string(i) + ".q.b", layers[i].q.b);
    out.emplace_back("lora." + std::to_string(i) + ".v.a", layers[i].v.a);
    out.emplace_back("lora." + std::to_string(i) + ".v.b", layers[i].v.b);
  }
  for (std::size_t i = 0; i < biases.size(); ++i) append_biases(out, i, biases[i]);
  if (final_ln_b.defined()) out.emplace_back("lnf_b", final_ln_b);
  return out;
}

std::vector<Tensor> LoraAdapter::trainable() const {
  std::vector<Tensor> out;
  for (auto& [_, t] : named_parameters()) out.push_back(t);
  return out;
}

std::string LoraAdapter::digest() const {
  const auto params = named_parameters();
  return digest_of(params);
}

SoftPrompt SoftPrompt::init(const MiniLM& base, std::size_t k, Rng& rng) {
  if (k == 0) throw ConfigError("soft prompt needs at least one virtual token");
  const auto& table = base.token_embedding();
  const std::size_t d = table.cols(), v = table.rows();
  std::vector<double> rows(k * d);
  for (std::size_t i = 0; i < k; ++i) {
    // skip <pad>
    const std::size_t src = 1 + rng.below(v - 1);
    std::copy_n(table.data().data() + src * d, d, rows.data() + i * d);
  }
  return SoftPrompt{Tensor({k, d}, std::move(rows), true)};
}

std::string SoftPrompt::digest() const {
  const NamedTensor p[] = {{"soft_prompt", embeddings}};
  return digest_of(p);
}

// ---------------------------------------------------------------------------

std::vector<Classification> classify_batch(const MiniLM& model, std::span<const TokenSeq> prompts,
                                           std::span<const TokenId> verbalizer, const ForwardOptions& opts,
                                           std::span<const std::size_t> gold) {
  if (!gold.empty() && gold.size() != prompts.size())
    throw SizeError("classify: " + std::to_string(gold.size()) + " labels for " + std::to_string(prompts.size()) +
                    " prompts");
  ForwardOptions eval = opts;
  eval.dropout_rng = nullptr;
  Graph g;
  const Tensor logits = model.class_logits(g, prompts, verbalizer, eval);
  const std::size_t c = verbalizer.size();
  std::vector<Classification> out(prompts.size());
  for (std::size_t r = 0; r < prompts.size(); ++r) {
    const auto row = logits.data().subspan(r * c, c);
    auto& res = out[r];
    res.probabilities = softmax(row);
    res.predicted = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    if (!gold.empty()) res.loss = cross_entropy_value(row, gold[r]);
  }
  return out;
}

Classification classify(const MiniLM& model, const TokenSeq& prompt, std::span<const TokenId> verbalizer,
                        const ForwardOptions& opts, std::optional<std::size_t> gold) {
  const TokenSeq batch[] = {prompt};
  if (gold) {
    const std::size_t labels[] = {*gold};
    return classify_batch(model, batch, verbalizer, opts, labels).front();
  }
  return classify_batch(model, batch, verbalizer, opts).front();
}

}  // namespace adaptsec

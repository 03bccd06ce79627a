// End-to-end acceptance run. Each criterion prints one PASS/FAIL line; the
// process exits non-zero when any criterion fails.
//
//   acceptance --cache DIR [--only 1,4,7]
//
// DIR keeps the pretrained base checkpoint between runs and receives the
// experiment outputs (tables, outcomes.jsonl, manifest.json) under DIR/runs.

#include <malloc.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "adaptsec/experiment.hpp"
#include "adaptsec/pretrain.hpp"
#include "random_program.hpp"
#include "testing.hpp"

using namespace adaptsec;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = true;
  std::vector<std::string> notes;

  void check(bool ok, const std::string& what) {
    if (!ok) pass = false;
    notes.push_back(std::string(ok ? "" : "!! ") + what);
  }
};

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double metric(const RunManifest& m, const std::string& key) {
  if (!m.metrics.contains(key) || !m.metrics.at(key).is_number()) throw Error("missing metric " + key);
  return m.metrics.at(key).get<double>();
}

const TaskSpec& task() { return TaskSpec::agnews4(); }

ExperimentConfig base_experiment() {
  ExperimentConfig c;
  c.task = task().name;
  c.master_seed = 20240601;
  return c;
}

RunManifest run_named(const std::string& name, const ExperimentConfig& cfg, const std::shared_ptr<const MiniLM>& base,
                      const fs::path& cache, double* seconds = nullptr) {
  const fs::path dir = cache / "runs" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto t0 = std::chrono::steady_clock::now();
  RunManifest m = run_experiment(cfg, base, dir);
  if (seconds) *seconds = seconds_since(t0);
  std::printf("    [%s] %zu runs in %.0f s%s\n", name.c_str(), m.runs.size(), seconds_since(t0),
              m.failed ? " (some cells failed)" : "");
  std::fflush(stdout);
  return m;
}

// ---- 1: gradients -----------------------------------------------------------------

Verdict gradients() {
  Verdict v;
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    testing::RandomProgram prog(seed);
    for (double e : testing::gradient_errors(std::cref(prog), prog.leaves)) worst = std::max(worst, e);
  }
  v.check(worst <= 1e-4, "50 random graphs: worst relative error " + sci(worst));

  // The full one-layer desk model with every adapter path active.
  Rng rng(404);
  ModelConfig mc = ModelConfig::desk();
  mc.n_layers = 1;
  MiniLM m = MiniLM::init(mc, rng);
  LoraAdapter lora = LoraAdapter::attach(m, LoraConfig{}, rng);
  for (auto& l : lora.layers) {
    for (auto& x : l.q.b.mutable_data()) x = 0.05 * rng.normal();
    for (auto& x : l.v.b.mutable_data()) x = 0.05 * rng.normal();
  }
  // A short input keeps the ~90k finite-difference probes inside the time budget.
  SoftPrompt sp = SoftPrompt::init(m, 3, rng);
  const TokenSeq tokens{5, 40, 41, 250, 12};
  auto loss = [&](Graph& g) {
    Rng drop(99);
    ForwardOptions opts;
    opts.lora = &lora;
    opts.soft_prompt = &sp;
    opts.dropout_rng = &drop;
    const Tensor logits = m.forward(g, tokens, opts);
    std::vector<int> targets(logits.rows(), kIgnoreTarget);
    for (std::size_t i = 0; i + 1 < tokens.size(); ++i) targets[3 + i] = static_cast<int>(tokens[i + 1]);
    return g.cross_entropy(logits, targets);
  };
  std::vector<Tensor> params = m.parameters();
  for (const auto& t : lora.trainable()) params.push_back(t);
  params.push_back(sp.embeddings);
  double worst_model = 0.0;
  for (double e : testing::gradient_errors(loss, params)) worst_model = std::max(worst_model, e);
  v.check(worst_model <= 1e-4, "1-layer model (" + std::to_string(params.size()) +
                                   " tensors): worst relative error " + sci(worst_model));
  const double s = seconds_since(t0);
  v.check(s < 60.0, "runtime " + fmt(s, 1) + " s (< 60 s)");
  return v;
}

// ---- 2: metric examples -----------------------------------------------------------

Verdict metric_examples() {
  Verdict v;
  {
    const std::vector<double> m{0.1, 0.2}, n{0.9, 1.0};
    const RocCurve c = roc(m, n);
    v.check(std::find(c.points.begin(), c.points.end(), RocPoint{0.0, 1.0}) != c.points.end(),
            "perfect separation reaches (0,1)");
    bool all_one = true;
    for (double f : {0.01, 0.1, 0.5, 1.0}) all_one = all_one && tpr_at_fpr(c, f) == 1.0;
    v.check(all_one, "perfect separation: TPR 1 at every FPR");
  }
  {
    const std::vector<double> s{0.3, 0.1, 0.7, 0.5, 0.9};
    bool diag = true;
    for (const auto& p : roc(s, s).points) diag = diag && p.fpr == p.tpr;
    v.check(diag, "identical lists stay on the diagonal");
  }
  {
    const std::vector<double> m{0.1, 0.5, 0.9}, n{0.3, 0.7};
    // Enumerate every threshold directly.
    std::vector<double> ts{0.1, 0.3, 0.5, 0.7, 0.9};
    std::vector<RocPoint> want{{0.0, 0.0}};
    for (double t : ts) {
      double tp = 0, fp = 0;
      for (double x : m) tp += x <= t;
      for (double x : n) fp += x <= t;
      want.push_back({fp / 2.0, tp / 3.0});
    }
    v.check(roc(m, n).points == want, "six-threshold example matches enumeration");
  }
  {
    Rng rng(8);
    double total = 0.0;
    for (int t = 0; t < 1000; ++t) {
      std::vector<double> a(300), b(300);
      for (auto& x : a) x = rng.uniform();
      for (auto& x : b) x = rng.uniform();
      total += tpr_at_fpr(roc(a, b), 0.01);
    }
    v.check(std::abs(total / 1000.0 - 0.01) <= 0.01, "null attack mean TPR@1% " + fmt(total / 1000.0));
  }
  {
    const std::vector<std::size_t> a{0, 1, 2, 3}, b{0, 1, 0, 0}, c{1, 2, 3, 0};
    v.check(agreement(a, a) == 1.0 && agreement(a, c) == 0.0 && agreement(a, b) == 0.5, "agreement examples");
    std::vector<std::size_t> constant(100, 1), balanced(100);
    for (std::size_t i = 0; i < 100; ++i) balanced[i] = i % 4;
    v.check(accuracy(constant, balanced) == 0.25 && accuracy(balanced, balanced) == 1.0, "utility examples");
  }
  {
    RadarInputs in;
    in.n_train = 800;
    in.tpr_at_1pct = 0.520;
    const RadarMetrics r = radar(in);
    v.check(std::abs(*r.data_efficiency - 0.005) <= 1e-12, "n_train 800 -> data efficiency 0.005");
    v.check(std::abs(*r.privacy - 0.480) <= 1e-12, "tpr 0.520 -> privacy 0.480");
    RadarInputs best;
    best.asr = 0.0;
    best.utility = 1.0;
    best.agreement = 0.0;
    best.tpr_at_1pct = 0.0;
    best.n_train = 4;
    const RadarMetrics b = radar(best);
    v.check(*b.bd_poisoned == 1.0 && *b.bd_clean == 1.0 && *b.stealing_robustness == 1.0 && *b.privacy == 1.0 &&
                *b.data_efficiency == 1.0,
            "best case gives 1 on every axis; 4 demonstrations -> data efficiency 1");
  }
  return v;
}

// ---- 3: adapters leave the base alone ---------------------------------------------

Verdict adapter_identity(const std::shared_ptr<const MiniLM>& base, const ExperimentData& data) {
  Verdict v;
  const std::string before = base->digest();
  Rng rng(77);
  const LoraAdapter zero = LoraAdapter::attach(*base, LoraConfig{}, rng);
  std::size_t identical = 0;
  for (int i = 0; i < 100; ++i) {
    TokenSeq prompt(4 + rng.below(120));
    for (auto& t : prompt) t = static_cast<TokenId>(1 + rng.below(base->config().vocab_size - 1));
    Graph g1, g2;
    ForwardOptions o;
    o.lora = &zero;
    const Tensor a = base->forward(g1, prompt), b = base->forward(g2, prompt, o);
    identical += std::equal(a.data().begin(), a.data().end(), b.data().begin(), b.data().end());
  }
  v.check(identical == 100, "zero-init LoRA bitwise identical on " + std::to_string(identical) + "/100 random prompts");

  const SplitPlan icl_split = make_split(data.pool, Technique::icl, 5, SplitCounts::defaults(task(), Technique::icl),
                                         task().n_classes);
  const AdaptedModel icl = adapt(base, task(), icl_split.members, AdaptConfig::defaults(Technique::icl), 5);
  const std::string icl_adapter = icl.adapter_digest();
  (void)mia_run(icl, icl_split);
  v.check(base->digest() == before && icl.adapter_digest() == icl_adapter, "ICL build and MIA leave every digest unchanged");

  for (auto t : {Technique::lora, Technique::spt}) {
    AdaptConfig cfg = AdaptConfig::defaults(t);
    cfg.epochs = 1;
    const SplitPlan split = make_split(data.pool, t, 6, SplitCounts::defaults(task(), t), task().n_classes);
    const AdaptedModel m = adapt(base, task(), split.members, cfg, 6);
    (void)mia_run(m, split);
    v.check(base->digest() == before, std::string(to_string(t)) + " training and MIA leave the frozen base unchanged");
  }
  return v;
}

// ---- 4: calibration ---------------------------------------------------------------

Verdict calibration(const std::shared_ptr<const MiniLM>& base, const ExperimentData& data) {
  Verdict v;
  const auto t0 = std::chrono::steady_clock::now();
  std::map<Technique, double> mean;
  for (auto t : {Technique::lora, Technique::spt, Technique::icl}) {
    std::vector<double> u;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const std::uint64_t s = run_seed(1, "calibration", t, {seed});
      const SplitPlan split = make_split(data.pool, t, s, SplitCounts::defaults(task(), t), task().n_classes);
      u.push_back(evaluate_utility(adapt(base, task(), split.members, AdaptConfig::defaults(t), s), data.test));
    }
    mean[t] = summarize(u).mean;
    v.check(mean[t] >= 0.75, std::string(to_string(t)) + " utility " + fmt(mean[t]) + " (>= 0.75)");
  }
  double gap = 0.0;
  for (auto a : mean)
    for (auto b : mean) gap = std::max(gap, std::abs(a.second - b.second));
  v.check(gap <= 0.1, "largest pairwise gap " + fmt(gap) + " (<= 0.1)");
  const double s = seconds_since(t0);
  v.check(s < 600.0, "runtime " + fmt(s, 0) + " s (< 600 s)");
  return v;
}

// ---- 5, 6, 9: membership inference ------------------------------------------------

Verdict mia_ordering(const RunManifest& m, double seconds) {
  Verdict v;
  const double icl = metric(m, "mia/icl/d4/tpr_mean"), lora = metric(m, "mia/lora/tpr_mean"),
               spt = metric(m, "mia/spt/tpr_mean");
  v.check(metric(m, "mia/icl/d4/succeeded") >= 100, "ICL repeats " + m.metrics.at("mia/icl/d4/succeeded").dump());
  v.check(icl >= 3.0 * lora, "ICL " + fmt(icl) + " >= 3 x LoRA " + fmt(lora));
  v.check(icl >= 3.0 * spt, "ICL " + fmt(icl) + " >= 3 x SPT " + fmt(spt));
  v.check(lora <= 0.05 && spt <= 0.05, "LoRA and SPT means <= 0.05");
  v.check(seconds < 900.0, "runtime " + fmt(seconds, 0) + " s (< 900 s)");
  return v;
}

Verdict mia_demonstrations(const RunManifest& four, const RunManifest& eight) {
  Verdict v;
  const double d4 = metric(four, "mia/icl/d4/tpr_mean"), d8 = metric(eight, "mia/icl/d8/tpr_mean");
  v.check(metric(eight, "mia/icl/d8/succeeded") >= 100, "8-demonstration repeats " + eight.metrics.at("mia/icl/d8/succeeded").dump());
  v.check(d8 < d4, "TPR@1% with 8 demonstrations " + fmt(d8) + " < with 4 " + fmt(d4));
  return v;
}

bool well_formed_histogram(const fs::path& p, std::size_t bins) {
  std::ifstream is(p);
  std::string line;
  if (!std::getline(is, line) || line != "bin\tdensity") return false;
  std::size_t rows = 0;
  double last = -1.0;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    double centre, density;
    if (!(ls >> centre >> density) || !std::isfinite(density) || density < 0.0 || centre <= last) return false;
    last = centre;
    ++rows;
  }
  return rows == bins;
}

Verdict loss_distributions(const RunManifest& m, const fs::path& dir, std::size_t bins) {
  Verdict v;
  const double mem = metric(m, "mia/icl/d4/member_median_loss_mean"), non = metric(m, "mia/icl/d4/nonmember_median_loss_mean");
  v.check(mem < non, "median member loss " + fmt(mem) + " < nonmember " + fmt(non));
  // Pooled medians straight from the per-run outcomes.
  std::vector<double> all_m, all_n;
  for (const auto& r : m.runs)
    if (r.ok && r.attack == "mia" && r.coords.at("technique") == "icl") {
      for (double x : r.outcome.at("member_losses")) all_m.push_back(x);
      for (double x : r.outcome.at("nonmember_losses")) all_n.push_back(x);
    }
  auto median = [](std::vector<double> x) {
    std::sort(x.begin(), x.end());
    return x.size() % 2 ? x[x.size() / 2] : 0.5 * (x[x.size() / 2 - 1] + x[x.size() / 2]);
  };
  if (!all_m.empty()) {
    const double pm = median(all_m), pn = median(all_n);
    v.check(pm < pn, "pooled median member loss " + fmt(pm) + " < nonmember " + fmt(pn));
  }
  for (const char* side : {"member", "nonmember"}) {
    const fs::path p = dir / (std::string("fig10_loss_hist_icl_d4_") + side + ".tsv");
    v.check(well_formed_histogram(p, bins), p.filename().string() + " well formed");
  }
  return v;
}

// ---- 7: stealing ------------------------------------------------------------------

Verdict stealing(const RunManifest& m, const ExperimentConfig& cfg) {
  Verdict v;
  for (auto t : cfg.techniques) {
    const std::string p = "steal/" + std::string(to_string(t)) + "/";
    const double q1000 = metric(m, p + "same/q1000/agreement_mean");
    const double q250 = metric(m, p + "same/q250/agreement_mean");
    const double q2000 = metric(m, p + "same/q2000/agreement_mean");
    const double shifted = metric(m, p + "shifted/q2000/agreement_mean");
    const std::string name(to_string(t));
    v.check(q1000 >= 0.70, name + ": agreement at 1000 queries " + fmt(q1000) + " (>= 0.70)");
    v.check(q2000 >= q250, name + ": agreement at 2000 " + fmt(q2000) + " >= at 250 " + fmt(q250));
    v.check(std::abs(shifted - q2000) <= 0.15, name + ": shifted " + fmt(shifted) + " within 0.15 of same-distribution");
  }
  return v;
}

// ---- 8: backdoor ------------------------------------------------------------------

Verdict backdoor(const RunManifest& m, const ExperimentConfig& cfg) {
  Verdict v;
  for (auto t : {Technique::lora, Technique::spt}) {
    const std::string p = "backdoor/" + std::string(to_string(t)) + "/r";
    const std::string name(to_string(t));
    std::vector<double> asr;
    std::string trace;
    for (double r : cfg.backdoor.rates) {
      std::ostringstream key;
      key << p << r << "/asr_mean";
      asr.push_back(metric(m, key.str()));
      trace += " " + fmt(asr.back(), 3);
    }
    v.check(std::is_sorted(asr.begin(), asr.end()), name + ": ASR non-decreasing over rates:" + trace);
    v.check(asr.back() >= 0.8, name + ": ASR at the highest rate " + fmt(asr.back()) + " (>= 0.8)");
    const double clean = metric(m, p + "0/utility_mean");
    std::ostringstream key;
    key << p << cfg.backdoor.rates.back() << "/utility_mean";
    const double poisoned = metric(m, key.str());
    v.check(std::abs(poisoned - clean) <= 0.15, name + ": utility " + fmt(poisoned) + " vs clean " + fmt(clean));
  }
  const double chance = 1.0 / static_cast<double>(task().n_classes);
  for (double r : cfg.backdoor.icl_rates) {
    std::ostringstream stem;
    stem << "backdoor/icl/r" << r;
    const double first = metric(m, stem.str() + "/first/asr_mean"), last = metric(m, stem.str() + "/last/asr_mean");
    v.check(std::abs(first - chance) <= 0.15 && std::abs(last - chance) <= 0.15,
            "ICL rate " + fmt(r, 2) + ": ASR first " + fmt(first) + ", last " + fmt(last) + " within 0.15 of " + fmt(chance, 2));
    v.check(std::abs(first - last) <= 0.1, "ICL rate " + fmt(r, 2) + ": first/last gap " + fmt(std::abs(first - last)));
  }
  return v;
}

// ---- 10: replay -------------------------------------------------------------------

Verdict reproducibility(const fs::path& manifest_path, const std::shared_ptr<const MiniLM>& base) {
  Verdict v;
  const RunManifest stored = read_manifest(manifest_path);
  const ReplayReport rep = replay(stored, base);
  std::size_t values = 0;
  for (auto it = stored.metrics.begin(); it != stored.metrics.end(); ++it) values += it.value().is_number();
  v.check(rep.identical(), manifest_path.parent_path().filename().string() + ": " + std::to_string(values) +
                               " metric values, " + std::to_string(rep.mismatches.size()) + " mismatches" +
                               (rep.mismatches.empty() ? "" : " (first: " + rep.mismatches.front() + ")"));
  return v;
}

struct Criterion {
  int id;
  std::string name;
};

}  // namespace

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  fs::path cache = "acceptance_cache";
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--cache" && i + 1 < argc) {
      cache = argv[++i];
    } else if (a == "--only" && i + 1 < argc) {
      std::istringstream ids(argv[++i]);
      for (std::string id; std::getline(ids, id, ',');) only.insert(std::stoi(id));
    } else {
      std::fprintf(stderr, "usage: acceptance [--cache DIR] [--only 1,2,...]\n");
      return 64;
    }
  }
  fs::create_directories(cache);
  auto wanted = [&](std::initializer_list<int> ids) {
    if (only.empty()) return true;
    for (int id : ids)
      if (only.count(id)) return true;
    return false;
  };

  const std::vector<Criterion> names{{1, "gradient correctness"},      {2, "metric unit suite"},
                                     {3, "adapter identity"},          {4, "calibration"},
                                     {5, "MIA ordering"},              {6, "MIA demonstration sweep"},
                                     {7, "stealing anchor"},           {8, "backdoor directionality"},
                                     {9, "loss-distribution export"},  {10, "reproducibility"}};
  std::map<int, Verdict> verdicts;
  auto record = [&](int id, const std::function<Verdict()>& fn) {
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v.check(false, std::string("error: ") + e.what());
    }
    verdicts[id] = v;
    std::printf("  criterion %d done: %s\n", id, v.pass ? "pass" : "fail");
    std::fflush(stdout);
  };

  if (wanted({1})) record(1, gradients);
  if (wanted({2})) record(2, metric_examples);

  std::shared_ptr<const MiniLM> base;
  if (wanted({3, 4, 5, 6, 7, 8, 9, 10})) {
    const auto t0 = std::chrono::steady_clock::now();
    base = std::make_shared<const MiniLM>(load_or_pretrain(cache / "base.ckpt", PretrainConfig{}));
    std::printf("  base model ready in %.0f s (digest %s)\n", seconds_since(t0), base->digest().substr(0, 16).c_str());
    std::fflush(stdout);
  }
  const ExperimentConfig root = base_experiment();
  const ExperimentData data = prepare_data(root);

  if (wanted({3})) record(3, [&] { return adapter_identity(base, data); });
  if (wanted({4})) record(4, [&] { return calibration(base, data); });

  ExperimentConfig mia4 = root;
  mia4.attack = AttackKind::mia;
  mia4.mia.lora_repeats = 10;
  mia4.mia.spt_repeats = 10;
  mia4.mia.icl_repeats = 100;
  mia4.mia.demo_counts = {4};
  if (wanted({5, 6, 9, 10})) {
    double mia_seconds = 0.0;
    RunManifest m4;
    record(5, [&] {
      m4 = run_named("mia", mia4, base, cache, &mia_seconds);
      return mia_ordering(m4, mia_seconds);
    });
    if (wanted({6})) {
      ExperimentConfig mia8 = mia4;
      mia8.techniques = {Technique::icl};
      mia8.mia.demo_counts = {8};
      record(6, [&] { return mia_demonstrations(m4, run_named("mia_d8", mia8, base, cache)); });
    }
    if (wanted({9})) record(9, [&] { return loss_distributions(m4, cache / "runs" / "mia", mia4.mia.histogram_bins); });
    if (!only.empty() && !only.count(5)) verdicts.erase(5);
  }

  if (wanted({7})) {
    ExperimentConfig steal = root;
    steal.attack = AttackKind::steal;
    record(7, [&] { return stealing(run_named("steal", steal, base, cache), steal); });
  }
  if (wanted({8})) {
    ExperimentConfig bd = root;
    bd.attack = AttackKind::backdoor;
    record(8, [&] { return backdoor(run_named("backdoor", bd, base, cache), bd); });
  }
  if (wanted({10})) record(10, [&] { return reproducibility(cache / "runs" / "mia" / "manifest.json", base); });

  std::printf("\n");
  bool all = true;
  for (const auto& c : names) {
    auto it = verdicts.find(c.id);
    if (it == verdicts.end()) continue;
    all = all && it->second.pass;
    std::printf("%s  %2d  %s\n", it->second.pass ? "PASS" : "FAIL", c.id, c.name.c_str());
    for (const auto& n : it->second.notes) std::printf("          %s\n", n.c_str());
  }
  std::fflush(stdout);
  return all ? 0 : 1;
}

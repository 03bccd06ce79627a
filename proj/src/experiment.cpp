#include "adaptsec/experiment.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "adaptsec/digest.hpp"
#include "adaptsec/rng.hpp"

namespace adaptsec {

namespace fs = std::filesystem;

std::string_view to_string(AttackKind a) {
  switch (a) {
    case AttackKind::mia:
      return "mia";
    case AttackKind::steal:
      return "steal";
    case AttackKind::backdoor:
      return "backdoor";
    case AttackKind::all:
      return "all";
  }
  return "all";
}

AttackKind attack_from_string(std::string_view s) {
  if (s == "mia") return AttackKind::mia;
  if (s == "steal") return AttackKind::steal;
  if (s == "backdoor") return AttackKind::backdoor;
  if (s == "all") return AttackKind::all;
  throw ConfigError("unknown attack '" + std::string(s) + "' (expected mia, steal, backdoor or all)");
}

std::uint64_t run_seed(std::uint64_t master, std::string_view attack, Technique technique,
                       std::initializer_list<std::uint64_t> coords) {
  std::vector<std::uint64_t> all{hash_label(attack), hash_label(to_string(technique))};
  all.insert(all.end(), coords.begin(), coords.end());
  return derive_seed(master, all);
}

// ---- config -------------------------------------------------------------------

namespace {

void reject_unknown(const Json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok |= it.key() == k;
    if (!ok) throw ConfigError(where + ": unknown key '" + it.key() + "'");
  }
}

std::uint64_t rate_key(double rate) { return std::bit_cast<std::uint64_t>(rate); }

std::string fmt_rate(double r) {
  std::ostringstream ss;
  ss << r;
  return ss.str();
}

}  // namespace

AdaptConfig ExperimentConfig::adapt_config(Technique t) const {
  auto it = adapt.find(t);
  return it == adapt.end() ? AdaptConfig::defaults(t) : it->second;
}

std::size_t ExperimentConfig::effective_corpus_size() const {
  if (corpus_size) return corpus_size;
  const TaskSpec& t = TaskSpec::by_name(task);
  std::size_t need = 2 * std::max(t.lora_train_size, t.spt_train_size);
  std::size_t demos = 0;
  for (auto d : mia.demo_counts) demos = std::max(demos, d);
  need = std::max(need, demos + mia.icl_nonmembers);
  return test_size + need + 200;
}

void ExperimentConfig::validate() const {
  const TaskSpec& t = TaskSpec::by_name(task);
  if (techniques.empty()) throw ConfigError("experiment: no techniques selected");
  if (test_size == 0) throw ConfigError("experiment: test_size must be positive");
  if (!(min_success_fraction > 0.0 && min_success_fraction <= 1.0))
    throw ConfigError("experiment: min_success_fraction must lie in (0, 1]");
  for (const auto& [tech, cfg] : adapt) {
    if (cfg.technique != tech) throw ConfigError("experiment: adapt entry for " + std::string(to_string(tech)) + " has a different technique");
    cfg.validate();
  }
  const std::size_t pool = effective_corpus_size() - std::min(effective_corpus_size(), test_size);
  for (auto tech : techniques) {
    const auto counts = tech == Technique::icl ? SplitCounts{adapt_config(tech).demonstrations, mia.icl_nonmembers}
                                               : SplitCounts::defaults(t, tech);
    if (counts.members + counts.nonmembers > pool)
      throw ConfigError("experiment: corpus_size leaves " + std::to_string(pool) + " examples, " +
                        std::string(to_string(tech)) + " needs " + std::to_string(counts.members + counts.nonmembers));
  }
  if (!(mia.fpr > 0.0 && mia.fpr <= 1.0)) throw ConfigError("experiment: mia.fpr must lie in (0, 1]");
  if (mia.demo_counts.empty()) throw ConfigError("experiment: mia.demo_counts is empty");
  for (auto d : mia.demo_counts)
    if (d == 0) throw ConfigError("experiment: ICL demonstration counts must be positive");
  if (steal.budgets.empty() || steal.sources.empty()) throw ConfigError("experiment: steal sweep is empty");
  for (auto q : steal.budgets)
    if (q == 0) throw ConfigError("experiment: stealing budgets must be positive");
  if (!(steal.shift_fraction >= 0.0 && steal.shift_fraction <= 1.0))
    throw ConfigError("experiment: steal.shift_fraction must lie in [0, 1]");
  for (double r : backdoor.rates)
    if (!(r > 0.0 && r <= 1.0)) throw ConfigError("experiment: backdoor rates must lie in (0, 1]");
  for (double r : backdoor.icl_rates)
    if (!(r > 0.0 && r <= 1.0)) throw ConfigError("experiment: ICL backdoor rates must lie in (0, 1]");
  for (auto p : backdoor.positions)
    if (p == PoisonPosition::none) throw ConfigError("experiment: ICL positions must be first or last");
}

Json ExperimentConfig::to_json() const {
  Json techs = Json::array();
  for (auto t : techniques) techs.push_back(to_string(t));
  Json adapt_j = Json::object();
  for (auto t : techniques) adapt_j[std::string(to_string(t))] = adapt_config(t).to_json();
  Json sources = Json::array();
  for (auto s : steal.sources) sources.push_back(to_string(s));
  Json positions = Json::array();
  for (auto p : backdoor.positions) positions.push_back(to_string(p));
  return Json{{"task", task},
              {"techniques", techs},
              {"attack", to_string(attack)},
              {"master_seed", master_seed},
              {"base_checkpoint", base_checkpoint},
              {"test_size", test_size},
              {"corpus_size", effective_corpus_size()},
              {"adapt", adapt_j},
              {"mia",
               {{"lora_repeats", mia.lora_repeats},
                {"spt_repeats", mia.spt_repeats},
                {"icl_repeats", mia.icl_repeats},
                {"icl_nonmembers", mia.icl_nonmembers},
                {"demo_counts", mia.demo_counts},
                {"fpr", mia.fpr},
                {"histogram_bins", mia.histogram_bins}}},
              {"steal",
               {{"budgets", steal.budgets},
                {"sources", sources},
                {"seeds", steal.seeds},
                {"shift_fraction", steal.shift_fraction}}},
              {"backdoor",
               {{"rates", backdoor.rates},
                {"icl_rates", backdoor.icl_rates},
                {"positions", positions},
                {"seeds", backdoor.seeds},
                {"icl_seeds", backdoor.icl_seeds}}},
              {"min_success_fraction", min_success_fraction}};
}

ExperimentConfig ExperimentConfig::from_json(const Json& j) {
  ExperimentConfig c;
  try {
    reject_unknown(j,
                   {"task", "techniques", "attack", "master_seed", "base_checkpoint", "test_size", "corpus_size",
                    "adapt", "mia", "steal", "backdoor", "min_success_fraction"},
                   "experiment config");
    c.task = j.value("task", c.task);
    (void)TaskSpec::by_name(c.task);
    if (j.contains("techniques")) {
      c.techniques.clear();
      for (const auto& t : j.at("techniques")) c.techniques.push_back(technique_from_string(t.get<std::string>()));
    }
    if (j.contains("attack")) c.attack = attack_from_string(j.at("attack").get<std::string>());
    c.master_seed = j.value("master_seed", c.master_seed);
    c.base_checkpoint = j.value("base_checkpoint", c.base_checkpoint);
    c.test_size = j.value("test_size", c.test_size);
    c.corpus_size = j.value("corpus_size", c.corpus_size);
    if (j.contains("adapt")) {
      for (auto it = j.at("adapt").begin(); it != j.at("adapt").end(); ++it) {
        const Technique t = technique_from_string(it.key());
        Json entry = it.value();
        entry["technique"] = it.key();
        c.adapt[t] = AdaptConfig::from_json(entry);
      }
    }
    if (j.contains("mia")) {
      const auto& m = j.at("mia");
      reject_unknown(m, {"lora_repeats", "spt_repeats", "icl_repeats", "icl_nonmembers", "demo_counts", "fpr", "histogram_bins"}, "mia");
      c.mia.lora_repeats = m.value("lora_repeats", c.mia.lora_repeats);
      c.mia.spt_repeats = m.value("spt_repeats", c.mia.spt_repeats);
      c.mia.icl_repeats = m.value("icl_repeats", c.mia.icl_repeats);
      c.mia.icl_nonmembers = m.value("icl_nonmembers", c.mia.icl_nonmembers);
      c.mia.demo_counts = m.value("demo_counts", c.mia.demo_counts);
      c.mia.fpr = m.value("fpr", c.mia.fpr);
      c.mia.histogram_bins = m.value("histogram_bins", c.mia.histogram_bins);
    }
    if (j.contains("steal")) {
      const auto& s = j.at("steal");
      reject_unknown(s, {"budgets", "sources", "seeds", "shift_fraction"}, "steal");
      c.steal.budgets = s.value("budgets", c.steal.budgets);
      if (s.contains("sources")) {
        c.steal.sources.clear();
        for (const auto& x : s.at("sources")) c.steal.sources.push_back(probe_source_from_string(x.get<std::string>()));
      }
      c.steal.seeds = s.value("seeds", c.steal.seeds);
      c.steal.shift_fraction = s.value("shift_fraction", c.steal.shift_fraction);
    }
    if (j.contains("backdoor")) {
      const auto& b = j.at("backdoor");
      reject_unknown(b, {"rates", "icl_rates", "positions", "seeds", "icl_seeds"}, "backdoor");
      c.backdoor.rates = b.value("rates", c.backdoor.rates);
      c.backdoor.icl_rates = b.value("icl_rates", c.backdoor.icl_rates);
      if (b.contains("positions")) {
        c.backdoor.positions.clear();
        for (const auto& x : b.at("positions")) c.backdoor.positions.push_back(position_from_string(x.get<std::string>()));
      }
      c.backdoor.seeds = b.value("seeds", c.backdoor.seeds);
      c.backdoor.icl_seeds = b.value("icl_seeds", c.backdoor.icl_seeds);
    }
    c.min_success_fraction = j.value("min_success_fraction", c.min_success_fraction);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---- manifest -------------------------------------------------------------------

Json RunManifest::to_json() const {
  Json runs_j = Json::array();
  for (const auto& r : runs) {
    Json e{{"attack", r.attack}, {"coords", r.coords}, {"seed", r.seed}, {"ok", r.ok}};
    if (r.ok)
      e["outcome_digest"] = sha256_hex(r.outcome.dump());
    else
      e["error"] = r.error;
    runs_j.push_back(std::move(e));
  }
  return Json{{"config", config},         {"base_digest", base_digest}, {"corpus_digest", corpus_digest},
              {"metrics", metrics},       {"failed", failed},           {"wall_seconds", wall_seconds},
              {"runs", std::move(runs_j)}};
}

RunManifest RunManifest::from_json(const Json& j) {
  RunManifest m;
  try {
    m.config = j.at("config");
    m.base_digest = j.at("base_digest").get<std::string>();
    m.corpus_digest = j.at("corpus_digest").get<std::string>();
    m.metrics = j.at("metrics");
    m.failed = j.value("failed", false);
    m.wall_seconds = j.value("wall_seconds", 0.0);
    for (const auto& r : j.at("runs")) {
      RunRecord rec;
      rec.attack = r.at("attack").get<std::string>();
      rec.coords = r.at("coords");
      rec.seed = r.at("seed").get<std::uint64_t>();
      rec.ok = r.at("ok").get<bool>();
      rec.error = r.value("error", std::string());
      if (rec.ok) rec.outcome = Json{{"digest", r.at("outcome_digest")}};
      m.runs.push_back(std::move(rec));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("manifest malformed: ") + e.what());
  }
  return m;
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write " + tmp.string());
    os << text;
    if (!os) throw Error("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

}  // namespace

void write_manifest(const fs::path& path, const RunManifest& manifest) { write_text(path, manifest.to_json().dump(2) + "\n"); }

RunManifest read_manifest(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open manifest " + path.string());
  Json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError("manifest " + path.string() + " is not valid JSON: " + e.what());
  }
  return RunManifest::from_json(j);
}

// ---- data -----------------------------------------------------------------------

ExperimentData prepare_data(const ExperimentConfig& config) {
  ExperimentData d;
  d.task = &TaskSpec::by_name(config.task);
  auto corpus = generate_corpus(*d.task, config.effective_corpus_size(), derive_seed(config.master_seed, {hash_label("corpus")}));
  d.digest = examples_digest(corpus);
  d.test.assign(corpus.begin(), corpus.begin() + static_cast<std::ptrdiff_t>(config.test_size));
  for (auto& e : d.test) e.origin = Origin::heldout;
  d.pool.assign(corpus.begin() + static_cast<std::ptrdiff_t>(config.test_size), corpus.end());
  return d;
}

// ---- sweeps -----------------------------------------------------------------------

namespace {

struct Runner {
  const ExperimentConfig& cfg;
  std::shared_ptr<const MiniLM> base;
  const ExperimentData& data;
  fs::path out;
  RunManifest& manifest;
  std::vector<Json> outcome_lines;

  const TaskSpec& task() const { return *data.task; }

  template <class Fn>
  std::optional<Json> attempt(const std::string& attack, Json coords, std::uint64_t seed, Fn&& fn) {
    RunRecord rec;
    rec.attack = attack;
    rec.coords = std::move(coords);
    rec.seed = seed;
    try {
      rec.outcome = fn();
      rec.ok = true;
    } catch (const Error& e) {
      rec.error = e.what();
    }
    Json line{{"attack", rec.attack}, {"coords", rec.coords}, {"seed", rec.seed}, {"ok", rec.ok}};
    if (rec.ok)
      line["outcome"] = rec.outcome;
    else
      line["error"] = rec.error;
    outcome_lines.push_back(std::move(line));
    std::optional<Json> result;
    if (rec.ok) result = rec.outcome;
    manifest.runs.push_back(std::move(rec));
    return result;
  }

  /// Marks a sweep cell failed when too few of its runs succeeded.
  bool enough(const std::string& key, std::size_t ok, std::size_t planned) {
    manifest.metrics[key + "/succeeded"] = ok;
    manifest.metrics[key + "/planned"] = planned;
    if (planned == 0 || static_cast<double>(ok) < cfg.min_success_fraction * static_cast<double>(planned) - 1e-12) {
      manifest.metrics[key + "/status"] = "failed";
      manifest.failed = true;
      return false;
    }
    manifest.metrics[key + "/status"] = "ok";
    return true;
  }

  void put_summary(const std::string& key, const std::vector<double>& values) {
    const Summary s = summarize(values);
    manifest.metrics[key + "_mean"] = s.mean;
    manifest.metrics[key + "_std"] = s.std;
  }

  void write(const std::string& name, const std::string& text) {
    if (!out.empty()) write_text(out / name, text);
  }

  // -- membership inference
  void mia() {
    std::ostringstream fig4;
    fig4 << "demonstrations\ttpr_mean\ttpr_std\tn\n";
    fig4.precision(17);
    for (auto tech : cfg.techniques) {
      const std::vector<std::size_t> demo_counts =
          tech == Technique::icl ? cfg.mia.demo_counts : std::vector<std::size_t>{0};
      for (auto demos : demo_counts) {
        const std::size_t repeats = tech == Technique::lora  ? cfg.mia.lora_repeats
                                    : tech == Technique::spt ? cfg.mia.spt_repeats
                                                             : cfg.mia.icl_repeats;
        std::string key = "mia/" + std::string(to_string(tech));
        if (tech == Technique::icl) key += "/d" + std::to_string(demos);
        std::vector<MiaOutcome> outcomes;
        for (std::size_t r = 0; r < repeats; ++r) {
          const std::uint64_t seed = run_seed(cfg.master_seed, "mia", tech, {demos, r});
          Json coords{{"technique", to_string(tech)}, {"repeat", r}};
          if (tech == Technique::icl) coords["demonstrations"] = demos;
          auto res = attempt("mia", coords, seed, [&] {
            AdaptConfig ac = cfg.adapt_config(tech);
            SplitCounts counts = SplitCounts::defaults(task(), tech);
            if (tech == Technique::icl) {
              ac.demonstrations = demos;
              counts = {demos, cfg.mia.icl_nonmembers};
            }
            const SplitPlan split = make_split(data.pool, tech, seed, counts, task().n_classes);
            const AdaptedModel target = adapt(base, task(), split.members, ac, seed);
            MiaOutcome o = mia_run(target, split, r);
            o.demonstrations = demos;
            outcomes.push_back(o);
            return to_json(o);
          });
          (void)res;
        }
        if (!enough(key, outcomes.size(), repeats)) continue;
        std::vector<double> tprs, mem_med, non_med;
        for (const auto& o : outcomes) {
          tprs.push_back(o.tpr_at(cfg.mia.fpr));
          auto m = o.member_losses, n = o.nonmember_losses;
          std::sort(m.begin(), m.end());
          std::sort(n.begin(), n.end());
          auto median = [](const std::vector<double>& v) {
            return v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
          };
          mem_med.push_back(median(m));
          non_med.push_back(median(n));
        }
        put_summary(key + "/tpr", tprs);
        put_summary(key + "/member_median_loss", mem_med);
        put_summary(key + "/nonmember_median_loss", non_med);
        if (tech == Technique::icl) {
          const Summary s = summarize(tprs);
          fig4 << demos << '\t' << s.mean << '\t' << s.std << '\t' << s.n << '\n';
        }

        // ROC: averaged TPR on a log grid, plus the full curve of the first repeat.
        std::string stem = std::string(to_string(tech));
        if (tech == Technique::icl) stem += "_d" + std::to_string(demos);
        const std::size_t grid = 31;
        std::vector<double> fprs, mean_tpr(grid, 0.0);
        for (std::size_t i = 0; i < grid; ++i)
          fprs.push_back(i + 1 == grid ? 1.0 : std::pow(10.0, -3.0 + 3.0 * static_cast<double>(i) / (grid - 1)));
        for (const auto& o : outcomes) {
          const RocCurve c = o.curve();
          for (std::size_t i = 0; i < grid; ++i) mean_tpr[i] += tpr_at_fpr(c, fprs[i]) / static_cast<double>(outcomes.size());
        }
        std::ostringstream avg;
        avg.precision(17);
        avg << "fpr\ttpr\n";
        for (std::size_t i = 0; i < grid; ++i) avg << fprs[i] << '\t' << mean_tpr[i] << '\n';
        write("fig2_mia_roc_" + stem + ".tsv", avg.str());
        std::ostringstream full;
        write_roc_table(full, outcomes.front().curve());
        write("fig2_mia_roc_" + stem + "_full.tsv", full.str());

        const LossHistogram h = export_loss_distributions(outcomes, cfg.mia.histogram_bins);
        std::ostringstream hm, hn;
        write_histogram(hm, h.edges, h.member_density);
        write_histogram(hn, h.edges, h.nonmember_density);
        write("fig10_loss_hist_" + stem + "_member.tsv", hm.str());
        write("fig10_loss_hist_" + stem + "_nonmember.tsv", hn.str());
      }
    }
    if (std::find(cfg.techniques.begin(), cfg.techniques.end(), Technique::icl) != cfg.techniques.end())
      write("fig4_mia_demos.tsv", fig4.str());
  }

  // -- model stealing
  void steal() {
    std::map<std::string, std::vector<StealOutcome>> cells;
    const std::size_t max_budget = *std::max_element(cfg.steal.budgets.begin(), cfg.steal.budgets.end());
    const AdaptConfig surrogate_cfg = AdaptConfig::defaults(Technique::lora);
    for (auto tech : cfg.techniques) {
      for (std::size_t s = 0; s < cfg.steal.seeds; ++s) {
        const std::uint64_t tseed = run_seed(cfg.master_seed, "steal-target", tech, {s});
        std::optional<AdaptedModel> target;
        std::vector<LabeledExample> exclude;
        std::string target_error;
        try {
          AdaptConfig ac = cfg.adapt_config(tech);
          const SplitCounts counts =
              tech == Technique::icl ? SplitCounts{ac.demonstrations, 0} : SplitCounts::defaults(task(), tech);
          const SplitPlan split = make_split(data.pool, tech, tseed, counts, task().n_classes);
          target.emplace(adapt(base, task(), split.members, ac, tseed));
          exclude = split.members;
          exclude.insert(exclude.end(), data.test.begin(), data.test.end());
        } catch (const Error& e) {
          target_error = e.what();
        }
        for (auto source : cfg.steal.sources) {
          std::optional<ProbeSet> probes;
          const std::uint64_t pseed =
              run_seed(cfg.master_seed, "steal-probes", tech, {s, static_cast<std::uint64_t>(source)});
          if (target) {
            try {
              probes = make_probe_set(task(), source, max_budget, pseed, exclude, cfg.steal.shift_fraction);
            } catch (const Error& e) {
              target_error = e.what();
            }
          }
          for (auto q : cfg.steal.budgets) {
            const std::uint64_t seed =
                run_seed(cfg.master_seed, "steal", tech, {s, static_cast<std::uint64_t>(source), q});
            const Json coords{{"technique", to_string(tech)}, {"seed_index", s}, {"source", to_string(source)}, {"budget", q}};
            attempt("steal", coords, seed, [&]() -> Json {
              if (!target || !probes) throw Error("target unavailable: " + target_error);
              StealOutcome o = steal_run(*target, *probes, data.test, q, surrogate_cfg, seed);
              cells[std::string(to_string(tech)) + "/" + std::string(to_string(source)) + "/q" + std::to_string(q)].push_back(o);
              return to_json(o);
            });
          }
        }
      }
    }

    std::ostringstream fig5, fig7;
    fig5.precision(17);
    fig7.precision(17);
    fig5 << "technique\tbudget\tagreement_mean\tagreement_std\taccuracy_mean\taccuracy_std\tn\n";
    fig7 << "technique\tsource\tbudget\tagreement_mean\tagreement_std\taccuracy_mean\taccuracy_std\tn\n";
    for (auto tech : cfg.techniques)
      for (auto source : cfg.steal.sources)
        for (auto q : cfg.steal.budgets) {
          const std::string cell = std::string(to_string(tech)) + "/" + std::string(to_string(source)) + "/q" + std::to_string(q);
          const std::string key = "steal/" + cell;
          const auto& os = cells[cell];
          if (!enough(key, os.size(), cfg.steal.seeds)) continue;
          std::vector<double> ag, acc;
          for (const auto& o : os) {
            ag.push_back(o.agreement);
            acc.push_back(o.accuracy);
          }
          put_summary(key + "/agreement", ag);
          put_summary(key + "/accuracy", acc);
          const Summary a = summarize(ag), b = summarize(acc);
          if (source == ProbeSource::same_distribution)
            fig5 << to_string(tech) << '\t' << q << '\t' << a.mean << '\t' << a.std << '\t' << b.mean << '\t' << b.std << '\t' << a.n << '\n';
          fig7 << to_string(tech) << '\t' << to_string(source) << '\t' << q << '\t' << a.mean << '\t' << a.std << '\t'
               << b.mean << '\t' << b.std << '\t' << a.n << '\n';
        }
    write("fig5_steal_budget.tsv", fig5.str());
    write("fig7_steal_source.tsv", fig7.str());
  }

  // -- backdoor
  void backdoor() {
    struct Cell {
      Technique tech;
      double rate;
      PoisonPosition pos;
      std::size_t planned = 0;
      std::vector<BackdoorOutcome> outcomes;
    };
    std::vector<Cell> cells;
    auto cell_for = [&](Technique t, double r, PoisonPosition p) -> Cell& {
      for (auto& c : cells)
        if (c.tech == t && c.rate == r && c.pos == p) return c;
      cells.push_back({t, r, p, 0, {}});
      return cells.back();
    };

    for (auto tech : cfg.techniques) {
      const bool icl = tech == Technique::icl;
      const std::size_t seeds = icl ? cfg.backdoor.icl_seeds : cfg.backdoor.seeds;
      const AdaptConfig ac = cfg.adapt_config(tech);
      std::vector<std::pair<double, PoisonPosition>> grid{{0.0, PoisonPosition::none}};
      for (double r : icl ? cfg.backdoor.icl_rates : cfg.backdoor.rates) {
        if (icl)
          for (auto p : cfg.backdoor.positions) grid.emplace_back(r, p);
        else
          grid.emplace_back(r, PoisonPosition::none);
      }
      for (std::size_t s = 0; s < seeds; ++s) {
        const std::uint64_t split_seed = run_seed(cfg.master_seed, "backdoor-split", tech, {s});
        std::vector<LabeledExample> clean;
        std::string split_error;
        try {
          const SplitCounts counts = icl ? SplitCounts{ac.demonstrations, 0} : SplitCounts::defaults(task(), tech);
          clean = make_split(data.pool, tech, split_seed, counts, task().n_classes).members;
        } catch (const Error& e) {
          split_error = e.what();
        }
        for (const auto& [rate, pos] : grid) {
          Cell& cell = cell_for(tech, rate, pos);
          ++cell.planned;
          const std::uint64_t seed =
              run_seed(cfg.master_seed, "backdoor", tech, {s, rate_key(rate), static_cast<std::uint64_t>(pos)});
          const Json coords{{"technique", to_string(tech)}, {"seed_index", s}, {"rate", rate}, {"position", to_string(pos)}};
          attempt("backdoor", coords, seed, [&]() -> Json {
            if (clean.empty()) throw Error("clean set unavailable: " + split_error);
            BackdoorOutcome o = backdoor_run(base, task(), ac, clean, data.test, rate, pos, seed);
            cell.outcomes.push_back(o);
            return to_json(o);
          });
        }
      }
    }

    std::ostringstream fig8, fig9, fig11;
    for (auto* os : {&fig8, &fig9, &fig11}) os->precision(17);
    fig8 << "technique\trate\tposition\tasr_mean\tasr_std\tn\n";
    fig9 << "technique\trate\tposition\tutility_mean\tutility_std\tn\n";
    fig11 << "rate\tposition\tasr_mean\tasr_std\tutility_mean\tutility_std\tn\n";
    for (const auto& c : cells) {
      std::string key = "backdoor/" + std::string(to_string(c.tech)) + "/r" + fmt_rate(c.rate);
      if (c.pos != PoisonPosition::none) key += "/" + std::string(to_string(c.pos));
      if (!enough(key, c.outcomes.size(), c.planned)) continue;
      std::vector<double> asr, util;
      for (const auto& o : c.outcomes) {
        asr.push_back(o.asr);
        util.push_back(o.utility);
      }
      put_summary(key + "/asr", asr);
      put_summary(key + "/utility", util);
      const Summary a = summarize(asr), u = summarize(util);
      fig8 << to_string(c.tech) << '\t' << c.rate << '\t' << to_string(c.pos) << '\t' << a.mean << '\t' << a.std << '\t' << a.n << '\n';
      fig9 << to_string(c.tech) << '\t' << c.rate << '\t' << to_string(c.pos) << '\t' << u.mean << '\t' << u.std << '\t' << u.n << '\n';
      if (c.tech == Technique::icl && c.pos != PoisonPosition::none)
        fig11 << c.rate << '\t' << to_string(c.pos) << '\t' << a.mean << '\t' << a.std << '\t' << u.mean << '\t' << u.std << '\t'
              << a.n << '\n';
    }
    write("fig8_bd_asr.tsv", fig8.str());
    write("fig9_bd_utility.tsv", fig9.str());
    if (std::find(cfg.techniques.begin(), cfg.techniques.end(), Technique::icl) != cfg.techniques.end())
      write("fig11_icl_position.tsv", fig11.str());
  }
};

}  // namespace

RunManifest run_experiment(const ExperimentConfig& config, std::shared_ptr<const MiniLM> base, const fs::path& out_dir) {
  config.validate();
  if (!base) throw ContractError("run_experiment: no base model");
  const auto start = std::chrono::steady_clock::now();
  const ExperimentData data = prepare_data(config);

  RunManifest manifest;
  manifest.config = config.to_json();
  manifest.base_digest = base->digest();
  manifest.corpus_digest = data.digest;

  Runner runner{config, base, data, out_dir, manifest, {}};
  const bool all = config.attack == AttackKind::all;
  if (all || config.attack == AttackKind::mia) runner.mia();
  if (all || config.attack == AttackKind::steal) runner.steal();
  if (all || config.attack == AttackKind::backdoor) runner.backdoor();

  if (base->digest() != manifest.base_digest) throw ContractError("run_experiment: the base model changed during the sweep");
  manifest.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (!out_dir.empty()) {
    std::string lines;
    for (const auto& l : runner.outcome_lines) lines += l.dump() + "\n";
    write_text(out_dir / "outcomes.jsonl", lines);
    write_manifest(out_dir / "manifest.json", manifest);
  }
  return manifest;
}

ReplayReport replay(const RunManifest& manifest, std::shared_ptr<const MiniLM> base, const fs::path& out_dir) {
  if (base->digest() != manifest.base_digest)
    throw IntegrityError("replay: base model digest " + base->digest() + " differs from the recorded " + manifest.base_digest);
  const ExperimentConfig cfg = ExperimentConfig::from_json(manifest.config);
  ReplayReport rep{run_experiment(cfg, std::move(base), out_dir), {}};
  const Json& a = manifest.metrics;
  const Json& b = rep.replayed.metrics;
  if (rep.replayed.corpus_digest != manifest.corpus_digest) rep.mismatches.push_back("corpus_digest");
  for (auto it = a.begin(); it != a.end(); ++it)
    if (!b.contains(it.key()) || b.at(it.key()) != it.value()) rep.mismatches.push_back(it.key());
  for (auto it = b.begin(); it != b.end(); ++it)
    if (!a.contains(it.key())) rep.mismatches.push_back(it.key());
  if (rep.replayed.runs.size() != manifest.runs.size()) {
    rep.mismatches.push_back("runs");
  } else {
    for (std::size_t i = 0; i < manifest.runs.size(); ++i) {
      const auto& x = manifest.runs[i];
      const auto& y = rep.replayed.runs[i];
      const Json xd = x.ok ? (x.outcome.contains("digest") ? x.outcome.at("digest") : Json(sha256_hex(x.outcome.dump()))) : Json();
      const Json yd = y.ok ? Json(sha256_hex(y.outcome.dump())) : Json();
      if (x.seed != y.seed || x.ok != y.ok || xd != yd) rep.mismatches.push_back("runs[" + std::to_string(i) + "]");
    }
  }
  return rep;
}

// ---- report -----------------------------------------------------------------------

namespace {

std::optional<double> metric(const Json& m, const std::string& key) {
  if (m.contains(key) && m.at(key).is_number()) return m.at(key).get<double>();
  return std::nullopt;
}

}  // namespace

std::vector<RadarRow> radar_from_manifests(const std::vector<RunManifest>& manifests) {
  if (manifests.empty()) throw ConfigError("report: no manifests");
  Json metrics = Json::object();
  std::set<Technique> techs;
  std::string task_name;
  std::map<Technique, AdaptConfig> adapt_cfg;
  for (const auto& m : manifests) {
    const ExperimentConfig c = ExperimentConfig::from_json(m.config);
    if (task_name.empty()) task_name = c.task;
    if (c.task != task_name) throw ConfigError("report: manifests cover different tasks (" + task_name + ", " + c.task + ")");
    for (auto t : c.techniques) {
      techs.insert(t);
      adapt_cfg.emplace(t, c.adapt_config(t));
    }
    for (auto it = m.metrics.begin(); it != m.metrics.end(); ++it) metrics[it.key()] = it.value();
  }
  const TaskSpec& task = TaskSpec::by_name(task_name);

  // Backdoor rates shared by every technique that has backdoor results.
  std::map<Technique, std::set<double>> rates;
  for (auto it = metrics.begin(); it != metrics.end(); ++it) {
    const std::string& k = it.key();
    if (k.rfind("backdoor/", 0) != 0 || k.find("/asr_mean") == std::string::npos) continue;
    const auto p1 = k.find('/', 9);
    const Technique t = technique_from_string(k.substr(9, p1 - 9));
    const auto p2 = k.find('/', p1 + 1);
    const double r = std::stod(k.substr(p1 + 2, p2 - p1 - 2));
    if (r > 0.0) rates[t].insert(r);
  }
  std::optional<std::set<double>> shared;
  for (const auto& [t, rs] : rates) {
    if (!shared) {
      shared = rs;
      continue;
    }
    std::set<double> keep;
    std::set_intersection(shared->begin(), shared->end(), rs.begin(), rs.end(), std::inserter(keep, keep.begin()));
    shared = keep;
  }

  std::vector<RadarRow> rows;
  for (auto t : techs) {
    RadarRow row;
    row.technique = t;
    const std::string name(to_string(t));
    const AdaptConfig& ac = adapt_cfg.at(t);
    row.inputs.n_train = static_cast<double>(t == Technique::lora  ? task.lora_train_size
                                             : t == Technique::spt ? task.spt_train_size
                                                                   : ac.demonstrations);
    row.inputs.tpr_at_1pct =
        metric(metrics, t == Technique::icl ? "mia/icl/d" + std::to_string(ac.demonstrations) + "/tpr_mean" : "mia/" + name + "/tpr_mean");

    row.inputs.agreement = metric(metrics, "steal/" + name + "/same_distribution/q1000/agreement_mean");
    if (!row.inputs.agreement) {
      std::size_t best = 0;
      for (auto it = metrics.begin(); it != metrics.end(); ++it) {
        const std::string prefix = "steal/" + name + "/same_distribution/q";
        const std::string& k = it.key();
        if (k.rfind(prefix, 0) != 0 || k.find("/agreement_mean") == std::string::npos) continue;
        const std::size_t q = std::stoul(k.substr(prefix.size()));
        if (q > best) {
          best = q;
          row.inputs.agreement = it.value().get<double>();
        }
      }
    }

    if (shared && !shared->empty() && rates.count(t)) {
      std::vector<double> asr, util;
      for (double r : *shared) {
        const std::string stem = "backdoor/" + name + "/r" + fmt_rate(r);
        const std::vector<std::string> subs = t == Technique::icl ? std::vector<std::string>{"/first", "/last"} : std::vector<std::string>{""};
        for (const auto& sub : subs) {
          if (auto a = metric(metrics, stem + sub + "/asr_mean")) asr.push_back(*a);
          if (auto u = metric(metrics, stem + sub + "/utility_mean")) util.push_back(*u);
        }
      }
      if (!asr.empty()) row.inputs.asr = summarize(asr).mean;
      if (!util.empty()) row.inputs.utility = summarize(util).mean;
    }
    row.values = radar(row.inputs);
    rows.push_back(row);
  }
  return rows;
}

void write_radar_table(std::ostream& os, const std::vector<RadarRow>& rows) {
  os << "technique\tdata_efficiency\tprivacy\tstealing_robustness\tbd_resilience_poisoned\tbd_resilience_clean\n";
  os.precision(17);
  auto cell = [&os](const std::optional<double>& v) {
    os << '\t';
    if (v)
      os << *v;
    else
      os << "NA";
  };
  for (const auto& r : rows) {
    os << to_string(r.technique);
    cell(r.values.data_efficiency);
    cell(r.values.privacy);
    cell(r.values.stealing_robustness);
    cell(r.values.bd_poisoned);
    cell(r.values.bd_clean);
    os << '\n';
  }
}

}  // namespace adaptsec

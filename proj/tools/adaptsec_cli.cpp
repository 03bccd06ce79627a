// adaptsec: pretrain a base model, adapt it, attack it, and report.
//
// Exit codes: 0 success, 1 invalid input or configuration, 2 the run itself failed.
// Relative output paths resolve against $ADAPTSEC_OUTPUT_ROOT (default: ./runs).

#include <malloc.h>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "adaptsec/experiment.hpp"
#include "adaptsec/pretrain.hpp"

namespace fs = std::filesystem;
using namespace adaptsec;

namespace {

constexpr int kOk = 0;
constexpr int kInvalid = 1;
constexpr int kRunFailed = 2;

fs::path output_root() {
  const char* env = std::getenv("ADAPTSEC_OUTPUT_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

fs::path resolve(const fs::path& p) { return p.is_absolute() ? p : output_root() / p; }

Json read_json_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path.string());
  try {
    return Json::parse(is, nullptr, true, true);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

// "--set a.b=value": value is parsed as JSON when it parses, else kept as a string.
void apply_override(Json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(text);
  } catch (const nlohmann::json::exception&) {
    value = text;
  }
  Json* node = &j;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i])) (*node)[parts[i]] = Json::object();
    node = &(*node)[parts[i]];
  }
  (*node)[parts.back()] = std::move(value);
}

struct ConfigOptions {
  std::string file;
  std::vector<std::string> sets;
  std::string task;
  std::vector<std::string> techniques;
  std::string attack;
  std::optional<std::uint64_t> seed;
  std::string base;

  void add_to(CLI::App* cmd) {
    cmd->add_option("-c,--config", file, "JSON experiment config");
    cmd->add_option("--set", sets, "override one config key, e.g. --set mia.icl_repeats=100");
    cmd->add_option("--task", task, "task mirror (dbpedia14, agnews4, trec6, sst2)");
    cmd->add_option("--technique", techniques, "lora, spt or icl (repeatable)");
    cmd->add_option("--attack", attack, "mia, steal, backdoor or all");
    cmd->add_option("--seed", seed, "master seed");
    cmd->add_option("--base", base, "base checkpoint");
  }

  ExperimentConfig build() const {
    Json j = file.empty() ? ExperimentConfig{}.to_json() : read_json_file(file);
    for (const auto& s : sets) apply_override(j, s);
    if (!task.empty()) j["task"] = task;
    if (!techniques.empty()) j["techniques"] = techniques;
    if (!attack.empty()) j["attack"] = attack;
    if (seed) j["master_seed"] = *seed;
    if (!base.empty()) j["base_checkpoint"] = base;
    ExperimentConfig cfg = ExperimentConfig::from_json(j);
    cfg.validate();
    return cfg;
  }
};

std::shared_ptr<const MiniLM> load_base(const std::string& path) {
  const fs::path p = resolve(path);
  if (!fs::exists(p)) throw ConfigError("base checkpoint " + p.string() + " does not exist (run `adaptsec pretrain` first)");
  return std::make_shared<const MiniLM>(load_base_model(p).model);
}

int cmd_pretrain(const std::string& config_file, const std::vector<std::string>& sets, std::optional<std::uint64_t> seed,
                 std::optional<std::size_t> steps, const std::string& out, bool force) {
  Json j = config_file.empty() ? PretrainConfig{}.to_json() : read_json_file(config_file);
  for (const auto& s : sets) apply_override(j, s);
  if (seed) j["seed"] = *seed;
  if (steps) j["steps"] = *steps;
  const PretrainConfig cfg = PretrainConfig::from_json(j);
  cfg.model.validate();

  const fs::path path = resolve(out);
  if (!force && fs::exists(path))
    throw ConfigError("refusing to overwrite existing checkpoint " + path.string() + " (use --force)");
  PretrainReport report;
  const MiniLM model = pretrain(cfg, &report, [&](std::size_t step, double loss) {
    if (step % 250 == 0 || step + 1 == cfg.steps) std::cerr << "step " << step << " loss " << loss << '\n';
  });
  save_base_model(path, model, cfg.to_json(), force);
  std::cout << Json{{"checkpoint", path.string()}, {"model_digest", model.digest()}, {"seconds", report.seconds}}.dump(2)
            << '\n';
  return kOk;
}

int cmd_adapt(const ConfigOptions& opts, const std::string& out) {
  const ExperimentConfig cfg = opts.build();
  auto base = load_base(cfg.base_checkpoint);
  const ExperimentData data = prepare_data(cfg);
  const fs::path dir = resolve(out.empty() ? "adapt" : out);
  Json summary = Json::array();
  for (Technique t : cfg.techniques) {
    const std::uint64_t seed = run_seed(cfg.master_seed, "adapt", t, {0});
    const SplitPlan split =
        make_split(data.pool, t, seed, SplitCounts::defaults(*data.task, t), data.task->n_classes);
    const AdaptedModel model = adapt(base, *data.task, split.members, cfg.adapt_config(t), seed);
    const double utility = evaluate_utility(model, data.test);
    const fs::path ckpt = dir / (std::string(to_string(t)) + ".ckpt");
    save_adapted_model(ckpt, model);
    summary.push_back({{"technique", to_string(t)},
                       {"checkpoint", ckpt.string()},
                       {"seed", seed},
                       {"adapter_digest", model.adapter_digest()},
                       {"utility", utility}});
  }
  std::cout << summary.dump(2) << '\n';
  return kOk;
}

int cmd_attack(const ConfigOptions& opts, const std::string& out) {
  const ExperimentConfig cfg = opts.build();
  auto base = load_base(cfg.base_checkpoint);
  const fs::path dir = resolve(out.empty() ? std::string("attack-") + std::string(to_string(cfg.attack)) : out);
  const RunManifest m = run_experiment(cfg, base, dir);
  std::cout << m.metrics.dump(2) << '\n';
  std::cerr << "wrote " << (dir / "manifest.json").string() << '\n';
  if (m.failed) {
    std::cerr << "some sweep cells fell below the required success fraction\n";
    return kRunFailed;
  }
  return kOk;
}

int cmd_report(const std::vector<std::string>& manifests, const std::string& out) {
  std::vector<RunManifest> ms;
  for (const auto& p : manifests) ms.push_back(read_manifest(p));
  const auto rows = radar_from_manifests(ms);
  const fs::path dir = resolve(out.empty() ? "report" : out);
  fs::create_directories(dir);
  {
    std::ofstream os(dir / "radar.tsv");
    write_radar_table(os, rows);
  }
  Json summary = Json::object();
  for (const auto& m : ms)
    for (auto it = m.metrics.begin(); it != m.metrics.end(); ++it) summary[it.key()] = it.value();
  {
    std::ofstream os(dir / "summary.json");
    os << summary.dump(2) << '\n';
  }
  write_radar_table(std::cout, rows);
  return kOk;
}

int cmd_replay(const std::string& manifest_path, const std::string& base_override, const std::string& out) {
  const RunManifest m = read_manifest(manifest_path);
  std::string base_path = base_override;
  if (base_path.empty()) base_path = m.config.value("base_checkpoint", std::string("base.ckpt"));
  auto base = load_base(base_path);
  const fs::path dir = resolve(out.empty() ? "replay" : out);
  const ReplayReport rep = replay(m, base, dir);
  if (rep.identical()) {
    std::cout << "replay identical: " << m.metrics.size() << " metrics, " << m.runs.size() << " runs\n";
    return kOk;
  }
  std::cout << "replay differs in " << rep.mismatches.size() << " entries:\n";
  for (const auto& k : rep.mismatches) std::cout << "  " << k << '\n';
  return kRunFailed;
}

}  // namespace

int main(int argc, char** argv) {
  // Training allocates and frees the same large buffers every step; keep them out of mmap.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  CLI::App app{"Security evaluation of LoRA, soft prompts and in-context learning on a small language model"};
  app.require_subcommand(1);

  auto* pre = app.add_subcommand("pretrain", "pretrain the base model and write its checkpoint");
  std::string pre_config, pre_out = "base.ckpt";
  std::vector<std::string> pre_sets;
  std::optional<std::uint64_t> pre_seed;
  std::optional<std::size_t> pre_steps;
  bool force = false;
  pre->add_option("-c,--config", pre_config, "JSON pretraining recipe");
  pre->add_option("--set", pre_sets, "override one recipe key");
  pre->add_option("--seed", pre_seed, "pretraining seed");
  pre->add_option("--steps", pre_steps, "optimizer steps");
  pre->add_option("-o,--out", pre_out, "checkpoint path");
  pre->add_flag("--force", force, "overwrite an existing checkpoint");

  ConfigOptions adapt_opts, attack_opts;
  std::string adapt_out, attack_out;
  auto* ad = app.add_subcommand("adapt", "adapt the base with each configured technique and save the adapters");
  adapt_opts.add_to(ad);
  ad->add_option("-o,--out", adapt_out, "output directory");

  auto* at = app.add_subcommand("attack", "run the configured attack sweeps and write tables and a manifest");
  attack_opts.add_to(at);
  at->add_option("-o,--out", attack_out, "output directory");

  auto* rp = app.add_subcommand("report", "radar axes and summary from one or more manifests");
  std::vector<std::string> manifests;
  std::string report_out;
  rp->add_option("manifests", manifests, "manifest.json files")->required();
  rp->add_option("-o,--out", report_out, "output directory");

  auto* rl = app.add_subcommand("replay", "rerun a manifest and compare every metric bitwise");
  std::string replay_manifest, replay_base, replay_out;
  rl->add_option("manifest", replay_manifest, "manifest.json")->required();
  rl->add_option("--base", replay_base, "base checkpoint (default: the one named in the manifest)");
  rl->add_option("-o,--out", replay_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kInvalid;
  }

  try {
    if (*pre) return cmd_pretrain(pre_config, pre_sets, pre_seed, pre_steps, pre_out, force);
    if (*ad) return cmd_adapt(adapt_opts, adapt_out);
    if (*at) return cmd_attack(attack_opts, attack_out);
    if (*rp) return cmd_report(manifests, report_out);
    if (*rl) return cmd_replay(replay_manifest, replay_base, replay_out);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInvalid;
  } catch (const DomainError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInvalid;
  } catch (const std::exception& e) {
    std::cerr << "run failed: " << e.what() << '\n';
    return kRunFailed;
  }
  return kInvalid;
}

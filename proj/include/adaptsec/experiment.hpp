#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "adaptsec/attacks.hpp"

namespace adaptsec {

enum class AttackKind { mia, steal, backdoor, all };
std::string_view to_string(AttackKind a);
AttackKind attack_from_string(std::string_view s);

struct MiaSweep {
  std::size_t lora_repeats = 10;
  std::size_t spt_repeats = 10;
  std::size_t icl_repeats = 300;
  std::size_t icl_nonmembers = 300;
  std::vector<std::size_t> demo_counts{4};
  double fpr = 0.01;
  std::size_t histogram_bins = 40;
};

struct StealSweep {
  std::vector<std::size_t> budgets{250, 500, 1000, 2000};
  std::vector<ProbeSource> sources{ProbeSource::same_distribution, ProbeSource::shifted};
  std::size_t seeds = 5;
  double shift_fraction = 1.0;
};

struct BackdoorSweep {
  std::vector<double> rates{0.1, 0.25, 0.5, 0.75};  // LoRA and SPT
  std::vector<double> icl_rates{0.25, 0.5, 0.75};
  std::vector<PoisonPosition> positions{PoisonPosition::first, PoisonPosition::last};
  std::size_t seeds = 5;
  std::size_t icl_seeds = 20;
};

/// Everything one experiment needs; validated before any run starts.
struct ExperimentConfig {
  std::string task = "agnews4";
  std::vector<Technique> techniques{Technique::lora, Technique::spt, Technique::icl};
  AttackKind attack = AttackKind::all;
  std::uint64_t master_seed = 1;
  std::string base_checkpoint = "base.ckpt";
  std::size_t test_size = 400;
  std::size_t corpus_size = 0;  // 0: derived from the task's split sizes
  std::map<Technique, AdaptConfig> adapt;  // missing entries use AdaptConfig::defaults
  MiaSweep mia;
  StealSweep steal;
  BackdoorSweep backdoor;
  /// Share of planned runs in a sweep cell that must succeed for it to be aggregated.
  double min_success_fraction = 0.8;

  AdaptConfig adapt_config(Technique t) const;
  std::size_t effective_corpus_size() const;
  void validate() const;
  Json to_json() const;
  /// Keys missing from `j` keep their defaults; unknown keys are rejected.
  static ExperimentConfig from_json(const Json& j);
};

struct RunRecord {
  std::string attack;
  Json coords;  // sweep coordinates
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  Json outcome;  // attack outcome when ok
};

/// Reproducible record of one experiment.
struct RunManifest {
  Json config;
  std::string base_digest;
  std::string corpus_digest;
  std::vector<RunRecord> runs;
  Json metrics = Json::object();  // aggregate values, keyed by sweep cell
  bool failed = false;            // some cell fell below min_success_fraction
  double wall_seconds = 0.0;

  Json to_json() const;
  static RunManifest from_json(const Json& j);
};

/// Shared inputs of every run: the corpus, its held-out test split and the pool the splits draw from.
struct ExperimentData {
  const TaskSpec* task = nullptr;
  std::vector<LabeledExample> test;
  std::vector<LabeledExample> pool;
  std::string digest;
};

ExperimentData prepare_data(const ExperimentConfig& config);

/// Runs the configured sweeps against `base`. Outputs go to `out_dir` when it is non-empty.
RunManifest run_experiment(const ExperimentConfig& config, std::shared_ptr<const MiniLM> base,
                           const std::filesystem::path& out_dir = {});

/// Metric keys whose replayed values differ bitwise from the recorded ones.
struct ReplayReport {
  RunManifest replayed;
  std::vector<std::string> mismatches;
  bool identical() const { return mismatches.empty(); }
};
ReplayReport replay(const RunManifest& manifest, std::shared_ptr<const MiniLM> base,
                    const std::filesystem::path& out_dir = {});

/// Five radar axes per technique from one or more manifests; absent inputs stay absent.
struct RadarRow {
  Technique technique = Technique::lora;
  RadarInputs inputs;
  RadarMetrics values;
};
std::vector<RadarRow> radar_from_manifests(const std::vector<RunManifest>& manifests);
/// Tab-separated table; missing values are written as NA.
void write_radar_table(std::ostream& os, const std::vector<RadarRow>& rows);

/// Writes manifest.json atomically.
void write_manifest(const std::filesystem::path& path, const RunManifest& manifest);
RunManifest read_manifest(const std::filesystem::path& path);

/// Seed of one run: derive_seed(master, {hash(attack), hash(technique), coordinates..., repeat}).
std::uint64_t run_seed(std::uint64_t master, std::string_view attack, Technique technique,
                       std::initializer_list<std::uint64_t> coords);

}  // namespace adaptsec

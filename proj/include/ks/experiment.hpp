#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ks/attack.hpp"
#include "ks/defense.hpp"

namespace ks {

/// Arms: clean, white (EoT through the defender's own pool), scenario1,
/// scenario2, eot (disjoint attacker pools of each listed size).
struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::vector<std::string> arms{"clean", "white", "scenario1", "scenario2", "eot"};
  AttackConfig attack;
  std::size_t asr_images = 200;        ///< filtered images for the ASR arms
  std::vector<std::size_t> eot_pools{5};
  TrainConfig attacker_finetune;       ///< pairs fine-tuned by the attacker

  void validate(int num_classes) const;
  KeyValues to_key_values() const;
  static ExperimentConfig from_key_values(const KeyValues& kv);
};

struct Metric {
  std::string name;
  double value;
};

struct ArmResult {
  std::string arm;
  std::string key_mode;
  std::vector<Metric> metrics;
  std::size_t images = 0;
  std::size_t zero_gradient_steps = 0;
  double seconds = 0;

  double metric(const std::string& name) const;
};

struct EvalReport {
  std::vector<ArmResult> arms;
  KeyValues config;
  std::string attack;
  std::string manifest_hash;
  bool partial = true;
  std::string failed_stage;
  std::string error;

  const ArmResult& arm(const std::string& name) const;
  /// Timing fields are omitted when `timing` is false.
  std::string to_json(bool timing = true) const;
  /// arm,norm,eps,metric,value rows; no timing.
  std::string to_csv() const;
  void write(const std::filesystem::path& dir) const;
};

/// fnv1a64 of the manifest file bytes, as "fnv1a64:<16 hex digits>".
std::string manifest_hash(const std::filesystem::path& manifest);

/// Runs the configured arms in order. When `out_dir` is nonempty the report
/// is rewritten after every arm (partial until the last). A failing arm is
/// recorded in the report and rethrown as StageError.
EvalReport run_experiment(const DefenseManifest& manifest, const LabeledImages& train, const LabeledImages& test,
                          const ExperimentConfig& config, const std::filesystem::path& out_dir = {});

}  // namespace ks

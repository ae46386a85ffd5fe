#pragma once

// Experiment configuration: one JSON document describing data generation,
// the expert roster, baselines, the gate, training schedules and metrics.
// Unknown keys are rejected; omitted keys keep their defaults.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "megan/evidential.hpp"
#include "megan/expert.hpp"
#include "megan/gate.hpp"
#include "megan/metrics.hpp"
#include "megan/simdata.hpp"

namespace megan::config {

struct ExpertEntry {
  std::string name;
  simdata::LabelSource label_source = simdata::LabelSource::central;
  std::size_t hidden = 64;
  std::size_t attention = 32;
  double dropout = 0.1;
  expert::AttentionKind attention_kind = expert::AttentionKind::gated;
};

struct BaselineConfig {
  simdata::LabelSource label_source = simdata::LabelSource::central;
  std::size_t hidden = 64;
  std::size_t attention = 32;
  double dropout = 0.25;
  int mc_passes = 40;
  std::size_t ensemble_size = 4;
};

struct GateConfig {
  std::size_t shared_dim = 32;
  std::size_t head_hidden = 16;
  double dropout = 0.25;
  gate::GateLossConfig loss;
  simdata::Split train_split = simdata::Split::train;
  /// Keep the epoch with the lowest val cross-entropy. Needs train_split = train.
  bool select_on_val = true;
};

struct MetricsConfig {
  std::size_t bins = 10;
  metrics::ThresholdConfig thresholds;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::filesystem::path output_dir = "runs/default";
  simdata::GeneratorConfig generator;
  simdata::TrialRaters raters;
  simdata::TrialRaters unseen_raters;
  std::size_t penultimate_dim = 32;
  std::vector<ExpertEntry> experts;
  BaselineConfig baselines;
  evidential::EdlLossConfig edl;
  GateConfig gate;
  expert::TrainConfig expert_training;
  expert::TrainConfig gate_training;
  MetricsConfig metrics;

  /// ConfigError describing the first violated constraint.
  void validate() const;
};

/// The built-in default: the six-expert roster, desk-scale data sizes and
/// the published training hyperparameters.
ExperimentConfig default_config();

/// Parses JSON text over the defaults. ConfigError on syntax errors, type
/// errors, unknown keys or invalid values.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Canonical JSON (sorted keys, every field present).
std::string to_json(const ExperimentConfig& cfg, int indent = 2);

/// FNV-1a of the canonical JSON without seed and output_dir, as 16 hex
/// digits. Runs that differ only in seed or location share a hash.
std::string config_hash(const ExperimentConfig& cfg);

}  // namespace megan::config

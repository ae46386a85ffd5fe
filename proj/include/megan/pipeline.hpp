#pragma once

// Pipeline stages behind the CLI. Every stage reads its inputs from and
// writes its outputs to a per-seed run directory:
//
//   <out>/seed-<N>/dataset/{train,val,test,unseen}.mgd
//   <out>/seed-<N>/experts/<name>.ckpt, experts/loss_curves.csv
//   <out>/seed-<N>/baselines/softmax_<i>.ckpt, baselines/loss_curves.csv
//   <out>/seed-<N>/gate.ckpt, gate_loss.csv
//   <out>/seed-<N>/results.csv, reliability.json, stratification.csv
//
// Stages always rewrite their outputs, so deleting a downstream artifact and
// rerunning its stage reproduces it bit for bit.

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "megan/config.hpp"
#include "megan/metrics.hpp"

namespace megan::pipeline {

enum class Method { softmax, mc_dropout, ensemble, edl, naive, gated };
inline constexpr std::array<Method, 6> kAllMethods = {Method::softmax, Method::mc_dropout, Method::ensemble,
                                                      Method::edl,     Method::naive,      Method::gated};

std::string to_string(Method m);
/// Comma-separated names, or "all". Returned in canonical order without
/// duplicates. ConfigError for unknown names or an empty list.
std::vector<Method> parse_methods(const std::string& list);

/// Methods that report an intrinsic uncertainty (evidential models and their
/// fusions).
bool uncertainty_aware(Method m);

struct Run {
  config::ExperimentConfig cfg;  // cfg.seed and cfg.output_dir select the run
  /// Accept artifacts stamped with a different config hash.
  bool force = false;
  /// Progress messages; null for silence.
  std::ostream* log = nullptr;

  std::filesystem::path dir() const;
  std::string hash() const;
};

std::filesystem::path seed_dir(const std::filesystem::path& out, std::uint64_t seed);

void generate(const Run& run);
void train_experts(const Run& run);
void train_gate(const Run& run);

struct ResultRow {
  Method method = Method::edl;
  simdata::Split split = simdata::Split::test;
  std::uint64_t seed = 0;
  double weighted_f1 = 0.0;
  double ece = 0.0;
  double retention = 0.0;
  double confident_f1 = 0.0;
  double uncertain_f1 = 0.0;
};

struct StratRow {
  Method method = Method::edl;
  simdata::Split split = simdata::Split::test;
  std::uint64_t seed = 0;
  metrics::StratificationTable table;
};

/// Scores `methods` on the test and unseen splits, thresholds fitted on val.
/// Writes results.csv and reliability.json.
std::vector<ResultRow> evaluate(const Run& run, std::span<const Method> methods);
/// Writes stratification.csv.
std::vector<StratRow> stratify(const Run& run, std::span<const Method> methods);

struct SummaryRow {
  Method method = Method::edl;
  simdata::Split split = simdata::Split::test;
  std::string metric;
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation; NaN for one seed
  std::size_t n = 0;
};

struct BenchmarkReport {
  std::vector<ResultRow> results;
  std::vector<StratRow> stratification;
  std::vector<SummaryRow> summary;
};

/// Runs every stage for each seed under run.cfg.output_dir, then writes the
/// combined results.csv, stratification.csv and summary.csv there.
BenchmarkReport benchmark(const Run& run, std::span<const std::uint64_t> seeds, std::span<const Method> methods);

std::string results_csv(std::span<const ResultRow> rows, const std::string& config_hash);
std::string stratification_csv(std::span<const StratRow> rows, const std::string& config_hash);
std::string summary_csv(std::span<const SummaryRow> rows, const std::string& config_hash);
std::vector<SummaryRow> summarize(std::span<const ResultRow> rows);

}  // namespace megan::pipeline

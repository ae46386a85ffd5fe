#pragma once

// Classification and calibration metrics, uncertainty thresholds and the
// confident / uncertain stratification.

#include <array>
#include <cstddef>
#include <span>
#include <vector>

namespace megan::metrics {

inline constexpr std::size_t kNumClasses = 4;

/// Support-weighted mean of per-class F1 over classes present in `labels`.
/// EmptyInput for empty input, ShapeError for a length mismatch.
double weighted_f1(std::span<const int> preds, std::span<const int> labels);

struct ReliabilityBin {
  double lower = 0.0;
  double upper = 0.0;
  std::size_t count = 0;
  double accuracy = 0.0;    // 0 for empty bins
  double confidence = 0.0;  // 0 for empty bins
};

/// M equal-width bins on (0, 1], right-closed: bin m holds (m/M, (m+1)/M];
/// a confidence of exactly 0 goes to the first bin.
std::vector<ReliabilityBin> reliability_diagram(std::span<const double> confidences,
                                                const std::vector<bool>& correct, std::size_t bins = 10);
double ece(std::span<const double> confidences, const std::vector<bool>& correct, std::size_t bins = 10);
double ece_from_bins(std::span<const ReliabilityBin> bins);

struct ScoredPrediction {
  int pred = 0;
  double uncertainty = 0.0;
  int label = 0;
};

struct ThresholdConfig {
  /// Quantile levels in (0, 1] searched per class.
  std::vector<double> grid = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  double min_retention = 0.5;

  void validate() const;
};

struct Thresholds {
  std::array<double, kNumClasses> per_class{};
  /// Fitted on all validation samples; used for classes never predicted there.
  double global = 0.0;
  std::array<bool, kNumClasses> fitted{};
};

/// Lower empirical quantile: the smallest observed value v with
/// P(X <= v) >= q.
double lower_quantile(std::vector<double> values, double q);

/// Per predicted class, picks the grid quantile of the class's validation
/// uncertainties that maximizes weighted F1 on the retained (u <= t) samples
/// while keeping at least min_retention of them; ties go to higher retention.
Thresholds fit_thresholds(std::span<const ScoredPrediction> val, const ThresholdConfig& cfg);

struct StratificationTable {
  Thresholds thresholds;
  std::size_t confident_count = 0;
  std::size_t uncertain_count = 0;
  /// NaN when the subset is empty.
  double confident_f1 = 0.0;
  double uncertain_f1 = 0.0;
  double overall_f1 = 0.0;
  double retention = 0.0;
};

StratificationTable stratify(std::span<const ScoredPrediction> test, const Thresholds& thresholds);

}  // namespace megan::metrics

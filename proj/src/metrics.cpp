#include "megan/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "megan/errors.hpp"

namespace megan::metrics {

namespace {

void check_class(int c) {
  if (c < 0 || c >= static_cast<int>(kNumClasses)) {
    throw DomainError("class id " + std::to_string(c) + " outside 0.." + std::to_string(kNumClasses - 1));
  }
}

std::size_t bin_index(double conf, std::size_t m) {
  const double md = static_cast<double>(m);
  auto idx = static_cast<std::ptrdiff_t>(std::ceil(conf * md)) - 1;
  idx = std::clamp<std::ptrdiff_t>(idx, 0, static_cast<std::ptrdiff_t>(m) - 1);
  // ceil(conf * M) can land one bin off when conf * M rounds across an
  // integer; settle against the bin edges actually reported.
  while (idx > 0 && conf <= static_cast<double>(idx) / md) --idx;
  while (idx + 1 < static_cast<std::ptrdiff_t>(m) && conf > static_cast<double>(idx + 1) / md) ++idx;
  return static_cast<std::size_t>(idx);
}

double subset_f1(std::span<const ScoredPrediction> all, const std::vector<std::size_t>& idx) {
  if (idx.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::vector<int> p, l;
  p.reserve(idx.size());
  l.reserve(idx.size());
  for (std::size_t i : idx) {
    p.push_back(all[i].pred);
    l.push_back(all[i].label);
  }
  return weighted_f1(p, l);
}

// Threshold search over one group of validation predictions.
double fit_group(std::span<const ScoredPrediction> all, const std::vector<std::size_t>& group,
                 const ThresholdConfig& cfg) {
  std::vector<double> u;
  u.reserve(group.size());
  for (std::size_t i : group) u.push_back(all[i].uncertainty);
  const double max_u = *std::max_element(u.begin(), u.end());
  const double n = static_cast<double>(group.size());

  double best_t = max_u;
  double best_f1 = -1.0;
  double best_retention = -1.0;
  for (double q : cfg.grid) {
    const double t = lower_quantile(u, q);
    std::vector<std::size_t> kept;
    for (std::size_t i : group) {
      if (all[i].uncertainty <= t) kept.push_back(i);
    }
    const double retention = static_cast<double>(kept.size()) / n;
    if (retention < cfg.min_retention) continue;
    const double f1 = subset_f1(all, kept);
    if (f1 > best_f1 || (f1 == best_f1 && retention > best_retention)) {
      best_f1 = f1;
      best_retention = retention;
      best_t = t;
    }
  }
  return best_t;
}

}  // namespace

double weighted_f1(std::span<const int> preds, std::span<const int> labels) {
  if (preds.empty()) throw EmptyInput("weighted_f1 of an empty set");
  if (preds.size() != labels.size()) throw ShapeError("weighted_f1: preds and labels differ in length");
  std::array<double, kNumClasses> tp{}, fp{}, fn{}, support{};
  for (std::size_t i = 0; i < preds.size(); ++i) {
    check_class(preds[i]);
    check_class(labels[i]);
    const auto p = static_cast<std::size_t>(preds[i]);
    const auto y = static_cast<std::size_t>(labels[i]);
    support[y] += 1.0;
    if (p == y) {
      tp[p] += 1.0;
    } else {
      fp[p] += 1.0;
      fn[y] += 1.0;
    }
  }
  double total = 0.0;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    if (support[c] == 0.0) continue;
    const double denom = 2.0 * tp[c] + fp[c] + fn[c];
    const double f1 = tp[c] == 0.0 ? 0.0 : 2.0 * tp[c] / denom;
    total += support[c] * f1;
  }
  return total / static_cast<double>(labels.size());
}

std::vector<ReliabilityBin> reliability_diagram(std::span<const double> confidences, const std::vector<bool>& correct,
                                                std::size_t bins) {
  if (confidences.empty()) throw EmptyInput("reliability diagram of an empty set");
  if (confidences.size() != correct.size()) throw ShapeError("confidences and correctness differ in length");
  if (bins == 0) throw ConfigError("bin count must be >= 1");
  std::vector<ReliabilityBin> out(bins);
  std::vector<double> acc_sum(bins, 0.0), conf_sum(bins, 0.0);
  for (std::size_t m = 0; m < bins; ++m) {
    out[m].lower = static_cast<double>(m) / static_cast<double>(bins);
    out[m].upper = static_cast<double>(m + 1) / static_cast<double>(bins);
  }
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    const double c = confidences[i];
    if (!(c >= 0.0 && c <= 1.0)) throw DomainError("confidence " + std::to_string(c) + " outside [0, 1]");
    const std::size_t m = bin_index(c, bins);
    ++out[m].count;
    acc_sum[m] += correct[i] ? 1.0 : 0.0;
    conf_sum[m] += c;
  }
  for (std::size_t m = 0; m < bins; ++m) {
    if (out[m].count == 0) continue;
    out[m].accuracy = acc_sum[m] / static_cast<double>(out[m].count);
    out[m].confidence = conf_sum[m] / static_cast<double>(out[m].count);
  }
  return out;
}

double ece_from_bins(std::span<const ReliabilityBin> bins) {
  std::size_t n = 0;
  for (const auto& b : bins) n += b.count;
  if (n == 0) throw EmptyInput("ECE over empty bins");
  double total = 0.0;
  for (const auto& b : bins) {
    if (b.count == 0) continue;
    total += static_cast<double>(b.count) / static_cast<double>(n) * std::abs(b.accuracy - b.confidence);
  }
  return total;
}

double ece(std::span<const double> confidences, const std::vector<bool>& correct, std::size_t bins) {
  return ece_from_bins(reliability_diagram(confidences, correct, bins));
}

void ThresholdConfig::validate() const {
  if (grid.empty()) throw ConfigError("threshold grid must not be empty");
  for (double q : grid) {
    if (!(q > 0.0 && q <= 1.0)) throw ConfigError("threshold grid levels must lie in (0, 1]");
  }
  if (!(min_retention >= 0.0 && min_retention <= 1.0)) throw ConfigError("min_retention must lie in [0, 1]");
}

double lower_quantile(std::vector<double> values, double q) {
  if (values.empty()) throw EmptyInput("quantile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = std::ceil(q * static_cast<double>(values.size()) - 1e-12);
  const auto k = std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(pos) - 1, 0,
                                            static_cast<std::ptrdiff_t>(values.size()) - 1);
  return values[static_cast<std::size_t>(k)];
}

Thresholds fit_thresholds(std::span<const ScoredPrediction> val, const ThresholdConfig& cfg) {
  cfg.validate();
  if (val.empty()) throw EmptyInput("fit_thresholds needs validation predictions");
  Thresholds out;
  std::vector<std::size_t> everyone(val.size());
  for (std::size_t i = 0; i < val.size(); ++i) {
    check_class(val[i].pred);
    check_class(val[i].label);
    everyone[i] = i;
  }
  out.global = fit_group(val, everyone, cfg);
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    std::vector<std::size_t> group;
    for (std::size_t i = 0; i < val.size(); ++i) {
      if (static_cast<std::size_t>(val[i].pred) == c) group.push_back(i);
    }
    if (group.empty()) {
      out.per_class[c] = out.global;
      continue;
    }
    out.per_class[c] = fit_group(val, group, cfg);
    out.fitted[c] = true;
  }
  return out;
}

StratificationTable stratify(std::span<const ScoredPrediction> test, const Thresholds& thresholds) {
  if (test.empty()) throw EmptyInput("stratify over an empty set");
  StratificationTable t;
  t.thresholds = thresholds;
  std::vector<std::size_t> confident, uncertain, all(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    check_class(test[i].pred);
    all[i] = i;
    if (test[i].uncertainty <= thresholds.per_class[static_cast<std::size_t>(test[i].pred)]) {
      confident.push_back(i);
    } else {
      uncertain.push_back(i);
    }
  }
  t.confident_count = confident.size();
  t.uncertain_count = uncertain.size();
  t.confident_f1 = subset_f1(test, confident);
  t.uncertain_f1 = subset_f1(test, uncertain);
  t.overall_f1 = subset_f1(test, all);
  t.retention = static_cast<double>(confident.size()) / static_cast<double>(test.size());
  return t;
}

}  // namespace megan::metrics

#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace adaptsec {

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  bool operator==(const RocPoint&) const = default;
};

/// Empirical ROC of a loss-threshold attack. A sample is called a member
/// when its loss is <= the threshold; there is one threshold per distinct
/// score, preceded by the trivial (0, 0) point.
struct RocCurve {
  std::vector<RocPoint> points;
  std::vector<double> thresholds;  // thresholds[0] is -inf
};

RocCurve roc(std::span<const double> member_losses, std::span<const double> nonmember_losses);

/// TPR at the largest achieved FPR not above `target` (no interpolation).
double tpr_at_fpr(const RocCurve& curve, double target = 0.01);

/// Fraction of positions where the two label lists agree.
double agreement(std::span<const std::size_t> a, std::span<const std::size_t> b);
/// Same arithmetic against gold labels.
double accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> gold);

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n - 1); 0 for a single value
  std::size_t n = 0;
};
Summary summarize(std::span<const double> values);

/// Inputs to the five-axis comparison. Missing values stay missing in the output.
struct RadarInputs {
  std::optional<double> n_train;
  std::optional<double> tpr_at_1pct;
  std::optional<double> agreement;
  std::optional<double> asr;
  std::optional<double> utility;
};

struct RadarMetrics {
  std::optional<double> data_efficiency;      // 4 / n_train
  std::optional<double> privacy;              // 1 - TPR@FPR=0.01
  std::optional<double> stealing_robustness;  // 1 - agreement
  std::optional<double> bd_poisoned;          // 1 - ASR
  std::optional<double> bd_clean;             // utility
};

RadarMetrics radar(const RadarInputs& in);

/// Two-column table (fpr, tpr) at full threshold resolution.
void write_roc_table(std::ostream& os, const RocCurve& curve);
/// (fpr, tpr) read at log-spaced FPR values from `min_fpr` to 1, for log-log plots.
void write_roc_loglog(std::ostream& os, const RocCurve& curve, double min_fpr = 1e-3, std::size_t points = 31);

}  // namespace adaptsec

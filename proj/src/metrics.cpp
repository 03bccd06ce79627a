#include "adaptsec/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

#include "adaptsec/errors.hpp"

namespace adaptsec {

namespace {

void require_finite(std::span<const double> xs, const char* what) {
  for (double x : xs)
    if (!std::isfinite(x)) throw DomainError(std::string("roc: non-finite ") + what + " score");
}

void require_fraction(const std::optional<double>& v, const char* name) {
  if (v && !(*v >= 0.0 && *v <= 1.0)) throw DomainError(std::string("radar: ") + name + " must lie in [0, 1]");
}

// Counts compared against target * n with a little slack so that, e.g.,
// 3 false positives out of 300 count as FPR 0.01.
constexpr double kSlack = 1e-9;

}  // namespace

RocCurve roc(std::span<const double> member_losses, std::span<const double> nonmember_losses) {
  if (member_losses.empty()) throw SizeError("roc: no member scores");
  if (nonmember_losses.empty()) throw SizeError("roc: no nonmember scores");
  require_finite(member_losses, "member");
  require_finite(nonmember_losses, "nonmember");

  std::vector<double> m(member_losses.begin(), member_losses.end());
  std::vector<double> n(nonmember_losses.begin(), nonmember_losses.end());
  std::sort(m.begin(), m.end());
  std::sort(n.begin(), n.end());
  std::vector<double> all;
  all.reserve(m.size() + n.size());
  std::merge(m.begin(), m.end(), n.begin(), n.end(), std::back_inserter(all));
  all.erase(std::unique(all.begin(), all.end()), all.end());

  RocCurve c;
  c.points.push_back({0.0, 0.0});
  c.thresholds.push_back(-std::numeric_limits<double>::infinity());
  const double M = static_cast<double>(m.size()), N = static_cast<double>(n.size());
  std::size_t im = 0, in = 0;
  for (double t : all) {
    while (im < m.size() && m[im] <= t) ++im;
    while (in < n.size() && n[in] <= t) ++in;
    c.points.push_back({static_cast<double>(in) / N, static_cast<double>(im) / M});
    c.thresholds.push_back(t);
  }
  return c;
}

double tpr_at_fpr(const RocCurve& curve, double target) {
  if (!(target > 0.0 && target <= 1.0)) throw ContractError("tpr_at_fpr: target must lie in (0, 1]");
  double best = 0.0;
  for (const auto& p : curve.points)
    if (p.fpr <= target + kSlack) best = std::max(best, p.tpr);
  return best;
}

double agreement(std::span<const std::size_t> a, std::span<const std::size_t> b) {
  if (a.size() != b.size())
    throw SizeError("agreement: lists of length " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  if (a.empty()) throw SizeError("agreement: empty lists");
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) same += a[i] == b[i];
  return static_cast<double>(same) / static_cast<double>(a.size());
}

double accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> gold) {
  return agreement(predicted, gold);
}

Summary summarize(std::span<const double> values) {
  Summary s;
  s.n = values.size();
  if (values.empty()) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(s.n);
  if (s.n > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(s.n - 1));
  }
  return s;
}

RadarMetrics radar(const RadarInputs& in) {
  if (in.n_train && !(*in.n_train >= 4.0))
    throw DomainError("radar: n_train must be at least 4 (got " + std::to_string(*in.n_train) + ")");
  require_fraction(in.tpr_at_1pct, "TPR");
  require_fraction(in.agreement, "agreement");
  require_fraction(in.asr, "ASR");
  require_fraction(in.utility, "utility");

  RadarMetrics r;
  if (in.n_train) r.data_efficiency = 4.0 / *in.n_train;
  if (in.tpr_at_1pct) r.privacy = 1.0 - *in.tpr_at_1pct;
  if (in.agreement) r.stealing_robustness = 1.0 - *in.agreement;
  if (in.asr) r.bd_poisoned = 1.0 - *in.asr;
  if (in.utility) r.bd_clean = *in.utility;
  return r;
}

void write_roc_table(std::ostream& os, const RocCurve& curve) {
  os << "fpr\ttpr\n";
  os.precision(17);
  for (const auto& p : curve.points) os << p.fpr << '\t' << p.tpr << '\n';
}

void write_roc_loglog(std::ostream& os, const RocCurve& curve, double min_fpr, std::size_t points) {
  if (!(min_fpr > 0.0 && min_fpr < 1.0) || points < 2) throw ContractError("roc downsampling: bad grid");
  os << "fpr\ttpr\n";
  os.precision(17);
  const double lo = std::log10(min_fpr);
  for (std::size_t i = 0; i < points; ++i) {
    const double f = i + 1 == points ? 1.0 : std::pow(10.0, lo + (0.0 - lo) * static_cast<double>(i) / static_cast<double>(points - 1));
    os << f << '\t' << tpr_at_fpr(curve, f) << '\n';
  }
}

}  // namespace adaptsec

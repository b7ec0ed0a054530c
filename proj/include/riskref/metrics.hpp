#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/math/distributions/binomial.hpp>
#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>

#include "riskref/config.hpp"

namespace riskref {

namespace detail {

inline void check_scored(std::span<const double> scores, std::span<const int> labels, const char* op) {
  if (scores.size() != labels.size())
    throw std::invalid_argument(std::string(op) + ": " + std::to_string(scores.size()) + " scores vs " +
                                std::to_string(labels.size()) + " labels");
  for (int l : labels)
    if (l != 0 && l != 1) throw std::invalid_argument(std::string(op) + ": labels must be 0 or 1");
  for (double s : scores)
    if (std::isnan(s)) throw std::invalid_argument(std::string(op) + ": NaN score");
}

inline std::size_t count_positive(std::span<const int> labels) {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
}

inline void require_both_classes(std::span<const int> labels, const char* op) {
  const auto pos = count_positive(labels);
  if (pos == 0 || pos == labels.size()) throw std::invalid_argument(std::string(op) + ": both classes required");
}

// 1-based midranks (ties share the average rank).
inline std::vector<double> midranks(std::span<const double> x) {
  const std::size_t n = x.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && x[order[j]] == x[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) r[order[k]] = rank;
    i = j;
  }
  return r;
}

inline double psi(double pos, double neg) { return pos > neg ? 1.0 : (pos == neg ? 0.5 : 0.0); }

}  // namespace detail

// Mann-Whitney U / (N_pos N_neg), ties counted one half.
inline double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  detail::check_scored(scores, labels, "roc_auc");
  detail::require_both_classes(labels, "roc_auc");
  const auto r = detail::midranks(scores);
  const double m = static_cast<double>(detail::count_positive(labels));
  const double n = static_cast<double>(labels.size()) - m;
  double rank_sum = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i]) rank_sum += r[i];
  return (rank_sum - m * (m + 1) / 2) / (m * n);
}

// AUCs and their DeLong covariance for k score vectors on shared labels.
struct DelongCovariance {
  std::vector<double> auc;
  std::vector<std::vector<double>> covariance;
};

// Midrank formulation, O(k n log n).
inline DelongCovariance delong_covariance(const std::vector<std::vector<double>>& score_sets, std::span<const int> labels) {
  if (score_sets.empty()) throw std::invalid_argument("delong: no score vectors");
  for (const auto& s : score_sets) detail::check_scored(s, labels, "delong");
  detail::require_both_classes(labels, "delong");
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] ? pos : neg).push_back(i);
  const std::size_t m = pos.size(), n = neg.size(), k = score_sets.size();
  std::vector<std::vector<double>> v10(k, std::vector<double>(m)), v01(k, std::vector<double>(n));
  DelongCovariance out;
  for (std::size_t r = 0; r < k; ++r) {
    const auto& s = score_sets[r];
    std::vector<double> xs, ys;
    for (auto i : pos) xs.push_back(s[i]);
    for (auto j : neg) ys.push_back(s[j]);
    const auto tx = detail::midranks(xs), ty = detail::midranks(ys), tz = detail::midranks(s);
    double sum_pos = 0;
    for (std::size_t a = 0; a < m; ++a) {
      sum_pos += tz[pos[a]];
      v10[r][a] = (tz[pos[a]] - tx[a]) / static_cast<double>(n);
    }
    for (std::size_t b = 0; b < n; ++b) v01[r][b] = 1.0 - (tz[neg[b]] - ty[b]) / static_cast<double>(m);
    out.auc.push_back((sum_pos - static_cast<double>(m) * static_cast<double>(m + 1) / 2) /
                      (static_cast<double>(m) * static_cast<double>(n)));
  }
  auto cov = [](const std::vector<double>& a, const std::vector<double>& b, double ma, double mb) {
    if (a.size() < 2) return 0.0;
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - ma) * (b[i] - mb);
    return s / static_cast<double>(a.size() - 1);
  };
  out.covariance.assign(k, std::vector<double>(k));
  for (std::size_t r = 0; r < k; ++r)
    for (std::size_t q = 0; q < k; ++q)
      out.covariance[r][q] = cov(v10[r], v10[q], out.auc[r], out.auc[q]) / static_cast<double>(m) +
                             cov(v01[r], v01[q], out.auc[r], out.auc[q]) / static_cast<double>(n);
  return out;
}

// Structural components from their O(n^2) definition.
inline DelongCovariance delong_covariance_slow(const std::vector<std::vector<double>>& score_sets,
                                               std::span<const int> labels) {
  if (score_sets.empty()) throw std::invalid_argument("delong: no score vectors");
  for (const auto& s : score_sets) detail::check_scored(s, labels, "delong");
  detail::require_both_classes(labels, "delong");
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] ? pos : neg).push_back(i);
  const double m = static_cast<double>(pos.size()), n = static_cast<double>(neg.size());
  const std::size_t k = score_sets.size();
  std::vector<std::vector<double>> v10(k), v01(k);
  DelongCovariance out;
  for (std::size_t r = 0; r < k; ++r) {
    const auto& s = score_sets[r];
    double total = 0;
    for (auto i : pos) {
      double acc = 0;
      for (auto j : neg) acc += detail::psi(s[i], s[j]);
      v10[r].push_back(acc / n);
      total += acc;
    }
    for (auto j : neg) {
      double acc = 0;
      for (auto i : pos) acc += detail::psi(s[i], s[j]);
      v01[r].push_back(acc / m);
    }
    out.auc.push_back(total / (m * n));
  }
  out.covariance.assign(k, std::vector<double>(k));
  for (std::size_t r = 0; r < k; ++r)
    for (std::size_t q = 0; q < k; ++q) {
      double s10 = 0, s01 = 0;
      for (std::size_t a = 0; a < pos.size(); ++a) s10 += (v10[r][a] - out.auc[r]) * (v10[q][a] - out.auc[q]);
      for (std::size_t b = 0; b < neg.size(); ++b) s01 += (v01[r][b] - out.auc[r]) * (v01[q][b] - out.auc[q]);
      out.covariance[r][q] = (pos.size() > 1 ? s10 / (m - 1) / m : 0.0) + (neg.size() > 1 ? s01 / (n - 1) / n : 0.0);
    }
  return out;
}

struct DelongInterval {
  double auc = 0;
  double variance = 0;
  double ci_low = 0;
  double ci_high = 0;
  bool degenerate = false;  // zero variance: the interval collapses to the point
};

inline DelongInterval delong_ci(std::span<const double> scores, std::span<const int> labels, double alpha = 0.05) {
  if (!(alpha > 0 && alpha < 1)) throw std::invalid_argument("delong_ci: alpha must be in (0, 1)");
  const auto d = delong_covariance({std::vector<double>(scores.begin(), scores.end())}, labels);
  DelongInterval out;
  out.auc = d.auc[0];
  out.variance = std::max(0.0, d.covariance[0][0]);
  out.degenerate = out.variance == 0.0;
  const double z = boost::math::quantile(boost::math::normal(), 1 - alpha / 2);
  const double half = z * std::sqrt(out.variance);
  out.ci_low = std::clamp(out.auc - half, 0.0, 1.0);
  out.ci_high = std::clamp(out.auc + half, 0.0, 1.0);
  return out;
}

// Two-sided z-test on the AUC difference of paired scores.
inline double delong_paired_test(std::span<const double> a, std::span<const double> b, std::span<const int> labels) {
  if (a.size() != b.size()) throw std::invalid_argument("delong_paired_test: score vectors differ in length");
  if (std::equal(a.begin(), a.end(), b.begin())) return 1.0;
  const auto d = delong_covariance({std::vector<double>(a.begin(), a.end()), std::vector<double>(b.begin(), b.end())},
                                   labels);
  const double diff = d.auc[0] - d.auc[1];
  const double var = d.covariance[0][0] + d.covariance[1][1] - 2 * d.covariance[0][1];
  if (!(var > 0)) return diff == 0 ? 1.0 : 0.0;
  const double z = std::abs(diff) / std::sqrt(var);
  return 2 * boost::math::cdf(boost::math::complement(boost::math::normal(), z));
}

struct McNemarResult {
  std::size_t b = 0;  // a correct, b wrong
  std::size_t c = 0;  // a wrong, b correct
  double statistic = 0;
  double p = 1;
  bool exact = false;
};

inline constexpr std::size_t kMcNemarExactBelow = 25;

// automatic: exact binomial below 25 discordant pairs, corrected chi-square otherwise.
enum class McNemarMethod { automatic, exact, chi_square };

inline McNemarResult mcnemar_counts(std::size_t b, std::size_t c, McNemarMethod method = McNemarMethod::automatic) {
  McNemarResult r{b, c, 0.0, 1.0, false};
  const std::size_t n = b + c;
  if (n == 0) return r;
  const bool exact = method == McNemarMethod::exact || (method == McNemarMethod::automatic && n < kMcNemarExactBelow);
  if (exact) {
    r.exact = true;
    r.statistic = static_cast<double>(std::min(b, c));
    const boost::math::binomial_distribution<double> dist(static_cast<double>(n), 0.5);
    r.p = std::min(1.0, 2 * boost::math::cdf(dist, static_cast<double>(std::min(b, c))));
  } else {
    const double d = std::abs(static_cast<double>(b) - static_cast<double>(c)) - 1.0;
    r.statistic = d * d / static_cast<double>(n);
    r.p = boost::math::cdf(boost::math::complement(boost::math::chi_squared(1.0), r.statistic));
  }
  return r;
}

// Paired comparison of two classifiers' correctness on the same cases.
inline McNemarResult mcnemar(std::span<const int> pred_a, std::span<const int> pred_b, std::span<const int> truth,
                             McNemarMethod method = McNemarMethod::automatic) {
  if (pred_a.size() != pred_b.size() || pred_a.size() != truth.size())
    throw std::invalid_argument("mcnemar: arrays differ in length");
  std::size_t b = 0, c = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const bool ca = pred_a[i] == truth[i], cb = pred_b[i] == truth[i];
    b += ca && !cb;
    c += !ca && cb;
  }
  return mcnemar_counts(b, c, method);
}

struct KappaResult {
  double kappa = 0;
  bool defined = true;  // false when chance agreement is 1 but observed agreement is not
};

inline KappaResult cohens_kappa(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size()) throw std::invalid_argument("cohens_kappa: arrays differ in length");
  if (a.empty()) throw std::invalid_argument("cohens_kappa: empty arrays");
  const double n = static_cast<double>(a.size());
  double agree = 0, a1 = 0, b1 = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if ((a[i] != 0 && a[i] != 1) || (b[i] != 0 && b[i] != 1)) throw std::invalid_argument("cohens_kappa: binary inputs");
    agree += a[i] == b[i];
    a1 += a[i];
    b1 += b[i];
  }
  const double po = agree / n;
  const double pe = (a1 / n) * (b1 / n) + (1 - a1 / n) * (1 - b1 / n);
  if (pe == 1.0) return po == 1.0 ? KappaResult{1.0, true} : KappaResult{std::numeric_limits<double>::quiet_NaN(), false};
  return {(po - pe) / (1 - pe), true};
}

// Agreement of two classifiers on which cases are true positives: kappa over
// the per-case TP indicators of every evaluated case.
inline KappaResult tp_agreement_kappa(std::span<const int> pred_a, std::span<const int> pred_b, std::span<const int> truth) {
  if (pred_a.size() != truth.size() || pred_b.size() != truth.size())
    throw std::invalid_argument("tp_agreement_kappa: arrays differ in length");
  std::vector<int> ta, tb;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ta.push_back(truth[i] && pred_a[i]);
    tb.push_back(truth[i] && pred_b[i]);
  }
  return cohens_kappa(ta, tb);
}

// Largest threshold among the observed scores (and +inf) whose sensitivity,
// under the rule score >= threshold, reaches the target.
inline double select_operating_point(std::span<const double> scores, std::span<const int> labels,
                                     double target_sensitivity) {
  detail::check_scored(scores, labels, "select_operating_point");
  if (!(target_sensitivity >= 0.0 && target_sensitivity <= 1.0))
    throw std::invalid_argument("select_operating_point: target sensitivity must be in [0, 1]");
  const auto positives = detail::count_positive(labels);
  if (positives == 0) throw std::invalid_argument("select_operating_point: no positives");
  if (target_sensitivity == 0.0) return std::numeric_limits<double>::infinity();
  std::vector<double> pos_scores;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i]) pos_scores.push_back(scores[i]);
  std::sort(pos_scores.begin(), pos_scores.end(), std::greater<>());
  // Only positive scores change sensitivity; among equal sensitivities the
  // largest observed score is a positive's own score.
  for (std::size_t k = 0; k < pos_scores.size(); ++k) {
    const double t = pos_scores[k];
    std::size_t tp = 0;
    while (tp < pos_scores.size() && pos_scores[tp] >= t) ++tp;
    if (static_cast<double>(tp) / static_cast<double>(positives) >= target_sensitivity) return t;
  }
  return pos_scores.back();
}

struct ConfusionReport {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;

  static double ratio(std::size_t a, std::size_t b) {
    return b ? static_cast<double>(a) / static_cast<double>(b) : std::numeric_limits<double>::quiet_NaN();
  }
  double sensitivity() const { return ratio(tp, tp + fn); }
  double specificity() const { return ratio(tn, tn + fp); }
  double fpr() const { return ratio(fp, fp + tn); }
  std::size_t total() const { return tp + fp + tn + fn; }
};

inline std::vector<int> classify(std::span<const double> scores, double threshold) {
  std::vector<int> out;
  for (double s : scores) out.push_back(s >= threshold);
  return out;
}

inline ConfusionReport confusion(std::span<const double> scores, std::span<const int> labels, double threshold) {
  detail::check_scored(scores, labels, "confusion");
  ConfusionReport r;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    if (labels[i]) (pred ? r.tp : r.fn) += 1;
    else (pred ? r.fp : r.tn) += 1;
  }
  return r;
}

// ---------------------------------------------------------------- reports

inline std::string two_decimals(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

// A published two-decimal value agrees with a rate when it is the rate
// rounded or truncated to two decimals.
inline bool matches_two_decimals(double rate, double published) {
  const long long p = std::llround(published * 100);
  return std::llround(rate * 100) == p || static_cast<long long>(std::floor(rate * 100 + 1e-9)) == p;
}

// One evaluated condition (e.g. 0..3 priors or a single lagged prior).
struct ConditionRow {
  std::string variant;
  std::string horizon;  // "current" or "5y"
  std::string condition;
  double threshold = 0;
  ConfusionReport counts;
  DelongInterval auc;
  // Comparisons against the reference (0-prior) condition on the same cases.
  std::optional<double> mcnemar_sensitivity_p;
  std::optional<double> mcnemar_specificity_p;
  std::optional<double> delong_p;
  std::optional<double> tp_kappa;
};

inline std::string csv_number(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline std::string csv_number(const std::optional<double>& v) { return v ? csv_number(*v) : std::string(); }

inline std::string report_csv(std::span<const ConditionRow> rows) {
  std::string out =
      "variant,horizon,condition,FN,TP,FP,TN,sens,spec,fpr,auc,ci_low,ci_high,threshold,mcnemar_sens_p,"
      "mcnemar_spec_p,delong_p,tp_kappa\n";
  for (const auto& r : rows) {
    out += r.variant + "," + r.horizon + "," + r.condition + "," + std::to_string(r.counts.fn) + "," +
           std::to_string(r.counts.tp) + "," + std::to_string(r.counts.fp) + "," + std::to_string(r.counts.tn) + "," +
           csv_number(r.counts.sensitivity()) + "," + csv_number(r.counts.specificity()) + "," +
           csv_number(r.counts.fpr()) + "," + csv_number(r.auc.auc) + "," + csv_number(r.auc.ci_low) + "," +
           csv_number(r.auc.ci_high) + "," + csv_number(r.threshold) + "," + csv_number(r.mcnemar_sensitivity_p) + "," +
           csv_number(r.mcnemar_specificity_p) + "," + csv_number(r.delong_p) + "," + csv_number(r.tp_kappa) + "\n";
  }
  return out;
}

// ** p < 0.001, * p < 0.01, + p < 0.05
inline std::string significance_marker(const std::optional<double>& p) {
  if (!p) return "";
  if (*p < 0.001) return "**";
  if (*p < 0.01) return "*";
  if (*p < 0.05) return "+";
  return "";
}

// Specificity (TN/N), Sensitivity (TP/P) and AUC [95% CI] per horizon, one
// line per variant and condition.
inline std::string table_summary(std::span<const ConditionRow> rows) {
  auto fmt2 = [](double v) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return std::string(buf);
  };
  auto cell = [&](const ConditionRow& r) {
    return fmt2(r.counts.specificity()) + significance_marker(r.mcnemar_specificity_p) + " (" +
           std::to_string(r.counts.tn) + "/" + std::to_string(r.counts.tn + r.counts.fp) + ")  " +
           fmt2(r.counts.sensitivity()) + significance_marker(r.mcnemar_sensitivity_p) + " (" +
           std::to_string(r.counts.tp) + "/" + std::to_string(r.counts.tp + r.counts.fn) + ")  " + fmt2(r.auc.auc) +
           significance_marker(r.delong_p) + " [" + fmt2(r.auc.ci_low) + ", " + fmt2(r.auc.ci_high) + "]";
  };
  std::vector<std::string> keys;
  for (const auto& r : rows) {
    const auto key = r.variant + "\t" + r.condition;
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) keys.push_back(key);
  }
  std::string out = "variant\tcondition\tcurrent: specificity  sensitivity  AUC [95% CI]\t5y: specificity  sensitivity  AUC [95% CI]\n";
  for (const auto& key : keys) {
    std::string current = "-", five = "-";
    for (const auto& r : rows) {
      if (r.variant + "\t" + r.condition != key) continue;
      (r.horizon == "current" ? current : five) = cell(r);
    }
    out += key + "\t" + current + "\t" + five + "\n";
  }
  out += "** p<0.001, * p<0.01, + p<0.05 versus the no-prior condition (McNemar for rates, DeLong for AUC)\n";
  return out;
}

}  // namespace riskref

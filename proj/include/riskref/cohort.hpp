#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "riskref/config.hpp"
#include "riskref/error.hpp"

namespace riskref {

inline constexpr std::size_t kImagingFeatureDim = 64;
inline constexpr std::size_t kClinicalFeatureDim = 3;
inline constexpr std::size_t kLatentDim = 4;

struct ClinicalSample {
  double psa = 1.0;  // ng/mL
  double age = 60.0;
  double prostate_volume = 40.0;  // cc

  bool operator==(const ClinicalSample&) const = default;
};

struct Visit {
  int time = 0;  // months since cohort epoch
  std::optional<std::vector<double>> imaging;
  std::optional<ClinicalSample> clinical;
  std::optional<int> label;  // 1 = high risk; present iff imaging is present

  bool operator==(const Visit&) const = default;
};

// Generator ground truth. Never serialized and never visible to models.
struct LatentTrajectory {
  bool progressor = false;
  double baseline = 0.0;        // risk-axis state at the first visit
  double drift_per_year = 0.0;  // zero for non-progressors
  double confounder = 0.0;      // stable, benign, shifts imaging and PSA but not the label
  std::array<double, 2> nuisance{};
  int start_month = 0;

  double risk_state(int month) const { return baseline + drift_per_year * (month - start_month) / 12.0; }
};

struct PatientRecord {
  std::string id;
  std::vector<Visit> visits;
  LatentTrajectory latent;
};

using Cohort = std::vector<PatientRecord>;

struct ImagingPrior {
  Visit visit;
  int delta_months = 0;
};

struct ClinicalPrior {
  ClinicalSample sample;
  int delta_months = 0;  // relative to the index clinical sample when present
};

enum Horizon : std::size_t { kCurrent = 0, kFiveYear = 1 };
inline constexpr std::size_t kHorizonCount = 2;
inline constexpr std::array<int, kHorizonCount> kHorizonYears{0, 5};

// One index visit with its strictly-earlier history. Priors are ordered most
// recent first.
struct IndexCase {
  std::string patient_id;
  Visit index;
  std::vector<ImagingPrior> imaging_priors;
  std::vector<ClinicalPrior> clinical_priors;
  std::optional<ClinicalSample> index_clinical;
  int index_clinical_lag = 0;  // months between index clinical sample and index visit
  std::array<int, kHorizonCount> labels{};
  std::array<int, kHorizonCount> masks{};
};

struct CohortSplit {
  Cohort train;
  Cohort validation;
  Cohort test;
};

enum class Track { imaging, clinical };

inline const char* track_name(Track t) { return t == Track::imaging ? "imaging" : "clinical"; }

inline constexpr int kMaxImagingBucket = 10;
inline constexpr int kMaxClinicalBucket = 40;

inline int max_bucket(Track t) { return t == Track::imaging ? kMaxImagingBucket : kMaxClinicalBucket; }

// Yearly buckets for imaging (max 10), quarterly for clinical (max 40).
inline int discretize_interval(int delta_months, Track track) {
  if (delta_months < 0) throw std::invalid_argument("discretize_interval: negative interval " + std::to_string(delta_months));
  const int width = track == Track::imaging ? 12 : 3;
  return std::min(delta_months / width, max_bucket(track));
}

struct GeneratorConfig {
  std::int64_t n_patients = 2000;
  double single_visit_fraction = 0.3;
  double extra_visits_mean = 1.5;  // imaging visits beyond 2 for longitudinal patients (Poisson)
  std::int64_t max_visits = 8;
  double interval_mean_months = 21.6;
  double interval_sd_months = 13.2;
  int interval_min_months = 3;
  int interval_max_months = 96;
  double prevalence = 0.35;      // fraction of progressing patients
  double drift_strength = 0.6;   // mean yearly drift of progressors, risk-axis units
  double confounder_sd = 0.8;
  double imaging_noise = 1.0;
  double psa_noise = 0.3;  // sd of ln PSA measurement noise
  double signal_scale = 2.0;
  double label_noise = 0.25;  // clipped at 3 sd, so non-progressors stay negative
  double clinical_at_imaging = 0.85;
  double clinical_between_mean = 1.0;  // clinical-only visits per imaging gap (Poisson)
  double clinical_before_mean = 1.0;   // clinical-only visits before the first imaging exam
  std::uint64_t projection_seed = 1234;

  void validate() const {
    if (n_patients <= 0) throw ConfigError("n_patients", "must be positive");
    if (max_visits < 2) throw ConfigError("max_visits", "must be at least 2");
    if (!(interval_sd_months > 0)) throw ConfigError("interval_sd_months", "must be positive");
    if (!(interval_mean_months > 0)) throw ConfigError("interval_mean_months", "must be positive");
    if (interval_min_months <= 0 || interval_max_months <= interval_min_months)
      throw ConfigError("interval_min_months", "interval bounds must satisfy 0 < min < max");
    if (prevalence < 0 || prevalence > 1) throw ConfigError("prevalence", "must lie in [0, 1]");
    if (single_visit_fraction < 0 || single_visit_fraction >= 1)
      throw ConfigError("single_visit_fraction", "must lie in [0, 1)");
    if (extra_visits_mean < 0) throw ConfigError("extra_visits_mean", "must be non-negative");
    if (!(imaging_noise > 0)) throw ConfigError("imaging_noise", "must be positive");
    if (psa_noise < 0) throw ConfigError("psa_noise", "must be non-negative");
    if (label_noise < 0) throw ConfigError("label_noise", "must be non-negative");
    if (clinical_at_imaging < 0 || clinical_at_imaging > 1)
      throw ConfigError("clinical_at_imaging", "must lie in [0, 1]");
  }

  static GeneratorConfig from_config(const KeyValueConfig& kv, const std::string& prefix = "") {
    GeneratorConfig c;
    auto key = [&](const char* k) { return prefix + k; };
    c.n_patients = kv.get_int(key("n_patients"), c.n_patients);
    c.single_visit_fraction = kv.get_double(key("single_visit_fraction"), c.single_visit_fraction);
    c.extra_visits_mean = kv.get_double(key("extra_visits_mean"), c.extra_visits_mean);
    c.max_visits = kv.get_int(key("max_visits"), c.max_visits);
    c.interval_mean_months = kv.get_double(key("interval_mean_months"), c.interval_mean_months);
    c.interval_sd_months = kv.get_double(key("interval_sd_months"), c.interval_sd_months);
    c.interval_min_months = static_cast<int>(kv.get_int(key("interval_min_months"), c.interval_min_months));
    c.interval_max_months = static_cast<int>(kv.get_int(key("interval_max_months"), c.interval_max_months));
    c.prevalence = kv.get_double(key("prevalence"), c.prevalence);
    c.drift_strength = kv.get_double(key("drift_strength"), c.drift_strength);
    c.confounder_sd = kv.get_double(key("confounder_sd"), c.confounder_sd);
    c.imaging_noise = kv.get_double(key("imaging_noise"), c.imaging_noise);
    c.psa_noise = kv.get_double(key("psa_noise"), c.psa_noise);
    c.signal_scale = kv.get_double(key("signal_scale"), c.signal_scale);
    c.label_noise = kv.get_double(key("label_noise"), c.label_noise);
    c.clinical_at_imaging = kv.get_double(key("clinical_at_imaging"), c.clinical_at_imaging);
    c.clinical_between_mean = kv.get_double(key("clinical_between_mean"), c.clinical_between_mean);
    c.clinical_before_mean = kv.get_double(key("clinical_before_mean"), c.clinical_before_mean);
    c.projection_seed = static_cast<std::uint64_t>(kv.get_int(key("projection_seed"), static_cast<long long>(c.projection_seed)));
    return c;
  }

  void write(KeyValueConfig& kv, const std::string& prefix = "") const {
    kv.set(prefix + "n_patients", static_cast<long long>(n_patients));
    kv.set(prefix + "single_visit_fraction", single_visit_fraction);
    kv.set(prefix + "extra_visits_mean", extra_visits_mean);
    kv.set(prefix + "max_visits", static_cast<long long>(max_visits));
    kv.set(prefix + "interval_mean_months", interval_mean_months);
    kv.set(prefix + "interval_sd_months", interval_sd_months);
    kv.set(prefix + "interval_min_months", static_cast<long long>(interval_min_months));
    kv.set(prefix + "interval_max_months", static_cast<long long>(interval_max_months));
    kv.set(prefix + "prevalence", prevalence);
    kv.set(prefix + "drift_strength", drift_strength);
    kv.set(prefix + "confounder_sd", confounder_sd);
    kv.set(prefix + "imaging_noise", imaging_noise);
    kv.set(prefix + "psa_noise", psa_noise);
    kv.set(prefix + "signal_scale", signal_scale);
    kv.set(prefix + "label_noise", label_noise);
    kv.set(prefix + "clinical_at_imaging", clinical_at_imaging);
    kv.set(prefix + "clinical_between_mean", clinical_between_mean);
    kv.set(prefix + "clinical_before_mean", clinical_before_mean);
    kv.set(prefix + "projection_seed", static_cast<long long>(projection_seed));
  }

  static std::set<std::string> keys(const std::string& prefix = "") {
    KeyValueConfig kv;
    GeneratorConfig{}.write(kv, prefix);
    std::set<std::string> out;
    for (const auto& [k, v] : kv.entries()) out.insert(k);
    return out;
  }
};

namespace detail {

inline double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI); }
inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

inline double truncated_normal_mean(double mu, double sd, double lo, double hi) {
  const double a = (lo - mu) / sd, b = (hi - mu) / sd;
  return mu + sd * (normal_pdf(a) - normal_pdf(b)) / (normal_cdf(b) - normal_cdf(a));
}

// Location of the parent normal whose truncation to [lo, hi] has the target mean.
inline double solve_truncated_location(double target_mean, double sd, double lo, double hi) {
  double left = target_mean - 6 * sd, right = target_mean + sd;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (left + right);
    (truncated_normal_mean(mid, sd, lo, hi) < target_mean ? left : right) = mid;
  }
  return 0.5 * (left + right);
}

struct FeatureProjection {
  std::vector<double> matrix;  // kImagingFeatureDim x kLatentDim, row-major
  std::vector<double> offset;

  FeatureProjection(std::uint64_t seed, double signal_scale) : matrix(kImagingFeatureDim * kLatentDim), offset(kImagingFeatureDim) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n01(0.0, 1.0);
    std::vector<double> risk_dir(kImagingFeatureDim);
    double norm = 0;
    for (auto& v : risk_dir) {
      v = n01(rng);
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (std::size_t i = 0; i < kImagingFeatureDim; ++i) {
      // Risk state and confounder share one direction: a single exam cannot tell them apart.
      matrix[i * kLatentDim + 0] = signal_scale * risk_dir[i] / norm;
      matrix[i * kLatentDim + 1] = signal_scale * risk_dir[i] / norm;
      matrix[i * kLatentDim + 2] = n01(rng) / std::sqrt(static_cast<double>(kImagingFeatureDim));
      matrix[i * kLatentDim + 3] = n01(rng) / std::sqrt(static_cast<double>(kImagingFeatureDim));
      offset[i] = 0.5 * n01(rng);
    }
  }
};

inline std::string patient_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "P%06zu", i);
  return buf;
}

}  // namespace detail

// Deterministic synthetic cohort. Progressors drift upward along the risk
// axis; labels threshold the risk state at zero; imaging features are a
// noisy affine image of (risk state, confounder, nuisance); PSA and prostate
// volume are log-linked to the same latent factors.
inline Cohort generate_cohort(const GeneratorConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const detail::FeatureProjection projection(config.projection_seed, config.signal_scale);
  const double gap_location = detail::solve_truncated_location(
      config.interval_mean_months, config.interval_sd_months, config.interval_min_months, config.interval_max_months);

  auto draw_gap = [&] {
    std::normal_distribution<double> gap(gap_location, config.interval_sd_months);
    double g;
    do g = gap(rng);
    while (g < config.interval_min_months || g > config.interval_max_months);
    return std::clamp(static_cast<int>(std::lround(g)), config.interval_min_months, config.interval_max_months);
  };
  auto poisson = [&](double mean) {
    if (mean <= 0) return 0;
    std::poisson_distribution<int> p(mean);
    return p(rng);
  };
  auto clipped_noise = [&](double sd) { return sd * std::clamp(n01(rng), -3.0, 3.0); };

  Cohort cohort;
  cohort.reserve(static_cast<std::size_t>(config.n_patients));
  for (std::int64_t pi = 0; pi < config.n_patients; ++pi) {
    PatientRecord patient;
    patient.id = detail::patient_id(static_cast<std::size_t>(pi));
    auto& lat = patient.latent;
    lat.progressor = u01(rng) < config.prevalence;
    lat.baseline = -0.8 - 0.5 * std::abs(n01(rng));
    lat.drift_per_year = lat.progressor ? config.drift_strength * (0.5 + u01(rng)) : 0.0;
    lat.confounder = config.confounder_sd * n01(rng);
    lat.nuisance = {n01(rng), n01(rng)};
    lat.start_month = 36 + static_cast<int>(u01(rng) * 24);
    const double age0 = 48.0 + 30.0 * u01(rng);
    const double log_volume_base = 3.8 + 0.3 * lat.confounder;

    const bool single = u01(rng) < config.single_visit_fraction;
    std::vector<int> exam_times;
    if (single) {
      exam_times.push_back(lat.start_month + static_cast<int>(u01(rng) * 72));
    } else {
      const auto n_exams = std::min<std::int64_t>(2 + poisson(config.extra_visits_mean), config.max_visits);
      exam_times.push_back(lat.start_month);
      for (std::int64_t j = 1; j < n_exams; ++j) exam_times.push_back(exam_times.back() + draw_gap());
    }

    std::set<int> clinical_only;
    if (!single) {
      for (int k = poisson(config.clinical_before_mean); k > 0; --k)
        clinical_only.insert(exam_times.front() - 3 - static_cast<int>(u01(rng) * 33));
      for (std::size_t j = 0; j + 1 < exam_times.size(); ++j) {
        const int lo = exam_times[j], hi = exam_times[j + 1];
        for (int k = poisson(config.clinical_between_mean); k > 0 && hi - lo > 1; --k)
          clinical_only.insert(lo + 1 + static_cast<int>(u01(rng) * (hi - lo - 1)));
      }
    }

    auto clinical_at = [&](int month) {
      ClinicalSample c;
      const double s = lat.risk_state(month);
      c.age = std::clamp(age0 + (month - lat.start_month) / 12.0, 30.0, 100.0);
      c.psa = std::exp(1.5 + 0.5 * s + 0.4 * lat.confounder + 0.02 * (c.age - 65.0) + config.psa_noise * n01(rng));
      c.prostate_volume = std::exp(log_volume_base + 0.15 * n01(rng));
      return c;
    };

    std::set<int> all_times(clinical_only.begin(), clinical_only.end());
    all_times.insert(exam_times.begin(), exam_times.end());
    const std::set<int> exams(exam_times.begin(), exam_times.end());
    for (int month : all_times) {
      Visit v;
      v.time = month;
      if (exams.count(month)) {
        const double s = lat.risk_state(month);
        const std::array<double, kLatentDim> state{s, lat.confounder, lat.nuisance[0], lat.nuisance[1]};
        std::vector<double> x(kImagingFeatureDim);
        for (std::size_t i = 0; i < kImagingFeatureDim; ++i) {
          double acc = projection.offset[i];
          for (std::size_t j = 0; j < kLatentDim; ++j) acc += projection.matrix[i * kLatentDim + j] * state[j];
          x[i] = acc + config.imaging_noise * n01(rng);
        }
        v.imaging = std::move(x);
        v.label = (s + clipped_noise(config.label_noise)) > 0.0 ? 1 : 0;
        if (u01(rng) < config.clinical_at_imaging) v.clinical = clinical_at(month);
      } else {
        v.clinical = clinical_at(month);
      }
      patient.visits.push_back(std::move(v));
    }
    cohort.push_back(std::move(patient));
  }
  return cohort;
}

inline std::vector<int> label_sequence(const PatientRecord& p) {
  std::vector<int> out;
  for (const auto& v : p.visits)
    if (v.label) out.push_back(*v.label);
  return out;
}

inline bool is_monotone(const PatientRecord& p) {
  bool seen_positive = false;
  for (int l : label_sequence(p)) {
    if (l == 1) seen_positive = true;
    else if (seen_positive) return false;
  }
  return true;
}

// Drops every patient whose labels go from high risk back to low risk.
inline Cohort enforce_monotone(const Cohort& cohort) {
  Cohort out;
  for (const auto& p : cohort)
    if (is_monotone(p)) out.push_back(p);
  return out;
}

inline constexpr int kClinicalIndexWindowMonths = 6;

// Cases for one patient; see temporal_augment.
inline std::vector<IndexCase> index_cases_for(const PatientRecord& patient, int horizon_years = 5) {
  std::vector<IndexCase> out;
  const int window = 12 * horizon_years;
  const auto& visits = patient.visits;
  for (std::size_t i = 0; i < visits.size(); ++i) {
    const Visit& index = visits[i];
    if (!index.label || i == 0) continue;
    IndexCase c;
    c.patient_id = patient.id;
    c.index = index;
    c.labels[kCurrent] = *index.label;
    c.masks[kCurrent] = 1;
    for (std::size_t j = i + 1; j < visits.size() && visits[j].time - index.time <= window; ++j) {
      if (!visits[j].label) continue;
      c.masks[kFiveYear] = 1;
      c.labels[kFiveYear] = c.labels[kFiveYear] | *visits[j].label;
    }

    std::size_t clinical_anchor = i;  // visit providing the index clinical sample
    if (index.clinical) {
      c.index_clinical = index.clinical;
    } else {
      for (std::size_t j = i; j-- > 0;) {
        if (!visits[j].clinical) continue;
        if (index.time - visits[j].time <= kClinicalIndexWindowMonths) {
          c.index_clinical = visits[j].clinical;
          c.index_clinical_lag = index.time - visits[j].time;
          clinical_anchor = j;
        }
        break;
      }
    }
    const int clinical_time = visits[clinical_anchor].time;
    for (std::size_t j = i; j-- > 0;) {
      const Visit& prior = visits[j];
      if (prior.imaging) c.imaging_priors.push_back({prior, index.time - prior.time});
      if (prior.clinical && j != clinical_anchor)
        c.clinical_priors.push_back({*prior.clinical, (c.index_clinical ? clinical_time : index.time) - prior.time});
    }
    out.push_back(std::move(c));
  }
  return out;
}

// One IndexCase per labeled visit with at least one earlier visit. The
// horizon label ORs labels in (index, index + horizon]; its mask is set iff
// that window holds a labeled visit.
inline std::vector<IndexCase> temporal_augment(const Cohort& cohort, int horizon_years = 5) {
  std::vector<IndexCase> out;
  for (const auto& p : cohort) {
    auto cases = index_cases_for(p, horizon_years);
    out.insert(out.end(), std::make_move_iterator(cases.begin()), std::make_move_iterator(cases.end()));
  }
  return out;
}

// Patient-level split. Membership follows a seeded shuffle; each split keeps
// the cohort's original order.
inline CohortSplit split_by_patient(const Cohort& cohort, const std::array<double, 3>& fractions, std::uint64_t seed) {
  double total = 0;
  for (double f : fractions) {
    if (f < 0 || !std::isfinite(f)) throw std::invalid_argument("split_by_patient: fractions must be non-negative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("split_by_patient: fractions must sum to 1");

  const std::size_t n = cohort.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto b1 = static_cast<std::size_t>(std::llround(fractions[0] * static_cast<double>(n)));
  const auto b2 = std::min(n, static_cast<std::size_t>(std::llround((fractions[0] + fractions[1]) * static_cast<double>(n))));

  std::vector<int> assignment(n);
  for (std::size_t r = 0; r < n; ++r) assignment[order[r]] = r < b1 ? 0 : (r < b2 ? 1 : 2);
  CohortSplit split;
  for (std::size_t i = 0; i < n; ++i) {
    Cohort& dst = assignment[i] == 0 ? split.train : (assignment[i] == 1 ? split.validation : split.test);
    dst.push_back(cohort[i]);
  }
  return split;
}

inline bool has_followup(const PatientRecord& p) {
  return std::count_if(p.visits.begin(), p.visits.end(), [](const Visit& v) { return v.imaging.has_value(); }) > 1;
}

// Per-feature training statistics for (ln psa, age, prostate volume).
struct NormStats {
  std::array<double, kClinicalFeatureDim> mean{};
  std::array<double, kClinicalFeatureDim> sd{1.0, 1.0, 1.0};
  std::array<bool, kClinicalFeatureDim> zero_sd{};
};

inline std::array<double, kClinicalFeatureDim> raw_clinical_features(const ClinicalSample& s) {
  if (!(s.psa > 0)) throw std::invalid_argument("clinical sample: psa must be positive, got " + format_double(s.psa));
  return {std::log(s.psa), s.age, s.prostate_volume};
}

inline NormStats compute_norm_stats(const std::vector<ClinicalSample>& training_samples) {
  if (training_samples.empty()) throw std::invalid_argument("compute_norm_stats: no clinical samples");
  NormStats st;
  const double n = static_cast<double>(training_samples.size());
  for (const auto& s : training_samples) {
    const auto f = raw_clinical_features(s);
    for (std::size_t k = 0; k < kClinicalFeatureDim; ++k) st.mean[k] += f[k] / n;
  }
  std::array<double, kClinicalFeatureDim> var{};
  for (const auto& s : training_samples) {
    const auto f = raw_clinical_features(s);
    for (std::size_t k = 0; k < kClinicalFeatureDim; ++k) var[k] += (f[k] - st.mean[k]) * (f[k] - st.mean[k]) / n;
  }
  for (std::size_t k = 0; k < kClinicalFeatureDim; ++k) {
    st.sd[k] = std::sqrt(var[k]);
    st.zero_sd[k] = st.sd[k] == 0.0;
  }
  return st;
}

inline std::vector<ClinicalSample> clinical_samples(const Cohort& cohort) {
  std::vector<ClinicalSample> out;
  for (const auto& p : cohort)
    for (const auto& v : p.visits)
      if (v.clinical) out.push_back(*v.clinical);
  return out;
}

// z-scored (ln psa, age, volume); zero-sd features are centered only.
inline std::array<double, kClinicalFeatureDim> preprocess_clinical(const ClinicalSample& sample, const NormStats& stats) {
  auto f = raw_clinical_features(sample);
  for (std::size_t k = 0; k < kClinicalFeatureDim; ++k) {
    f[k] -= stats.mean[k];
    if (!stats.zero_sd[k]) f[k] /= stats.sd[k];
  }
  return f;
}

}  // namespace riskref

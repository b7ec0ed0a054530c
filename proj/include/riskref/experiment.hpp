#pragma once

// End-to-end driver: cohort generation, training, evaluation over prior-count
// and lag conditions, reports and a checksum manifest. Needs OpenSSL's
// libcrypto at link time (manifest digests).

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "riskref/cohort.hpp"
#include "riskref/cohort_io.hpp"
#include "riskref/config.hpp"
#include "riskref/error.hpp"
#include "riskref/metrics.hpp"
#include "riskref/nn/checkpoint.hpp"
#include "riskref/training.hpp"

namespace riskref {

namespace fs = std::filesystem;

// p0..p3: the k most recent priors (clinical: recent, midpoint, first).
// lag1..lag3: a single prior, 1 = most recent, 3 = oldest.
struct Condition {
  enum class Kind { priors, lag };
  std::string name;
  Kind kind = Kind::priors;
  std::size_t k = 0;
};

inline Condition parse_condition(const std::string& name) {
  if (name.size() == 2 && name[0] == 'p' && name[1] >= '0' && name[1] <= '3')
    return {name, Condition::Kind::priors, static_cast<std::size_t>(name[1] - '0')};
  if (name.size() == 4 && name.rfind("lag", 0) == 0 && name[3] >= '1' && name[3] <= '3')
    return {name, Condition::Kind::lag, static_cast<std::size_t>(name[3] - '0')};
  throw ConfigError("conditions", "unknown condition '" + name + "' (p0..p3, lag1..lag3)");
}

inline constexpr std::size_t kEvaluationPriors = 3;

// Positions (most recent first) of Prior 1..3 for a case with n >= 3 priors.
// Imaging priors are consecutive; clinical priors are the most recent, the
// midpoint and the first.
inline std::array<std::size_t, kEvaluationPriors> prior_positions(Track track, std::size_t n) {
  if (n < kEvaluationPriors) throw std::invalid_argument("prior_positions: fewer than three priors");
  if (track == Track::imaging) return {0, 1, 2};
  return {0, (n - 1) / 2, n - 1};
}

inline std::vector<std::size_t> condition_selection(const Condition& c, Track track, std::size_t n_priors) {
  const auto pos = prior_positions(track, n_priors);
  if (c.kind == Condition::Kind::lag) return {pos[c.k - 1]};
  return std::vector<std::size_t>(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(c.k));
}

// Clinical context for the combined model: the first and the most recent
// clinical priors, when any exist.
inline std::vector<std::size_t> combined_clinical_selection(std::size_t n_priors) {
  if (n_priors == 0) return {};
  if (n_priors == 1) return {0};
  return {0, n_priors - 1};
}

struct ExperimentConfig {
  std::uint64_t seed = 7;
  std::string out = "run";
  std::array<double, 3> split{0.6, 0.2, 0.2};
  std::vector<Variant> variants{Variant::clinical, Variant::imaging, Variant::combined, Variant::joint};
  std::vector<Condition> conditions;
  std::vector<Horizon> horizons{kCurrent, kFiveYear};
  double target_clinical = 0.85;
  double target_imaging = 0.90;
  GeneratorConfig cohort;
  TrainConfig train;

  ExperimentConfig() {
    for (const char* c : {"p0", "p1", "p2", "p3", "lag1", "lag2", "lag3"}) conditions.push_back(parse_condition(c));
  }

  double target_for(Variant v) const {
    return v == Variant::clinical || v == Variant::joint ? target_clinical : target_imaging;
  }

  static std::set<std::string> keys() {
    std::set<std::string> k{"seed", "out", "split", "variants", "conditions", "horizons",
                            "target_sensitivity.clinical", "target_sensitivity.imaging"};
    for (const auto& g : GeneratorConfig::keys("cohort.")) k.insert(g);
    for (const auto& t : TrainConfig::keys("train.")) k.insert(t);
    return k;
  }

  static ExperimentConfig from_config(const KeyValueConfig& kv) {
    kv.require_known(keys());
    ExperimentConfig c;
    const auto seed = kv.get_int("seed", static_cast<long long>(c.seed));
    if (seed < 0) throw ConfigError("seed", "must be non-negative");
    c.seed = static_cast<std::uint64_t>(seed);
    c.out = kv.get_string("out", c.out);
    const auto split = kv.get_list("split", {"0.6", "0.2", "0.2"});
    if (split.size() != 3) throw ConfigError("split", "expected three fractions (train, validation, test)");
    for (std::size_t i = 0; i < 3; ++i) {
      try {
        std::size_t used = 0;
        c.split[i] = std::stod(split[i], &used);
        if (used != split[i].size()) throw std::invalid_argument("trailing characters");
      } catch (const std::exception&) {
        throw ConfigError("split", "not a number: '" + split[i] + "'");
      }
    }
    double total = 0;
    for (double f : c.split) {
      if (!(f >= 0)) throw ConfigError("split", "fractions must be non-negative");
      total += f;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split", "fractions must sum to 1");
    if (kv.has("variants")) {
      c.variants.clear();
      for (const auto& v : kv.get_list("variants", {})) c.variants.push_back(parse_variant(v));
      if (c.variants.empty()) throw ConfigError("variants", "no variants selected");
    }
    if (kv.has("conditions")) c.conditions = parse_conditions(kv.get_list("conditions", {}));
    if (kv.has("horizons")) {
      c.horizons.clear();
      for (const auto& h : kv.get_list("horizons", {})) {
        if (h == "current") c.horizons.push_back(kCurrent);
        else if (h == "5y") c.horizons.push_back(kFiveYear);
        else throw ConfigError("horizons", "unknown horizon '" + h + "' (current, 5y)");
      }
      if (c.horizons.empty()) throw ConfigError("horizons", "no horizons selected");
    }
    c.target_clinical = kv.get_double("target_sensitivity.clinical", c.target_clinical);
    c.target_imaging = kv.get_double("target_sensitivity.imaging", c.target_imaging);
    for (auto [key, t] : {std::pair{"target_sensitivity.clinical", c.target_clinical},
                          std::pair{"target_sensitivity.imaging", c.target_imaging}})
      if (!(t > 0 && t <= 1)) throw ConfigError(key, "must be in (0, 1]");
    try {
      c.cohort = GeneratorConfig::from_config(kv, "cohort.");
      c.cohort.validate();
    } catch (const ConfigError&) {
      throw;
    } catch (const std::invalid_argument& e) {
      throw ConfigError("cohort", e.what());
    }
    c.train = TrainConfig::from_config(kv, "train.");
    return c;
  }

  static std::vector<Condition> parse_conditions(const std::vector<std::string>& names) {
    std::vector<Condition> out;
    for (const auto& n : names) out.push_back(parse_condition(n));
    if (out.empty()) throw ConfigError("conditions", "no conditions selected");
    return out;
  }

  KeyValueConfig to_config() const {
    KeyValueConfig kv;
    kv.set("seed", static_cast<long long>(seed));
    kv.set("out", out);
    kv.set("split", format_double(split[0]) + ", " + format_double(split[1]) + ", " + format_double(split[2]));
    std::string v, cs, hs;
    for (auto x : variants) v += (v.empty() ? "" : ", ") + std::string(variant_name(x));
    for (const auto& x : conditions) cs += (cs.empty() ? "" : ", ") + x.name;
    for (auto h : horizons) hs += (hs.empty() ? "" : ", ") + std::string(h == kCurrent ? "current" : "5y");
    kv.set("variants", v);
    kv.set("conditions", cs);
    kv.set("horizons", hs);
    kv.set("target_sensitivity.clinical", target_clinical);
    kv.set("target_sensitivity.imaging", target_imaging);
    cohort.write(kv, "cohort.");
    train.write(kv, "train.");
    return kv;
  }

  std::uint64_t cohort_seed() const { return seed; }
  std::uint64_t split_seed() const { return seed + 1; }
  std::uint64_t train_seed(Variant v) const { return seed * 1000 + 10 + static_cast<std::uint64_t>(v); }
};

// ---------------------------------------------------------------- files

inline fs::path cohort_path(const fs::path& out, const std::string& split) { return out / "cohort" / (split + ".jsonl"); }
inline fs::path checkpoint_path(const fs::path& out, Variant v) {
  return out / "models" / (std::string(variant_name(v)) + ".ckpt");
}
inline fs::path log_path(const fs::path& out, Variant v) { return out / "logs" / (std::string(variant_name(v)) + ".jsonl"); }
inline fs::path report_path(const fs::path& out, const std::string& name) { return out / "reports" / name; }

inline void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

inline std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifact(path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline std::string sha256_hex(const std::string& data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr))
    throw std::runtime_error("sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

// "<sha256>  <relative path>" for every file under out except the manifest.
inline std::string build_manifest(const fs::path& out) {
  std::vector<std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(out))
    if (e.is_regular_file()) {
      const auto rel = fs::relative(e.path(), out).generic_string();
      if (rel != "manifest.txt") files.push_back(rel);
    }
  std::sort(files.begin(), files.end());
  std::string text;
  for (const auto& f : files) text += sha256_hex(read_text(out / f)) + "  " + f + "\n";
  return text;
}

// ---------------------------------------------------------------- generate

struct CohortSummary {
  std::size_t generated = 0;
  std::size_t removed_nonmonotone = 0;
  std::size_t train = 0, validation = 0, test = 0;
};

inline CohortSummary cmd_generate(const ExperimentConfig& config) {
  const fs::path out(config.out);
  const auto cohort = generate_cohort(config.cohort, config.cohort_seed());
  const auto kept = enforce_monotone(cohort);
  const auto split = split_by_patient(kept, config.split, config.split_seed());
  fs::create_directories(out / "cohort");
  write_cohort(cohort_path(out, "train").string(), split.train);
  write_cohort(cohort_path(out, "validation").string(), split.validation);
  write_cohort(cohort_path(out, "test").string(), split.test);
  write_text(out / "config.txt", config.to_config().str());
  CohortSummary s{cohort.size(), cohort.size() - kept.size(), split.train.size(), split.validation.size(),
                  split.test.size()};
  write_text(out / "cohort" / "summary.txt",
             "generated " + std::to_string(s.generated) + "\nremoved_nonmonotone " +
                 std::to_string(s.removed_nonmonotone) + "\ntrain " + std::to_string(s.train) + "\nvalidation " +
                 std::to_string(s.validation) + "\ntest " + std::to_string(s.test) + "\n");
  return s;
}

inline CohortSplit load_split(const fs::path& out) {
  CohortSplit s;
  s.train = read_cohort(cohort_path(out, "train").string());
  s.validation = read_cohort(cohort_path(out, "validation").string());
  s.test = read_cohort(cohort_path(out, "test").string());
  return s;
}

// ---------------------------------------------------------------- checkpoints

inline nn::ParameterList norm_parameters(NormStats& norm, nn::Tensor& mean, nn::Tensor& sd) {
  mean = nn::Tensor::variable({1, kClinicalFeatureDim}, std::vector<double>(norm.mean.begin(), norm.mean.end()));
  sd = nn::Tensor::variable({1, kClinicalFeatureDim}, std::vector<double>(norm.sd.begin(), norm.sd.end()));
  return {{"norm.mean", mean}, {"norm.sd", sd}};
}

inline nn::ParameterList bundle_parameters(const ModelBundle& b) {
  nn::ParameterList out;
  if (b.imaging) nn::append(out, b.imaging->parameters("imaging"));
  if (b.clinical) nn::append(out, b.clinical->parameters("clinical"));
  if (b.joint) nn::append(out, b.joint->parameters("joint"));
  return out;
}

inline void save_bundle(const fs::path& path, const ModelBundle& b, NormStats norm) {
  fs::create_directories(path.parent_path());
  nn::Tensor mean, sd;
  auto params = norm_parameters(norm, mean, sd);
  nn::append(params, bundle_parameters(b));
  nn::save_checkpoint(path.string(), params, nullptr);
}

// Rebuilds the architecture for `variant` and fills it from the checkpoint.
inline std::pair<ModelBundle, NormStats> load_bundle(const fs::path& path, Variant variant, const TrainConfig& train) {
  if (!fs::exists(path)) throw MissingArtifact(path.string());
  ModelBundle b;
  b.variant = variant;
  if (variant == Variant::imaging || variant == Variant::combined) b.imaging = TrackModel(Track::imaging, 0, train.temporal);
  if (variant == Variant::clinical || variant == Variant::combined)
    b.clinical = TrackModel(Track::clinical, 0, train.temporal);
  if (variant == Variant::joint) b.joint = JointModel(0, train.temporal);
  NormStats norm;
  nn::Tensor mean, sd;
  auto params = norm_parameters(norm, mean, sd);
  nn::append(params, bundle_parameters(b));
  nn::load_checkpoint(path.string(), params);
  for (std::size_t k = 0; k < kClinicalFeatureDim; ++k) {
    norm.mean[k] = mean.values()[k];
    norm.sd[k] = sd.values()[k];
    norm.zero_sd[k] = norm.sd[k] == 0.0;
  }
  return {std::move(b), norm};
}

// ---------------------------------------------------------------- train

inline Track training_track(Variant v) { return v == Variant::imaging ? Track::imaging : Track::clinical; }

inline void cmd_train(const ExperimentConfig& config, Variant variant) {
  const fs::path out(config.out);
  const auto split = load_split(out);
  const auto norm = compute_norm_stats(clinical_samples(split.train));
  MetricsLog log;
  ModelBundle bundle;
  if (variant == Variant::combined) {
    const auto img = load_bundle(checkpoint_path(out, Variant::imaging), Variant::imaging, config.train).first;
    const auto clin = load_bundle(checkpoint_path(out, Variant::clinical), Variant::clinical, config.train).first;
    bundle = train_variant(variant, {}, config.train, log, &img, &clin);
  } else {
    auto train = config.train;
    train.seed = config.train_seed(variant);
    const auto data = prepare_training_data(split, training_track(variant), norm);
    bundle = train_variant(variant, data, train, log);
  }
  save_bundle(checkpoint_path(out, variant), bundle, norm);
  write_text(log_path(out, variant), to_jsonl(log));
}

// ---------------------------------------------------------------- evaluate

// Cases evaluated for one variant: index visits with at least three priors
// on the variant's refinement track.
struct EvaluationSet {
  std::vector<PreparedCase> cases;                   // imaging or clinical track
  std::vector<PreparedCase> clinical;                // combined: clinical counterparts
  std::vector<std::optional<std::size_t>> clinical_of;
};

inline EvaluationSet evaluation_set(const Cohort& cohort, Variant variant, const NormStats& norm) {
  EvaluationSet s;
  const auto track = training_track(variant);
  for (const auto& c : longitudinal_cases(cohort)) {
    const std::span<const IndexCase> one(&c, 1);
    if (variant == Variant::combined) {
      auto img = prepare_cases(one, Track::imaging, norm);
      if (img.front().priors.size() < kEvaluationPriors) continue;
      s.cases.push_back(std::move(img.front()));
      auto clin = prepare_cases(one, Track::clinical, norm);
      if (clin.empty()) {
        s.clinical_of.emplace_back();
      } else {
        s.clinical_of.emplace_back(s.clinical.size());
        s.clinical.push_back(std::move(clin.front()));
      }
    } else {
      auto p = prepare_cases(one, track, norm);
      if (p.empty() || p.front().priors.size() < kEvaluationPriors) continue;
      s.cases.push_back(std::move(p.front()));
    }
  }
  return s;
}

inline std::vector<RefinedCurve> predict_condition(const ModelBundle& b, const EvaluationSet& s, const Condition& c) {
  Selection sel;
  const auto track = b.variant == Variant::combined ? Track::imaging : training_track(b.variant);
  for (const auto& pc : s.cases) sel.push_back(condition_selection(c, track, pc.priors.size()));
  switch (b.variant) {
    case Variant::imaging: return predict(*b.imaging, s.cases, sel);
    case Variant::clinical: return predict(*b.clinical, s.cases, sel);
    case Variant::joint: return predict_joint(*b.joint, s.cases, sel);
    case Variant::combined: {
      Selection clin(s.clinical.size());
      if (c.kind == Condition::Kind::lag || c.k > 0)
        for (std::size_t i = 0; i < s.clinical.size(); ++i)
          clin[i] = combined_clinical_selection(s.clinical[i].priors.size());
      return predict_combined(*b.imaging, *b.clinical, s.cases, sel, s.clinical, s.clinical_of, clin);
    }
  }
  return {};
}

struct ScoredCases {
  std::vector<double> scores;
  std::vector<int> labels;
};

inline ScoredCases scored(std::span<const RefinedCurve> curves, std::span<const PreparedCase> cases, Horizon h) {
  ScoredCases out;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    if (!cases[i].masks[h]) continue;
    out.scores.push_back(curves[i].probabilities[h == kCurrent ? 0 : kHazardSteps]);
    out.labels.push_back(cases[i].labels[h]);
  }
  return out;
}

inline const char* horizon_name(Horizon h) { return h == kCurrent ? "current" : "5y"; }

// Rows for one variant over the configured conditions and horizons.
// Thresholds come from the validation split, per condition.
inline std::vector<ConditionRow> evaluate_bundle(const ModelBundle& b, const NormStats& norm, const CohortSplit& split,
                                                 const ExperimentConfig& config,
                                                 const std::vector<Condition>& conditions) {
  const auto val = evaluation_set(split.validation, b.variant, norm);
  const auto test = evaluation_set(split.test, b.variant, norm);
  if (val.cases.empty() || test.cases.empty())
    throw NumericalError(std::string(variant_name(b.variant)) + ": no evaluation cases with three priors");
  std::vector<ConditionRow> rows;
  for (auto h : config.horizons) {
    std::optional<std::pair<ScoredCases, std::vector<int>>> reference;
    for (const auto& c : conditions) {
      if (b.variant == Variant::joint && c.kind == Condition::Kind::priors && c.k == 0) continue;
      const auto vs = scored(predict_condition(b, val, c), val.cases, h);
      const auto ts = scored(predict_condition(b, test, c), test.cases, h);
      if (ts.labels.empty() || vs.labels.empty()) continue;
      ConditionRow row;
      row.variant = variant_name(b.variant);
      row.horizon = horizon_name(h);
      row.condition = c.name;
      row.threshold = select_operating_point(vs.scores, vs.labels, config.target_for(b.variant));
      row.counts = confusion(ts.scores, ts.labels, row.threshold);
      const double nan = std::numeric_limits<double>::quiet_NaN();
      row.auc = {nan, nan, nan, nan, true};
      const auto pos = detail::count_positive(ts.labels);
      if (pos > 0 && pos < ts.labels.size()) row.auc = delong_ci(ts.scores, ts.labels);
      const auto pred = classify(ts.scores, row.threshold);
      if (c.kind == Condition::Kind::priors && c.k == 0) {
        reference = std::pair{ts, pred};
      } else if (reference) {
        const auto& [ref_scores, ref_pred] = *reference;
        std::vector<int> a_pos, b_pos, t_pos, a_neg, b_neg, t_neg;
        for (std::size_t i = 0; i < ts.labels.size(); ++i) {
          auto [a, bb, t] = ts.labels[i] ? std::tie(a_pos, b_pos, t_pos) : std::tie(a_neg, b_neg, t_neg);
          a.push_back(ref_pred[i]);
          bb.push_back(pred[i]);
          t.push_back(ts.labels[i]);
        }
        row.mcnemar_sensitivity_p = mcnemar(a_pos, b_pos, t_pos).p;
        row.mcnemar_specificity_p = mcnemar(a_neg, b_neg, t_neg).p;
        if (pos > 0 && pos < ts.labels.size()) row.delong_p = delong_paired_test(ref_scores.scores, ts.scores, ts.labels);
        const auto k = tp_agreement_kappa(ref_pred, pred, ts.labels);
        if (k.defined) row.tp_kappa = k.kappa;
      }
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

inline std::vector<ConditionRow> cmd_evaluate(const ExperimentConfig& config, Variant variant) {
  const fs::path out(config.out);
  const auto split = load_split(out);
  const auto [bundle, norm] = load_bundle(checkpoint_path(out, variant), variant, config.train);
  const auto rows = evaluate_bundle(bundle, norm, split, config, config.conditions);
  write_text(report_path(out, std::string(variant_name(variant)) + ".csv"), report_csv(rows));
  return rows;
}

// Steering (clinical) versus joint learning with the oldest prior.
struct AblationRow {
  std::string horizon;
  ConditionRow steering;
  ConditionRow joint;
};

inline std::vector<AblationRow> ablation_rows(std::span<const ConditionRow> clinical, std::span<const ConditionRow> joint) {
  std::vector<AblationRow> out;
  for (const auto& s : clinical) {
    if (s.condition != "lag3") continue;
    for (const auto& j : joint)
      if (j.condition == "lag3" && j.horizon == s.horizon) out.push_back({s.horizon, s, j});
  }
  return out;
}

inline std::string ablation_csv(std::span<const AblationRow> rows) {
  std::string out = "horizon,model,FN,TP,FP,TN,sens,spec,fpr\n";
  for (const auto& r : rows)
    for (const auto* row : {&r.steering, &r.joint})
      out += r.horizon + "," + (row == &r.steering ? "steering" : "joint") + "," + std::to_string(row->counts.fn) +
             "," + std::to_string(row->counts.tp) + "," + std::to_string(row->counts.fp) + "," +
             std::to_string(row->counts.tn) + "," + csv_number(row->counts.sensitivity()) + "," +
             csv_number(row->counts.specificity()) + "," + csv_number(row->counts.fpr()) + "\n";
  return out;
}

// ---------------------------------------------------------------- report

inline std::vector<ConditionRow> parse_report_csv(const std::string& text) {
  std::vector<ConditionRow> rows;
  std::istringstream is(text);
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    while (f.size() < 18) f.emplace_back();
    auto num = [](const std::string& s) { return s.empty() ? std::numeric_limits<double>::quiet_NaN() : std::stod(s); };
    auto opt = [&](const std::string& s) { return s.empty() ? std::optional<double>() : std::optional<double>(std::stod(s)); };
    ConditionRow r;
    r.variant = f[0];
    r.horizon = f[1];
    r.condition = f[2];
    r.counts.fn = std::stoul(f[3]);
    r.counts.tp = std::stoul(f[4]);
    r.counts.fp = std::stoul(f[5]);
    r.counts.tn = std::stoul(f[6]);
    r.auc.auc = num(f[10]);
    r.auc.ci_low = num(f[11]);
    r.auc.ci_high = num(f[12]);
    r.threshold = num(f[13]);
    r.mcnemar_sensitivity_p = opt(f[14]);
    r.mcnemar_specificity_p = opt(f[15]);
    r.delong_p = opt(f[16]);
    r.tp_kappa = opt(f[17]);
    rows.push_back(std::move(r));
  }
  return rows;
}

// Aggregates per-variant reports into report.csv, summary.txt and (when the
// clinical and joint reports exist) ablation.csv.
inline void cmd_report(const ExperimentConfig& config) {
  const fs::path out(config.out);
  std::vector<ConditionRow> all;
  std::map<Variant, std::vector<ConditionRow>> by_variant;
  for (auto v : config.variants) {
    const auto path = report_path(out, std::string(variant_name(v)) + ".csv");
    auto rows = parse_report_csv(read_text(path));
    by_variant[v] = rows;
    all.insert(all.end(), rows.begin(), rows.end());
  }
  write_text(report_path(out, "report.csv"), report_csv(all));
  write_text(report_path(out, "summary.txt"), table_summary(all));
  if (by_variant.count(Variant::clinical) && by_variant.count(Variant::joint))
    write_text(report_path(out, "ablation.csv"),
               ablation_csv(ablation_rows(by_variant[Variant::clinical], by_variant[Variant::joint])));
  write_text(out / "manifest.txt", build_manifest(out));
}

// generate, train and evaluate every configured variant, then report.
inline void cmd_run(const ExperimentConfig& config) {
  cmd_generate(config);
  std::vector<Variant> order;
  for (auto v : {Variant::imaging, Variant::clinical, Variant::joint, Variant::combined})
    if (std::find(config.variants.begin(), config.variants.end(), v) != config.variants.end()) order.push_back(v);
  for (auto v : order) cmd_train(config, v);
  for (auto v : order) cmd_evaluate(config, v);
  cmd_report(config);
}

}  // namespace riskref

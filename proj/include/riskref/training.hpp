#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "riskref/cohort.hpp"
#include "riskref/config.hpp"
#include "riskref/error.hpp"
#include "riskref/hazard.hpp"
#include "riskref/nn/optim.hpp"
#include "riskref/representation.hpp"
#include "riskref/temporal.hpp"

namespace riskref {

enum class Variant { clinical, imaging, combined, joint };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::clinical: return "clinical";
    case Variant::imaging: return "imaging";
    case Variant::combined: return "combined";
    case Variant::joint: return "joint-ablation";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  for (auto v : {Variant::clinical, Variant::imaging, Variant::combined, Variant::joint})
    if (s == variant_name(v)) return v;
  throw ConfigError("variant", "unknown variant '" + s + "' (clinical, imaging, combined, joint-ablation)");
}

// ---------------------------------------------------------------- losses

struct ClassWeights {
  double w_n = 1.0;
  double w_p = 1.0;
};

// w_c = N / (2 N_c), so balanced labels give unit weights.
inline ClassWeights compute_class_weights(std::span<const int> labels) {
  std::size_t pos = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw std::invalid_argument("compute_class_weights: labels must be 0 or 1");
    pos += static_cast<std::size_t>(l);
  }
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw std::invalid_argument("compute_class_weights: both classes required");
  const double n = static_cast<double>(labels.size());
  return {n / (2.0 * static_cast<double>(neg)), n / (2.0 * static_cast<double>(pos))};
}

inline constexpr double kProbabilityClamp = 1e-12;

struct LabeledPrediction {
  int r = 0;
  double p = 0.5;
  int m = 1;
  std::size_t horizon = 0;
};

// -sum m [w_n (1-r) log(1-p) + w_p r log p] / sum m, p clamped to
// [1e-12, 1 - 1e-12]. Throws std::domain_error when every mask is zero.
inline double masked_wcce(std::span<const LabeledPrediction> batch, const ClassWeights& w) {
  if (batch.empty()) throw std::invalid_argument("masked_wcce: empty batch");
  double total = 0, msum = 0;
  for (const auto& s : batch) {
    if (!s.m) continue;
    const double p = std::clamp(s.p, kProbabilityClamp, 1.0 - kProbabilityClamp);
    total -= s.r ? w.w_p * std::log(p) : w.w_n * std::log(1.0 - p);
    msum += 1.0;
  }
  if (msum == 0) throw std::domain_error("masked_wcce: no unmasked labels in batch");
  return total / msum;
}

// Tensor form over probabilities (n x H); labels and masks are n x H
// row-major, weights one pair per column.
inline nn::Tensor masked_wcce(const nn::Tensor& probs, const std::vector<int>& labels, const std::vector<int>& masks,
                              const std::vector<ClassWeights>& weights) {
  const std::size_t n = probs.rows(), h = probs.cols();
  if (n == 0) throw std::invalid_argument("masked_wcce: empty batch");
  if (labels.size() != probs.size() || masks.size() != probs.size() || weights.size() != h)
    throw nn::ShapeError("masked_wcce: labels/masks/weights do not match " + probs.shape().str());
  double msum = 0;
  for (int m : masks) msum += m ? 1.0 : 0.0;
  if (msum == 0) throw std::domain_error("masked_wcce: no unmasked labels in batch");
  auto pv = probs.values();
  double total = 0;
  std::vector<double> dp(probs.size(), 0.0);
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (!masks[i]) continue;
    const auto& w = weights[i % h];
    const double raw = pv[i];
    const double p = std::clamp(raw, kProbabilityClamp, 1.0 - kProbabilityClamp);
    const bool clamped = p != raw;
    if (labels[i]) {
      total -= w.w_p * std::log(p);
      dp[i] = clamped ? 0.0 : -w.w_p / p / msum;
    } else {
      total -= w.w_n * std::log(1.0 - p);
      dp[i] = clamped ? 0.0 : w.w_n / (1.0 - p) / msum;
    }
  }
  return nn::make_result({1, 1}, {total / msum}, {probs}, [dp = std::move(dp)](nn::detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < dp.size(); ++i) g[i] += self.grad[0] * dp[i];
  });
}

// ---------------------------------------------------------------- data

struct PreparedPrior {
  std::vector<double> features;
  std::size_t bucket = 0;
  int delta_months = 0;
};

// Model-ready view of one IndexCase on one track. Priors most recent first.
struct PreparedCase {
  std::string patient_id;
  std::vector<double> index;
  std::vector<PreparedPrior> priors;
  std::array<int, kHorizonCount> labels{};
  std::array<int, kHorizonCount> masks{};
};

// Imaging: every case. Clinical: cases with an index clinical sample.
inline std::vector<PreparedCase> prepare_cases(std::span<const IndexCase> cases, Track track, const NormStats& norm) {
  std::vector<PreparedCase> out;
  for (const auto& c : cases) {
    PreparedCase p;
    p.patient_id = c.patient_id;
    p.labels = c.labels;
    p.masks = c.masks;
    if (track == Track::imaging) {
      p.index = *c.index.imaging;
      for (const auto& prior : c.imaging_priors)
        p.priors.push_back({*prior.visit.imaging,
                            static_cast<std::size_t>(discretize_interval(prior.delta_months, Track::imaging)),
                            prior.delta_months});
    } else {
      if (!c.index_clinical) continue;
      const auto f = preprocess_clinical(*c.index_clinical, norm);
      p.index.assign(f.begin(), f.end());
      for (const auto& prior : c.clinical_priors) {
        const auto pf = preprocess_clinical(prior.sample, norm);
        p.priors.push_back({{pf.begin(), pf.end()},
                            static_cast<std::size_t>(discretize_interval(prior.delta_months, Track::clinical)),
                            prior.delta_months});
      }
    }
    out.push_back(std::move(p));
  }
  return out;
}

// Single-exam population patients as index-only cases (current horizon).
inline std::vector<PreparedCase> population_cases(std::span<const PopulationExam> exams) {
  std::vector<PreparedCase> out;
  for (const auto& e : exams) {
    PreparedCase p;
    p.patient_id = e.patient_id;
    p.index = e.imaging;
    p.labels = {e.label, 0};
    p.masks = {1, 0};
    out.push_back(std::move(p));
  }
  return out;
}

// Uniform choice among a case's priors.
inline std::size_t sample_training_pair(const PreparedCase& c, std::mt19937_64& rng) {
  if (c.priors.empty()) throw std::invalid_argument("sample_training_pair: case " + c.patient_id + " has no priors");
  std::uniform_int_distribution<std::size_t> pick(0, c.priors.size() - 1);
  return pick(rng);
}

// Prior positions used per case; empty = index only.
using Selection = std::vector<std::vector<std::size_t>>;

struct Batch {
  nn::Tensor inputs;  // per case: index row, then the selected priors
  std::vector<std::size_t> index_rows;
  std::vector<std::size_t> buckets;
  std::vector<std::size_t> segments;
  std::vector<int> labels;  // n x 2
  std::vector<int> masks;
};

inline Batch make_batch(std::span<const PreparedCase* const> cases, const Selection& selection) {
  if (cases.empty()) throw std::invalid_argument("make_batch: no cases");
  if (selection.size() != cases.size()) throw std::invalid_argument("make_batch: selection size mismatch");
  const std::size_t dim = cases.front()->index.size();
  Batch b;
  std::vector<double> x;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const auto& c = *cases[i];
    if (c.index.size() != dim) throw nn::ShapeError("make_batch: mixed feature dims");
    b.index_rows.push_back(b.buckets.size());
    x.insert(x.end(), c.index.begin(), c.index.end());
    b.buckets.push_back(0);
    for (auto j : selection[i]) {
      const auto& p = c.priors.at(j);
      x.insert(x.end(), p.features.begin(), p.features.end());
      b.buckets.push_back(p.bucket);
    }
    b.segments.push_back(1 + selection[i].size());
    for (std::size_t h = 0; h < kHorizonCount; ++h) {
      b.labels.push_back(c.labels[h]);
      b.masks.push_back(c.masks[h]);
    }
  }
  b.inputs = nn::Tensor::constant({b.buckets.size(), dim}, std::move(x));
  return b;
}

// Probabilities at the current and five-year horizons from curve logits.
inline nn::Tensor horizon_probabilities(const nn::Tensor& logits) {
  return nn::sigmoid(nn::take_cols(logits, {0, kHazardSteps}));
}

inline std::vector<ClassWeights> horizon_weights(std::span<const PreparedCase> cases) {
  std::vector<ClassWeights> out;
  for (std::size_t h = 0; h < kHorizonCount; ++h) {
    std::vector<int> labels;
    for (const auto& c : cases)
      if (c.masks[h]) labels.push_back(c.labels[h]);
    out.push_back(compute_class_weights(labels));
  }
  return out;
}

// ---------------------------------------------------------------- models

// Encoder, risk head, temporal learner and refinement head for one track.
struct TrackModel {
  Track track = Track::imaging;
  Encoder encoder;
  RiskHead head;
  TemporalLearner tl;
  RefinementHead rr;

  TrackModel() = default;
  TrackModel(Track t, std::uint64_t seed, const TemporalConfig& temporal = {}) : track(t) {
    std::mt19937_64 rng(seed);
    encoder = Encoder(t, rng);
    head = RiskHead(representation_dim(t), rng);
    tl = TemporalLearner(t, rng, temporal);
    rr = RefinementHead(rng);
  }

  nn::ParameterList parameters(const std::string& prefix) const {
    auto out = encoder.parameters(prefix + ".encoder");
    nn::append(out, head.parameters(prefix + ".head"));
    nn::append(out, tl.parameters(prefix + ".tl"));
    nn::append(out, rr.parameters(prefix + ".rr"));
    return out;
  }
  nn::ParameterList refinement_parameters(const std::string& prefix) const {
    auto out = tl.parameters(prefix + ".tl");
    nn::append(out, rr.parameters(prefix + ".rr"));
    return out;
  }
};

// Unrefined curve logits (n x 6) from the index rows.
inline nn::Tensor index_logits(const TrackModel& m, const Batch& b) {
  const auto z = m.encoder(b.inputs);
  return additive_hazard_logits(m.head.preactivations(nn::gather_rows(z, b.index_rows)));
}

// Steered curve logits (n x 6); every case must carry at least one prior.
inline nn::Tensor steered_logits(const TrackModel& m, const Batch& b) {
  for (auto s : b.segments)
    if (s < 2) throw std::invalid_argument("steered_logits: case without priors; use index_logits");
  const auto z = m.encoder(b.inputs);
  const auto base = m.head.preactivations(nn::gather_rows(z, b.index_rows));
  return refined_logits(base, m.rr(m.tl(z, b.buckets, b.segments)));
}

// Joint-learning ablation: the temporal learner's pooled output feeds a risk
// head directly, with no index-only estimate to steer.
struct JointModel {
  Encoder encoder;
  TemporalLearner tl;
  RiskHead head;

  JointModel() = default;
  JointModel(std::uint64_t seed, const TemporalConfig& temporal = {}) {
    std::mt19937_64 rng(seed);
    encoder = Encoder(Track::clinical, rng);
    tl = TemporalLearner(Track::clinical, rng, temporal);
    head = RiskHead(kClinicalRepresentationDim, rng);
  }

  nn::ParameterList parameters(const std::string& prefix) const {
    auto out = encoder.parameters(prefix + ".encoder");
    nn::append(out, tl.parameters(prefix + ".tl"));
    nn::append(out, head.parameters(prefix + ".head"));
    return out;
  }
};

inline nn::Tensor joint_logits(const JointModel& m, const Batch& b) {
  for (auto s : b.segments)
    if (s < 2) throw std::invalid_argument("joint baseline: every case needs at least one prior");
  const auto z = m.encoder(b.inputs);
  return additive_hazard_logits(m.head.preactivations(m.tl.pooled(z, b.buckets, b.segments)));
}

// ---------------------------------------------------------------- inference

inline constexpr std::size_t kInferenceChunk = 256;

namespace detail {

template <class F>
void for_chunks(std::size_t n, F&& f) {
  for (std::size_t start = 0; start < n; start += kInferenceChunk) f(start, std::min(n, start + kInferenceChunk));
}

inline std::vector<const PreparedCase*> pointers(std::span<const PreparedCase> cases, std::size_t lo, std::size_t hi) {
  std::vector<const PreparedCase*> out;
  for (std::size_t i = lo; i < hi; ++i) out.push_back(&cases[i]);
  return out;
}

inline void copy_rows(const nn::Tensor& t, std::vector<HeadOutputs>& out, std::size_t at) {
  auto v = t.values();
  for (std::size_t r = 0; r < t.rows(); ++r) std::copy_n(v.data() + r * kHeadOutputs, kHeadOutputs, out[at + r].begin());
}

}  // namespace detail

// Index-only head outputs. Chunking depends only on the case count, so the
// same case list always yields bit-identical outputs.
inline std::vector<HeadOutputs> base_outputs(const TrackModel& m, std::span<const PreparedCase> cases) {
  nn::NoGradGuard guard;
  std::vector<HeadOutputs> out(cases.size());
  detail::for_chunks(cases.size(), [&](std::size_t lo, std::size_t hi) {
    const auto ptrs = detail::pointers(cases, lo, hi);
    const auto b = make_batch(ptrs, Selection(ptrs.size()));
    detail::copy_rows(m.head.preactivations(nn::gather_rows(m.encoder(b.inputs), b.index_rows)), out, lo);
  });
  return out;
}

// Refinement adjustments for cases with a non-empty selection.
inline std::vector<std::optional<HeadOutputs>> adjustments(const TrackModel& m, std::span<const PreparedCase> cases,
                                                           const Selection& selection) {
  if (selection.size() != cases.size()) throw std::invalid_argument("adjustments: selection size mismatch");
  nn::NoGradGuard guard;
  std::vector<std::size_t> with;
  for (std::size_t i = 0; i < cases.size(); ++i)
    if (!selection[i].empty()) with.push_back(i);
  std::vector<std::optional<HeadOutputs>> out(cases.size());
  detail::for_chunks(with.size(), [&](std::size_t lo, std::size_t hi) {
    std::vector<const PreparedCase*> ptrs;
    Selection sel;
    for (std::size_t k = lo; k < hi; ++k) {
      ptrs.push_back(&cases[with[k]]);
      sel.push_back(selection[with[k]]);
    }
    const auto b = make_batch(ptrs, sel);
    const auto adj = m.rr(m.tl(m.encoder(b.inputs), b.buckets, b.segments));
    auto v = adj.values();
    for (std::size_t r = 0; r < ptrs.size(); ++r) {
      HeadOutputs a{};
      std::copy_n(v.data() + r * kHeadOutputs, kHeadOutputs, a.begin());
      out[with[lo + r]] = a;
    }
  });
  return out;
}

// Single-track refinement over a case list.
inline std::vector<RefinedCurve> predict(const TrackModel& m, std::span<const PreparedCase> cases,
                                         const Selection& selection) {
  const auto base = base_outputs(m, cases);
  const auto adj = adjustments(m, cases, selection);
  std::vector<RefinedCurve> out;
  for (std::size_t i = 0; i < cases.size(); ++i)
    out.push_back(adj[i] ? detail::refined_from(base[i], *adj[i]) : detail::unrefined(base[i]));
  return out;
}

// Successive refinement: imaging adjustments, then clinical ones. Cases
// without a clinical counterpart (or with an empty clinical selection) get
// imaging-only refinement.
inline std::vector<RefinedCurve> predict_combined(const TrackModel& imaging, const TrackModel& clinical,
                                                  std::span<const PreparedCase> imaging_cases,
                                                  const Selection& imaging_selection,
                                                  std::span<const PreparedCase> clinical_cases,
                                                  const std::vector<std::optional<std::size_t>>& clinical_of,
                                                  const Selection& clinical_selection) {
  if (clinical_of.size() != imaging_cases.size()) throw std::invalid_argument("predict_combined: mapping size");
  const auto base = base_outputs(imaging, imaging_cases);
  const auto adj_img = adjustments(imaging, imaging_cases, imaging_selection);
  const auto adj_clin = adjustments(clinical, clinical_cases, clinical_selection);
  std::vector<RefinedCurve> out;
  for (std::size_t i = 0; i < imaging_cases.size(); ++i) {
    const std::optional<HeadOutputs>* clin = nullptr;
    if (clinical_of[i] && adj_clin.at(*clinical_of[i])) clin = &adj_clin[*clinical_of[i]];
    if (!adj_img[i] && !clin) {
      out.push_back(detail::unrefined(base[i]));
      continue;
    }
    HeadOutputs pre = base[i], total{};
    for (const auto* a : {adj_img[i] ? &adj_img[i] : nullptr, clin}) {
      if (!a) continue;
      for (std::size_t k = 0; k < kHeadOutputs; ++k) {
        pre[k] += (**a)[k];
        total[k] += (**a)[k];
      }
    }
    auto curve = detail::unrefined(pre);
    curve.adjustments = total;
    out.push_back(curve);
  }
  return out;
}

inline std::vector<RefinedCurve> predict_joint(const JointModel& m, std::span<const PreparedCase> cases,
                                               const Selection& selection) {
  if (selection.size() != cases.size()) throw std::invalid_argument("predict_joint: selection size mismatch");
  nn::NoGradGuard guard;
  std::vector<HeadOutputs> pre(cases.size());
  detail::for_chunks(cases.size(), [&](std::size_t lo, std::size_t hi) {
    const auto ptrs = detail::pointers(cases, lo, hi);
    const auto b = make_batch(ptrs, Selection(selection.begin() + static_cast<std::ptrdiff_t>(lo),
                                              selection.begin() + static_cast<std::ptrdiff_t>(hi)));
    for (auto s : b.segments)
      if (s < 2) throw std::invalid_argument("joint baseline: every case needs at least one prior");
    detail::copy_rows(m.head.preactivations(m.tl.pooled(m.encoder(b.inputs), b.buckets, b.segments)), pre, lo);
  });
  std::vector<RefinedCurve> out;
  for (const auto& p : pre) out.push_back(detail::unrefined(p));
  return out;
}

// Masked WCCE over whole-set predictions, summed in case order.
inline double evaluation_loss(std::span<const RefinedCurve> curves, std::span<const PreparedCase> cases,
                              const std::vector<ClassWeights>& weights, bool current_only = false) {
  double total = 0, msum = 0;
  for (std::size_t i = 0; i < cases.size(); ++i)
    for (std::size_t h = 0; h < kHorizonCount; ++h) {
      if (!cases[i].masks[h] || (current_only && h != kCurrent)) continue;
      const LabeledPrediction s{cases[i].labels[h], curves[i].probabilities[h == kCurrent ? 0 : kHazardSteps], 1, h};
      total += masked_wcce(std::span(&s, 1), weights[h]);
      msum += 1;
    }
  if (msum == 0) throw std::domain_error("evaluation_loss: no unmasked labels");
  return total / msum;
}

// ---------------------------------------------------------------- config

struct TrainConfig {
  std::uint64_t seed = 0;  // set by the experiment driver, not read from config files
  std::size_t pretrain_epochs = 50;
  double pretrain_lr = 1e-3;
  double tau = 0.07;
  std::size_t epochs = 100;  // stage 2, stage 3, clinical and joint runs
  double lr = 1e-5;
  double refine_lr = 0;  // stage 3 of the imaging track; 0 = lr
  double weight_decay = 1e-4;
  std::size_t plateau_patience = 5;
  double plateau_factor = 0.5;
  std::size_t early_stop_patience = 10;
  std::size_t batch_size = 32;
  bool freeze_stage3 = false;  // stage 3 trains only the temporal learner and refinement head
  TemporalConfig temporal;

  void validate() const {
    if (!(lr > 0) || !(pretrain_lr > 0)) throw ConfigError("train.lr", "learning rates must be positive");
    if (!(refine_lr >= 0)) throw ConfigError("train.refine_lr", "must be non-negative");
    if (weight_decay < 0) throw ConfigError("train.weight_decay", "must be non-negative");
    if (!(tau > 0)) throw ConfigError("train.tau", "must be positive");
    if (batch_size < 2) throw ConfigError("train.batch_size", "must be at least 2");
    if (!(plateau_factor > 0 && plateau_factor <= 1)) throw ConfigError("train.plateau_factor", "must be in (0, 1]");
    if (plateau_patience == 0) throw ConfigError("train.plateau_patience", "must be positive");
    if (early_stop_patience == 0) throw ConfigError("train.early_stop_patience", "must be positive");
    if (temporal.layers == 0) throw ConfigError("train.tl_layers", "must be positive");
    if (temporal.heads == 0 || kClinicalRepresentationDim % temporal.heads || kImagingRepresentationDim % temporal.heads)
      throw ConfigError("train.tl_heads", "must divide both representation dims (32, 256)");
  }

  static TrainConfig from_config(const KeyValueConfig& kv, const std::string& prefix = "train.") {
    TrainConfig c;
    auto key = [&](const char* k) { return prefix + k; };
    auto size = [&](const char* k, std::size_t def) {
      const auto v = kv.get_int(key(k), static_cast<long long>(def));
      if (v < 0) throw ConfigError(key(k), "must be non-negative");
      return static_cast<std::size_t>(v);
    };
    c.pretrain_epochs = size("pretrain_epochs", c.pretrain_epochs);
    c.pretrain_lr = kv.get_double(key("pretrain_lr"), c.pretrain_lr);
    c.tau = kv.get_double(key("tau"), c.tau);
    c.epochs = size("epochs", c.epochs);
    c.lr = kv.get_double(key("lr"), c.lr);
    c.refine_lr = kv.get_double(key("refine_lr"), c.refine_lr);
    c.weight_decay = kv.get_double(key("weight_decay"), c.weight_decay);
    c.plateau_patience = size("plateau_patience", c.plateau_patience);
    c.plateau_factor = kv.get_double(key("plateau_factor"), c.plateau_factor);
    c.early_stop_patience = size("early_stop_patience", c.early_stop_patience);
    c.batch_size = size("batch_size", c.batch_size);
    c.freeze_stage3 = kv.get_bool(key("freeze_stage3"), c.freeze_stage3);
    c.temporal.layers = size("tl_layers", c.temporal.layers);
    c.temporal.heads = size("tl_heads", c.temporal.heads);
    c.temporal.ff_width = size("tl_ff_width", c.temporal.ff_width);
    c.validate();
    return c;
  }

  void write(KeyValueConfig& kv, const std::string& prefix = "train.") const {
    auto key = [&](const char* k) { return prefix + k; };
    kv.set(key("pretrain_epochs"), static_cast<long long>(pretrain_epochs));
    kv.set(key("pretrain_lr"), pretrain_lr);
    kv.set(key("tau"), tau);
    kv.set(key("epochs"), static_cast<long long>(epochs));
    kv.set(key("lr"), lr);
    kv.set(key("refine_lr"), refine_lr);
    kv.set(key("weight_decay"), weight_decay);
    kv.set(key("plateau_patience"), static_cast<long long>(plateau_patience));
    kv.set(key("plateau_factor"), plateau_factor);
    kv.set(key("early_stop_patience"), static_cast<long long>(early_stop_patience));
    kv.set(key("batch_size"), static_cast<long long>(batch_size));
    kv.set(key("freeze_stage3"), std::string(freeze_stage3 ? "true" : "false"));
    kv.set(key("tl_layers"), static_cast<long long>(temporal.layers));
    kv.set(key("tl_heads"), static_cast<long long>(temporal.heads));
    kv.set(key("tl_ff_width"), static_cast<long long>(temporal.ff_width));
  }

  static std::set<std::string> keys(const std::string& prefix = "train.") {
    KeyValueConfig kv;
    TrainConfig{}.write(kv, prefix);
    std::set<std::string> out;
    for (const auto& [k, v] : kv.entries()) out.insert(k);
    return out;
  }
};

// ---------------------------------------------------------------- loop

struct EpochRecord {
  std::string stage;
  std::size_t epoch = 0;
  std::optional<double> train_loss;  // absent for the pre-training evaluation
  double val_loss = 0;
  double lr = 0;
  std::size_t skipped_batches = 0;
};

using MetricsLog = std::vector<EpochRecord>;

inline std::string to_json_line(const EpochRecord& r) {
  return "{\"stage\":\"" + r.stage + "\",\"epoch\":" + std::to_string(r.epoch) +
         ",\"train_loss\":" + (r.train_loss ? format_double(*r.train_loss) : std::string("null")) +
         ",\"val_loss\":" + format_double(r.val_loss) + ",\"lr\":" + format_double(r.lr) +
         ",\"skipped_batches\":" + std::to_string(r.skipped_batches) + "}";
}

inline std::string to_jsonl(const MetricsLog& log) {
  std::string out;
  for (const auto& r : log) out += to_json_line(r) + "\n";
  return out;
}

struct StageSpec {
  std::string name;
  nn::ParameterList params;
  std::size_t n_train = 0;
  std::size_t epochs = 0;
  // Loss for one minibatch (indices into the training cases); nullopt when
  // every label in the batch is masked.
  std::function<std::optional<nn::Tensor>(std::span<const std::size_t>, std::size_t epoch, std::mt19937_64&)> batch_loss;
  std::function<double(std::size_t epoch)> validation_loss;
  // Validation losses up to this epoch use a different objective: they are
  // neither kept as best nor counted for early stopping, and the learning
  // rate schedule restarts after it.
  std::size_t early_stop_after = 0;
};

// AdamW with plateau halving and early stopping; parameters end at the epoch
// with the lowest validation loss (epoch 0 = the starting point).
inline void run_stage(const StageSpec& spec, const TrainConfig& config, std::mt19937_64& rng, MetricsLog& log) {
  if (spec.n_train == 0) throw std::invalid_argument("training stage " + spec.name + ": no training cases");
  auto params = spec.params;
  nn::OptimizerState state;
  state.config = {config.lr, config.weight_decay};
  nn::PlateauScheduler schedule(config.lr, config.plateau_patience, config.plateau_factor);
  std::vector<double> history{spec.validation_loss(0)};
  log.push_back({spec.name, 0, std::nullopt, history.back(), state.config.lr, 0});
  double best = history.back();
  nn::Snapshot best_params(params);

  std::vector<std::size_t> order(spec.n_train);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 1; epoch <= spec.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0;
    std::size_t batches = 0, skipped = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(config.batch_size, order.size() - start));
      nn::zero_grads(params);
      auto loss = spec.batch_loss(idx, epoch, rng);
      if (!loss) {
        ++skipped;
        continue;
      }
      if (!std::isfinite(loss->item())) throw NumericalError(spec.name + ": non-finite training loss at epoch " +
                                                             std::to_string(epoch));
      total += loss->item();
      ++batches;
      nn::backward(*loss);
      nn::adamw_step(state, params);
    }
    const double val = spec.validation_loss(epoch);
    if (!std::isfinite(val)) throw NumericalError(spec.name + ": non-finite validation loss at epoch " + std::to_string(epoch));
    history.push_back(val);
    log.push_back({spec.name, epoch, batches ? total / static_cast<double>(batches) : 0.0, val, state.config.lr, skipped});
    const bool phase_start = spec.early_stop_after > 0 && epoch == spec.early_stop_after + 1;
    if (val < best || phase_start) {
      best = val;
      best_params = nn::Snapshot(params);
    }
    state.config.lr = schedule.step(val);
    if (epoch == spec.early_stop_after && epoch > 0) {
      schedule = nn::PlateauScheduler(config.lr, config.plateau_patience, config.plateau_factor);
      state.config.lr = config.lr;
    }
    const std::size_t first = spec.early_stop_after > 0 ? spec.early_stop_after + 1 : 0;
    if (epoch >= first &&
        nn::early_stop(std::vector<double>(history.begin() + static_cast<std::ptrdiff_t>(first), history.end()),
                       config.early_stop_patience))
      break;
  }
  nn::zero_grads(params);
  best_params.restore(params);
}

// ---------------------------------------------------------------- data bundle

struct TrainingData {
  std::vector<PreparedCase> train;       // longitudinal index cases
  std::vector<PreparedCase> validation;
  std::vector<PopulationExam> population_train;  // single-exam patients
  std::vector<PopulationExam> population_validation;
};

inline std::vector<IndexCase> longitudinal_cases(const Cohort& cohort) {
  std::vector<IndexCase> out;
  for (const auto& p : cohort) {
    if (!has_followup(p)) continue;
    auto cases = index_cases_for(p);
    out.insert(out.end(), std::make_move_iterator(cases.begin()), std::make_move_iterator(cases.end()));
  }
  return out;
}

inline TrainingData prepare_training_data(const CohortSplit& split, Track track, const NormStats& norm) {
  TrainingData d;
  d.train = prepare_cases(longitudinal_cases(split.train), track, norm);
  d.validation = prepare_cases(longitudinal_cases(split.validation), track, norm);
  if (track == Track::imaging) {
    d.population_train = population_exams(split.train);
    d.population_validation = population_exams(split.validation);
  }
  return d;
}

// Curriculum phase one: five-year terms masked out, current ones untouched.
inline std::vector<int> current_horizon_masks(std::vector<int> masks) {
  if (masks.size() % kHorizonCount) throw std::invalid_argument("current_horizon_masks: not n x 2");
  for (std::size_t i = kFiveYear; i < masks.size(); i += kHorizonCount) masks[i] = 0;
  return masks;
}

namespace detail {

inline std::vector<PreparedCase> with_priors(std::span<const PreparedCase> cases) {
  std::vector<PreparedCase> out;
  for (const auto& c : cases)
    if (!c.priors.empty()) out.push_back(c);
  return out;
}

// One seeded prior per case (index only when a case has none).
inline Selection fixed_pairs(std::span<const PreparedCase> cases, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Selection s(cases.size());
  for (std::size_t i = 0; i < cases.size(); ++i)
    if (!cases[i].priors.empty()) s[i] = {sample_training_pair(cases[i], rng)};
  return s;
}

inline std::optional<nn::Tensor> pair_loss(std::span<const PreparedCase> cases, std::span<const std::size_t> idx,
                                           std::mt19937_64& rng, const std::vector<ClassWeights>& weights,
                                           bool current_only, const std::function<nn::Tensor(const Batch&)>& logits) {
  std::vector<const PreparedCase*> ptrs;
  Selection sel;
  for (auto i : idx) {
    ptrs.push_back(&cases[i]);
    sel.push_back({sample_training_pair(cases[i], rng)});
  }
  auto b = make_batch(ptrs, sel);
  if (current_only) b.masks = current_horizon_masks(b.masks);
  if (std::none_of(b.masks.begin(), b.masks.end(), [](int m) { return m != 0; })) return std::nullopt;
  return masked_wcce(horizon_probabilities(logits(b)), b.labels, b.masks, weights);
}

}  // namespace detail

// Imaging track: contrastive pretraining, supervised index-visit training of
// encoder and risk head, then end-to-end steering on (index, prior) pairs.
inline TrackModel train_imaging(const TrainingData& data, const TrainConfig& config, MetricsLog& log) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  TrackModel model(Track::imaging, rng(), config.temporal);

  PretrainConfig pc{config.pretrain_epochs, config.pretrain_lr, config.tau, config.batch_size, rng()};
  if (!data.population_train.empty() && config.pretrain_epochs > 0) {
    const auto report = pretrain(model.encoder, data.population_train, data.population_validation, pc);
    for (std::size_t e = 0; e < report.val_loss.size(); ++e)
      log.push_back({"pretrain", e, e ? std::optional<double>(report.train_loss[e - 1]) : std::nullopt,
                     report.val_loss[e], config.pretrain_lr, 0});
  }

  // Stage 2: index visits of longitudinal and population patients.
  auto stage2_cases = data.train;
  for (auto& c : population_cases(data.population_train)) stage2_cases.push_back(std::move(c));
  const auto w2 = horizon_weights(stage2_cases);
  const Selection no_priors(data.validation.size());
  StageSpec s2;
  s2.name = "stage2";
  s2.params = model.encoder.parameters("imaging.encoder");
  nn::append(s2.params, model.head.parameters("imaging.head"));
  s2.n_train = stage2_cases.size();
  s2.epochs = config.epochs;
  s2.batch_loss = [&](std::span<const std::size_t> idx, std::size_t, std::mt19937_64&) -> std::optional<nn::Tensor> {
    std::vector<const PreparedCase*> ptrs;
    for (auto i : idx) ptrs.push_back(&stage2_cases[i]);
    const auto b = make_batch(ptrs, Selection(ptrs.size()));
    return masked_wcce(horizon_probabilities(index_logits(model, b)), b.labels, b.masks, w2);
  };
  s2.validation_loss = [&](std::size_t) { return evaluation_loss(predict(model, data.validation, no_priors), data.validation, w2); };
  run_stage(s2, config, rng, log);

  // Stage 3: steering on (index, random prior) pairs.
  const auto paired = detail::with_priors(data.train);
  const auto w3 = horizon_weights(paired);
  const auto val_pairs = detail::fixed_pairs(data.validation, config.seed ^ 0x5eedULL);
  StageSpec s3;
  s3.name = "stage3";
  s3.params = config.freeze_stage3 ? model.refinement_parameters("imaging") : model.parameters("imaging");
  s3.n_train = paired.size();
  s3.epochs = config.epochs;
  s3.batch_loss = [&](std::span<const std::size_t> idx, std::size_t, std::mt19937_64& r) {
    return detail::pair_loss(paired, idx, r, w3, false, [&](const Batch& b) { return steered_logits(model, b); });
  };
  s3.validation_loss = [&](std::size_t) {
    return evaluation_loss(predict(model, data.validation, val_pairs), data.validation, w3);
  };
  auto c3 = config;
  if (config.refine_lr > 0) c3.lr = config.refine_lr;
  run_stage(s3, c3, rng, log);
  return model;
}

// Clinical track: end-to-end on (index, prior) pairs. The first half of the
// epochs trains the current horizon only, the rest both horizons.
inline TrackModel train_clinical(const TrainingData& data, const TrainConfig& config, MetricsLog& log) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  TrackModel model(Track::clinical, rng(), config.temporal);
  const auto paired = detail::with_priors(data.train);
  const auto weights = horizon_weights(paired);
  const auto val_pairs = detail::fixed_pairs(data.validation, config.seed ^ 0x5eedULL);
  const std::size_t switch_epoch = config.epochs / 2;
  StageSpec spec;
  spec.name = "clinical";
  spec.params = model.parameters("clinical");
  spec.n_train = paired.size();
  spec.epochs = config.epochs;
  spec.early_stop_after = switch_epoch;
  spec.batch_loss = [&](std::span<const std::size_t> idx, std::size_t epoch, std::mt19937_64& r) {
    return detail::pair_loss(paired, idx, r, weights, epoch <= switch_epoch,
                             [&](const Batch& b) { return steered_logits(model, b); });
  };
  spec.validation_loss = [&](std::size_t epoch) {
    return evaluation_loss(predict(model, data.validation, val_pairs), data.validation, weights, epoch <= switch_epoch);
  };
  run_stage(spec, config, rng, log);
  return model;
}

// Ablation baseline on the clinical data with the clinical recipe.
inline JointModel train_joint_baseline(const TrainingData& data, const TrainConfig& config, MetricsLog& log) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  JointModel model(rng(), config.temporal);
  const auto paired = detail::with_priors(data.train);
  const auto val_cases = detail::with_priors(data.validation);
  const auto weights = horizon_weights(paired);
  const auto val_pairs = detail::fixed_pairs(val_cases, config.seed ^ 0x5eedULL);
  const std::size_t switch_epoch = config.epochs / 2;
  StageSpec spec;
  spec.name = "joint";
  spec.params = model.parameters("joint");
  spec.n_train = paired.size();
  spec.epochs = config.epochs;
  spec.early_stop_after = switch_epoch;
  spec.batch_loss = [&](std::span<const std::size_t> idx, std::size_t epoch, std::mt19937_64& r) {
    return detail::pair_loss(paired, idx, r, weights, epoch <= switch_epoch,
                             [&](const Batch& b) { return joint_logits(model, b); });
  };
  spec.validation_loss = [&](std::size_t epoch) {
    return evaluation_loss(predict_joint(model, val_cases, val_pairs), val_cases, weights, epoch <= switch_epoch);
  };
  run_stage(spec, config, rng, log);
  return model;
}

// Trained models for one variant. Combined reuses (freezes) the imaging and
// clinical track models.
struct ModelBundle {
  Variant variant = Variant::imaging;
  std::optional<TrackModel> imaging;
  std::optional<TrackModel> clinical;
  std::optional<JointModel> joint;
};

inline ModelBundle train_variant(Variant variant, const TrainingData& data, const TrainConfig& config, MetricsLog& log,
                                 const ModelBundle* imaging_prerequisite = nullptr,
                                 const ModelBundle* clinical_prerequisite = nullptr) {
  ModelBundle out;
  out.variant = variant;
  switch (variant) {
    case Variant::imaging: out.imaging = train_imaging(data, config, log); break;
    case Variant::clinical: out.clinical = train_clinical(data, config, log); break;
    case Variant::joint: out.joint = train_joint_baseline(data, config, log); break;
    case Variant::combined:
      if (!imaging_prerequisite || !imaging_prerequisite->imaging)
        throw MissingArtifact("imaging model (train the imaging variant before combined)");
      if (!clinical_prerequisite || !clinical_prerequisite->clinical)
        throw MissingArtifact("clinical model (train the clinical variant before combined)");
      out.imaging = imaging_prerequisite->imaging;
      out.clinical = clinical_prerequisite->clinical;
      break;
  }
  return out;
}

}  // namespace riskref

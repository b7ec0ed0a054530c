#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "riskref/cohort.hpp"
#include "riskref/nn/layers.hpp"
#include "riskref/nn/optim.hpp"

namespace riskref {

inline constexpr std::size_t kImagingRepresentationDim = 256;
inline constexpr std::size_t kClinicalRepresentationDim = 32;

inline std::size_t representation_dim(Track t) {
  return t == Track::imaging ? kImagingRepresentationDim : kClinicalRepresentationDim;
}
inline std::size_t input_dim(Track t) { return t == Track::imaging ? kImagingFeatureDim : kClinicalFeatureDim; }

struct Representation {
  std::vector<double> vector;
  Track track = Track::imaging;
};

// Feed-forward encoder: two hidden ReLU layers (128 wide for imaging, 32 for
// clinical) and a linear output at the track's representation dim.
class Encoder {
 public:
  Encoder() = default;
  Encoder(Track track, std::mt19937_64& rng, bool zero_init_last = false) : track_(track) {
    const std::size_t hidden = track == Track::imaging ? 128 : 32;
    mlp_ = nn::Mlp({input_dim(track), hidden, hidden, representation_dim(track)}, rng, zero_init_last);
  }

  Track track() const { return track_; }
  std::size_t in_dim() const { return input_dim(track_); }
  std::size_t out_dim() const { return representation_dim(track_); }

  // Batched: rows are visits.
  nn::Tensor operator()(const nn::Tensor& x) const {
    if (x.cols() != in_dim())
      throw nn::ShapeError(std::string(track_name(track_)) + " encoder input", x.shape(), nn::Shape{x.rows(), in_dim()});
    return mlp_(x);
  }

  Representation encode(std::span<const double> features) const {
    if (features.size() != in_dim())
      throw nn::ShapeError(std::string(track_name(track_)) + " encoder: expected " + std::to_string(in_dim()) +
                           " features, got " + std::to_string(features.size()));
    nn::NoGradGuard guard;
    const auto z = (*this)(nn::Tensor::row(std::vector<double>(features.begin(), features.end())));
    return {{z.values().begin(), z.values().end()}, track_};
  }

  nn::ParameterList parameters(const std::string& prefix) const { return mlp_.parameters(prefix); }

 private:
  Track track_ = Track::imaging;
  nn::Mlp mlp_;
};

inline Representation encode_imaging(const Encoder& enc, std::span<const double> raw) {
  if (enc.track() != Track::imaging) throw std::invalid_argument("encode_imaging: encoder is not an imaging encoder");
  return enc.encode(raw);
}

inline Representation encode_clinical(const Encoder& enc, std::span<const double> features) {
  if (enc.track() != Track::clinical) throw std::invalid_argument("encode_clinical: encoder is not a clinical encoder");
  return enc.encode(features);
}

// Supervised contrastive objective over a temperature-scaled similarity
// matrix (n x n). For each anchor i with same-label partners P(i):
//   l_i = -1/|P(i)| sum_{p in P(i)} [ s_ip - log sum_{a != i} exp(s_ia) ]
// and the loss is the mean of l_i over anchors that have partners.
inline nn::Tensor supervised_contrastive_from_similarity(const nn::Tensor& scaled_sim, std::vector<int> labels) {
  const std::size_t n = scaled_sim.rows();
  if (scaled_sim.cols() != n || labels.size() != n) throw nn::ShapeError("contrastive: similarity must be n x n");
  auto sv = scaled_sim.values();
  std::vector<double> softmax(n * n, 0.0);
  std::vector<std::size_t> positives(n, 0);
  std::size_t anchors = 0;
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) positives[i] += (j != i && labels[j] == labels[i]);
    if (!positives[i]) continue;
    ++anchors;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < n; ++a)
      if (a != i) mx = std::max(mx, sv[i * n + a]);
    double z = 0;
    for (std::size_t a = 0; a < n; ++a)
      if (a != i) z += (softmax[i * n + a] = std::exp(sv[i * n + a] - mx));
    for (std::size_t a = 0; a < n; ++a) softmax[i * n + a] /= z;
    const double log_denominator = mx + std::log(z);
    double li = 0;
    for (std::size_t p = 0; p < n; ++p)
      if (p != i && labels[p] == labels[i]) li -= sv[i * n + p] - log_denominator;
    total += li / static_cast<double>(positives[i]);
  }
  const double loss = anchors ? total / static_cast<double>(anchors) : 0.0;
  return nn::make_result({1, 1}, {loss}, {scaled_sim},
                         [n, anchors, labels = std::move(labels), positives = std::move(positives),
                          softmax = std::move(softmax)](nn::detail::Node& self) {
                           if (!anchors) return;
                           auto& g = self.parents[0]->grad_buffer();
                           const double up = self.grad[0] / static_cast<double>(anchors);
                           for (std::size_t i = 0; i < n; ++i) {
                             if (!positives[i]) continue;
                             const double inv_p = 1.0 / static_cast<double>(positives[i]);
                             for (std::size_t a = 0; a < n; ++a) {
                               if (a == i) continue;
                               double d = softmax[i * n + a];
                               if (labels[a] == labels[i]) d -= inv_p;
                               g[i * n + a] += up * d;
                             }
                           }
                         });
}

// Cosine-similarity supervised contrastive loss at temperature tau.
inline nn::Tensor contrastive_loss(const nn::Tensor& representations, const std::vector<int>& labels, double tau = 0.07) {
  if (!(tau > 0)) throw std::invalid_argument("contrastive_loss: temperature must be positive");
  if (representations.rows() < 2) throw std::invalid_argument("contrastive_loss: batch needs at least two elements");
  if (labels.size() != representations.rows()) throw std::invalid_argument("contrastive_loss: label count mismatch");
  const auto unit = nn::l2_normalize_rows(representations);
  const auto sim = nn::scale(nn::matmul(unit, nn::transpose(unit)), 1.0 / tau);
  return supervised_contrastive_from_similarity(sim, labels);
}

// An exam from a patient without longitudinal follow-up.
struct PopulationExam {
  std::string patient_id;
  std::vector<double> imaging;
  int label = 0;
};

// Only single-exam patients contribute; follow-up patients are skipped.
inline std::vector<PopulationExam> population_exams(const Cohort& cohort) {
  std::vector<PopulationExam> out;
  for (const auto& p : cohort) {
    if (has_followup(p)) continue;
    for (const auto& v : p.visits)
      if (v.imaging) out.push_back({p.id, *v.imaging, *v.label});
  }
  return out;
}

struct PretrainConfig {
  std::size_t epochs = 50;
  double lr = 1e-3;
  double tau = 0.07;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
};

struct PretrainReport {
  std::vector<double> train_loss;
  std::vector<double> val_loss;
  std::size_t best_epoch = 0;  // 0 = the initial encoder
};

namespace detail {

inline nn::Tensor stack_imaging(std::span<const PopulationExam> exams, std::span<const std::size_t> idx) {
  std::vector<double> x;
  x.reserve(idx.size() * kImagingFeatureDim);
  for (auto i : idx) x.insert(x.end(), exams[i].imaging.begin(), exams[i].imaging.end());
  return nn::Tensor::constant({idx.size(), kImagingFeatureDim}, std::move(x));
}

inline double mean_contrastive_loss(const Encoder& enc, std::span<const PopulationExam> exams, std::size_t batch,
                                    double tau) {
  nn::NoGradGuard guard;
  double total = 0;
  std::size_t batches = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < exams.size(); start += batch) {
    idx.clear();
    for (std::size_t i = start; i < std::min(exams.size(), start + batch); ++i) idx.push_back(i);
    if (idx.size() < 2) continue;
    std::vector<int> labels;
    for (auto i : idx) labels.push_back(exams[i].label);
    total += contrastive_loss(enc(stack_imaging(exams, idx)), labels, tau).item();
    ++batches;
  }
  return batches ? total / static_cast<double>(batches) : 0.0;
}

}  // namespace detail

// Label-guided contrastive pretraining with plain SGD. The encoder is left at
// the epoch with the lowest validation loss (the training loss when no
// validation exams are given).
inline PretrainReport pretrain(Encoder& encoder, std::span<const PopulationExam> train,
                               std::span<const PopulationExam> validation, const PretrainConfig& config) {
  if (encoder.track() != Track::imaging) throw std::invalid_argument("pretrain: imaging encoder required");
  if (train.empty()) throw std::invalid_argument("pretrain: empty training set");
  if (config.batch_size < 2) throw std::invalid_argument("pretrain: batch size must be at least 2");
  auto params = encoder.parameters("encoder");
  auto monitor = [&] {
    return detail::mean_contrastive_loss(encoder, validation.empty() ? train : validation, config.batch_size, config.tau);
  };

  PretrainReport report;
  double best = monitor();
  report.val_loss.push_back(best);
  nn::Snapshot best_snapshot(params);
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start + 1 < order.size(); start += config.batch_size) {
      std::span<const std::size_t> idx(order.data() + start, std::min(config.batch_size, order.size() - start));
      if (idx.size() < 2) continue;
      std::vector<int> labels;
      for (auto i : idx) labels.push_back(train[i].label);
      nn::zero_grads(params);
      auto loss = contrastive_loss(encoder(detail::stack_imaging(train, idx)), labels, config.tau);
      epoch_loss += loss.item();
      ++batches;
      nn::backward(loss);
      nn::sgd_step(params, config.lr);
    }
    report.train_loss.push_back(batches ? epoch_loss / static_cast<double>(batches) : 0.0);
    const double val = monitor();
    report.val_loss.push_back(val);
    if (val < best) {
      best = val;
      best_snapshot = nn::Snapshot(params);
      report.best_epoch = epoch;
    }
  }
  nn::zero_grads(params);
  best_snapshot.restore(params);
  return report;
}

}  // namespace riskref

#pragma once

#include <array>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "riskref/cohort.hpp"
#include "riskref/hazard.hpp"
#include "riskref/nn/layers.hpp"
#include "riskref/representation.hpp"

namespace riskref {

inline constexpr std::size_t kChangeSignalDim = 5;
inline constexpr std::size_t kRefinementHidden = 64;

struct TemporalElement {
  Representation representation;
  int bucket = 0;
};

// The index visit (bucket 0) and its priors. Two priors may share a bucket.
struct TemporalSequence {
  Representation index;
  std::vector<TemporalElement> priors;
};

struct ChangeSignal {
  std::array<double, kChangeSignalDim> g{};
};

struct TemporalConfig {
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ff_width = 0;  // 0 = model dim
};

namespace detail {

struct EncoderLayer {
  nn::LayerNorm attn_norm, ff_norm;
  nn::Dense query, key, value, out, ff_in, ff_out;
};

}  // namespace detail

// Pre-norm transformer encoder over (projected representation + learned
// time-bucket embedding) elements, mean-pooled per sequence and projected to
// the change signal. Sequences are batched as consecutive row blocks.
class TemporalLearner {
 public:
  TemporalLearner() = default;
  TemporalLearner(Track track, std::mt19937_64& rng, const TemporalConfig& config = {}, bool zero_init_output = false)
      : track_(track), heads_(config.heads) {
    const std::size_t d = representation_dim(track);
    const std::size_t ff = config.ff_width ? config.ff_width : d;
    if (config.layers == 0) throw std::invalid_argument("TemporalLearner: need at least one encoder layer");
    if (heads_ == 0 || d % heads_) throw std::invalid_argument("TemporalLearner: heads must divide model dim");
    input_ = nn::Dense(d, d, rng);
    buckets_ = nn::fan_in_uniform({static_cast<std::size_t>(max_bucket(track)) + 1, d}, d, rng);
    for (std::size_t l = 0; l < config.layers; ++l) {
      detail::EncoderLayer layer{nn::LayerNorm(d), nn::LayerNorm(d), nn::Dense(d, d, rng), nn::Dense(d, d, rng),
                                 nn::Dense(d, d, rng), nn::Dense(d, d, rng), nn::Dense(d, ff, rng),
                                 nn::Dense(ff, d, rng)};
      layers_.push_back(std::move(layer));
    }
    final_norm_ = nn::LayerNorm(d);
    output_ = nn::Dense(d, kChangeSignalDim, rng, zero_init_output);
  }

  Track track() const { return track_; }
  std::size_t model_dim() const { return representation_dim(track_); }

  // Mean-pooled encoder output, one row per sequence.
  nn::Tensor pooled(const nn::Tensor& representations, const std::vector<std::size_t>& buckets,
                    const std::vector<std::size_t>& segments) const {
    if (representations.cols() != model_dim())
      throw nn::ShapeError("temporal learner input", representations.shape(),
                           nn::Shape{representations.rows(), model_dim()});
    if (buckets.size() != representations.rows())
      throw nn::ShapeError("temporal learner: " + std::to_string(buckets.size()) + " buckets for " +
                           std::to_string(representations.rows()) + " elements");
    for (auto b : buckets)
      if (b > static_cast<std::size_t>(max_bucket(track_)))
        throw std::out_of_range(std::string("temporal learner: bucket ") + std::to_string(b) + " outside " +
                                track_name(track_) + " range 0.." + std::to_string(max_bucket(track_)));
    nn::detail::check_segments("temporal learner", segments, representations.rows());

    auto h = nn::add(input_(representations), nn::embedding(buckets_, buckets));
    for (const auto& layer : layers_) {
      const auto a = layer.attn_norm(h);
      h = nn::add(h, layer.out(nn::multi_head_attention(layer.query(a), layer.key(a), layer.value(a), heads_, segments)));
      h = nn::add(h, layer.ff_out(nn::relu(layer.ff_in(layer.ff_norm(h)))));
    }
    return nn::segment_mean(final_norm_(h), segments);
  }

  // Change signals, one row (dim 5) per sequence.
  nn::Tensor operator()(const nn::Tensor& representations, const std::vector<std::size_t>& buckets,
                        const std::vector<std::size_t>& segments) const {
    return output_(pooled(representations, buckets, segments));
  }

  ChangeSignal signal(const TemporalSequence& seq) const {
    if (seq.priors.empty()) throw std::invalid_argument("temporal learner: no priors; refinement must be bypassed");
    std::vector<double> rows;
    std::vector<std::size_t> buckets;
    auto push = [&](const Representation& r, int bucket) {
      if (r.track != track_) throw std::invalid_argument("temporal learner: mixed tracks in sequence");
      if (r.vector.size() != model_dim())
        throw nn::ShapeError("temporal learner: representation dim " + std::to_string(r.vector.size()) +
                             ", expected " + std::to_string(model_dim()));
      if (bucket < 0) throw std::out_of_range("temporal learner: negative bucket");
      rows.insert(rows.end(), r.vector.begin(), r.vector.end());
      buckets.push_back(static_cast<std::size_t>(bucket));
    };
    push(seq.index, 0);
    for (const auto& p : seq.priors) push(p.representation, p.bucket);
    nn::NoGradGuard guard;
    const auto g = (*this)(nn::Tensor::constant({buckets.size(), model_dim()}, std::move(rows)), buckets,
                           {buckets.size()});
    ChangeSignal out;
    std::copy(g.values().begin(), g.values().end(), out.g.begin());
    return out;
  }

  nn::Dense& output() { return output_; }

  nn::ParameterList parameters(const std::string& prefix) const {
    nn::ParameterList out = input_.parameters(prefix + ".input");
    out.push_back({prefix + ".buckets", buckets_});
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto p = prefix + ".layer" + std::to_string(l);
      const auto& layer = layers_[l];
      nn::append(out, layer.attn_norm.parameters(p + ".attn_norm"));
      nn::append(out, layer.query.parameters(p + ".query"));
      nn::append(out, layer.key.parameters(p + ".key"));
      nn::append(out, layer.value.parameters(p + ".value"));
      nn::append(out, layer.out.parameters(p + ".out"));
      nn::append(out, layer.ff_norm.parameters(p + ".ff_norm"));
      nn::append(out, layer.ff_in.parameters(p + ".ff_in"));
      nn::append(out, layer.ff_out.parameters(p + ".ff_out"));
    }
    nn::append(out, final_norm_.parameters(prefix + ".final_norm"));
    nn::append(out, output_.parameters(prefix + ".output"));
    return out;
  }

 private:
  Track track_ = Track::imaging;
  std::size_t heads_ = 4;
  nn::Dense input_;
  nn::Tensor buckets_;
  std::vector<detail::EncoderLayer> layers_;
  nn::LayerNorm final_norm_;
  nn::Dense output_;
};

inline ChangeSignal temporal_learner(const TemporalLearner& tl, const TemporalSequence& seq) { return tl.signal(seq); }

// Mirrors the risk head on the change signal; emits adjustments to
// (B0, h_1..h_5). The last layer starts at exactly zero.
class RefinementHead {
 public:
  RefinementHead() = default;
  explicit RefinementHead(std::mt19937_64& rng, bool zero_init_last = true)
      : mlp_({kChangeSignalDim, kRefinementHidden, kHeadOutputs}, rng, zero_init_last) {}

  nn::Tensor operator()(const nn::Tensor& g) const {
    if (g.cols() != kChangeSignalDim)
      throw nn::ShapeError("refinement head input", g.shape(), nn::Shape{g.rows(), kChangeSignalDim});
    return mlp_(g);
  }

  HeadOutputs adjustments(const ChangeSignal& g) const {
    nn::NoGradGuard guard;
    const auto a = (*this)(nn::Tensor::row(std::vector<double>(g.g.begin(), g.g.end())));
    HeadOutputs out{};
    std::copy(a.values().begin(), a.values().end(), out.begin());
    return out;
  }

  nn::Mlp& mlp() { return mlp_; }
  nn::ParameterList parameters(const std::string& prefix) const { return mlp_.parameters(prefix); }

 private:
  nn::Mlp mlp_;
};

struct RefinedCurve {
  HeadOutputs adjustments{};  // (B~0, h~_1..h~_5), summed over tracks
  std::array<double, kHeadOutputs> logits{};
  std::array<double, kHeadOutputs> probabilities{};

  double probability(std::size_t k) const {
    if (k > kHazardSteps) throw std::out_of_range("RefinedCurve: horizon " + std::to_string(k) + " outside 0..5");
    return probabilities[k];
  }
};

namespace detail {

inline RefinedCurve refined_from(const HeadOutputs& base, const HeadOutputs& adjustments) {
  HeadOutputs pre = base;
  for (std::size_t i = 0; i < kHeadOutputs; ++i) pre[i] += adjustments[i];
  RefinedCurve out;
  out.adjustments = adjustments;
  out.logits = RiskCurve::from_preactivations(pre).logits();
  for (std::size_t k = 0; k < kHeadOutputs; ++k) out.probabilities[k] = nn::detail::stable_sigmoid(out.logits[k]);
  return out;
}

inline RefinedCurve unrefined(const HeadOutputs& base) {
  RefinedCurve out;
  out.logits = RiskCurve::from_preactivations(base).logits();
  for (std::size_t k = 0; k < kHeadOutputs; ++k) out.probabilities[k] = nn::detail::stable_sigmoid(out.logits[k]);
  return out;
}

}  // namespace detail

// L_k = (B0 + B~0) + sum_{i<=k} softplus(h_i + h~_i). Without g the base curve
// is returned untouched.
inline RefinedCurve refine(const HeadOutputs& base, const std::optional<ChangeSignal>& g, const RefinementHead& rr) {
  if (!g) return detail::unrefined(base);
  return detail::refined_from(base, rr.adjustments(*g));
}

// Imaging adjustments first, then clinical; an absent signal adds nothing.
inline RefinedCurve successive_refine(const HeadOutputs& base, const std::optional<ChangeSignal>& g_imaging,
                                      const RefinementHead& rr_imaging, const std::optional<ChangeSignal>& g_clinical,
                                      const RefinementHead& rr_clinical) {
  if (!g_imaging && !g_clinical) return detail::unrefined(base);
  HeadOutputs pre = base, total{};
  for (const auto& [g, rr] : {std::pair{&g_imaging, &rr_imaging}, std::pair{&g_clinical, &rr_clinical}}) {
    if (!*g) continue;
    const auto adj = rr->adjustments(**g);
    for (std::size_t i = 0; i < kHeadOutputs; ++i) {
      pre[i] += adj[i];
      total[i] += adj[i];
    }
  }
  auto out = detail::unrefined(pre);
  out.adjustments = total;
  return out;
}

// Batched training path: refined logits from base pre-activations (n x 6)
// and adjustments (n x 6).
inline nn::Tensor refined_logits(const nn::Tensor& base_pre, const nn::Tensor& adjustments) {
  return additive_hazard_logits(nn::add(base_pre, adjustments));
}

}  // namespace riskref

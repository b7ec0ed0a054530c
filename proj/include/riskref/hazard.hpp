#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "riskref/error.hpp"
#include "riskref/nn/layers.hpp"

namespace riskref {

inline constexpr std::size_t kHazardSteps = 5;               // yearly increments
inline constexpr std::size_t kHeadOutputs = kHazardSteps + 1;  // B0 followed by h_1..h_5
inline constexpr std::size_t kRiskHeadHidden = 64;

// Raw head outputs (B0, h_1..h_5); hazards are softplus(h_i).
using HeadOutputs = std::array<double, kHeadOutputs>;

// Baseline logit plus non-negative yearly hazard increments.
struct RiskCurve {
  double baseline = 0.0;
  std::array<double, kHazardSteps> hazards{};

  // Curve from raw head outputs: hazards are softplus of the pre-activations.
  static RiskCurve from_preactivations(std::span<const double> pre) {
    if (pre.size() != kHeadOutputs) throw std::invalid_argument("RiskCurve: expected 6 head outputs");
    RiskCurve c;
    c.baseline = pre[0];
    for (std::size_t i = 0; i < kHazardSteps; ++i) c.hazards[i] = nn::detail::stable_softplus(pre[i + 1]);
    return c;
  }

  double logit(std::size_t k) const {
    if (k > kHazardSteps) throw std::out_of_range("RiskCurve: horizon " + std::to_string(k) + " outside 0..5");
    double r = baseline;
    for (std::size_t i = 0; i < k; ++i) r += hazards[i];
    return r;
  }

  std::array<double, kHeadOutputs> logits() const {
    std::array<double, kHeadOutputs> out{};
    out[0] = baseline;
    for (std::size_t i = 0; i < kHazardSteps; ++i) out[i + 1] = out[i] + hazards[i];
    return out;
  }
};

// P_k = sigmoid(B0 + sum_{i<=k} H_i); k = 0 is the current risk.
inline double cumulative_probability(const RiskCurve& curve, std::size_t k) {
  return nn::detail::stable_sigmoid(curve.logit(k));
}

// Batched curve logits from head pre-activations (n x 6):
//   L_k = pre_0 + sum_{i=1..k} softplus(pre_i)
inline nn::Tensor additive_hazard_logits(const nn::Tensor& pre) {
  using nn::detail::Node;
  if (pre.cols() != kHeadOutputs)
    throw nn::ShapeError("additive_hazard_logits", pre.shape(), nn::Shape{pre.rows(), kHeadOutputs});
  const std::size_t n = pre.rows();
  std::vector<double> out(pre.size());
  auto pv = pre.values();
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = pv.data() + r * kHeadOutputs;
    double acc = row[0];
    out[r * kHeadOutputs] = acc;
    for (std::size_t i = 1; i < kHeadOutputs; ++i) out[r * kHeadOutputs + i] = (acc += nn::detail::stable_softplus(row[i]));
  }
  return nn::make_result(pre.shape(), std::move(out), {pre}, [n](Node& self) {
    auto& in = *self.parents[0];
    auto& g = in.grad_buffer();
    for (std::size_t r = 0; r < n; ++r) {
      const double* dl = self.grad.data() + r * kHeadOutputs;
      double tail = 0;
      for (std::size_t i = kHeadOutputs; i-- > 1;) {
        tail += dl[i];
        g[r * kHeadOutputs + i] += tail * nn::detail::stable_sigmoid(in.value[r * kHeadOutputs + i]);
      }
      g[r * kHeadOutputs] += tail + dl[0];
    }
  });
}

// Dense stack from a representation to (B0, h_1..h_5).
class RiskHead {
 public:
  RiskHead() = default;
  RiskHead(std::size_t in_dim, std::mt19937_64& rng, bool zero_init_last = false)
      : mlp_({in_dim, kRiskHeadHidden, kHeadOutputs}, rng, zero_init_last) {}

  // Pre-activations, n x 6.
  nn::Tensor preactivations(const nn::Tensor& z) const {
    for (double v : z.values())
      if (std::isnan(v)) throw NumericalError("risk head: NaN in representation");
    return mlp_(z);
  }

  nn::Tensor logits(const nn::Tensor& z) const { return additive_hazard_logits(preactivations(z)); }

  HeadOutputs outputs(std::span<const double> z) const {
    nn::NoGradGuard guard;
    const auto pre = preactivations(nn::Tensor::row(std::vector<double>(z.begin(), z.end())));
    HeadOutputs out{};
    std::copy(pre.values().begin(), pre.values().end(), out.begin());
    return out;
  }

  RiskCurve curve(std::span<const double> z) const { return RiskCurve::from_preactivations(outputs(z)); }

  std::size_t in_dim() const { return mlp_.in_dim(); }
  nn::Mlp& mlp() { return mlp_; }
  nn::ParameterList parameters(const std::string& prefix) const { return mlp_.parameters(prefix); }

 private:
  nn::Mlp mlp_;
};

}  // namespace riskref

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "riskref/error.hpp"
#include "riskref/nn/layers.hpp"

namespace riskref::nn {

namespace detail {

inline void check_finite_grads(const ParameterList& params) {
  for (const auto& p : params)
    for (double g : p.tensor.grad())
      if (!std::isfinite(g)) throw NumericalError("non-finite gradient in parameter " + p.name);
}

}  // namespace detail

// theta <- theta - lr * g. Parameters never reached by backward are left alone.
inline void sgd_step(ParameterList& params, double lr) {
  if (!(lr > 0)) throw std::invalid_argument("sgd_step: learning rate must be positive");
  detail::check_finite_grads(params);
  for (auto& p : params) {
    auto g = p.tensor.grad();
    if (g.empty()) continue;
    auto v = p.tensor.mutable_values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
  }
}

struct AdamWConfig {
  double lr = 1e-5;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Moment accumulators keyed by parameter name.
struct OptimizerState {
  AdamWConfig config;
  std::int64_t step = 0;
  std::map<std::string, std::vector<double>> first_moment;
  std::map<std::string, std::vector<double>> second_moment;
};

// Decoupled weight decay: theta <- theta - lr*wd*theta - lr*mhat/(sqrt(vhat)+eps).
// Parameters without a gradient are treated as having a zero gradient.
inline void adamw_step(OptimizerState& state, ParameterList& params) {
  const auto& c = state.config;
  if (!(c.lr > 0)) throw std::invalid_argument("adamw_step: learning rate must be positive");
  detail::check_finite_grads(params);
  for (const auto& p : params) {
    auto& m = state.first_moment[p.name];
    auto& v = state.second_moment[p.name];
    if (m.empty()) m.assign(p.tensor.size(), 0.0);
    if (v.empty()) v.assign(p.tensor.size(), 0.0);
    if (m.size() != p.tensor.size() || v.size() != p.tensor.size())
      throw ShapeError("adamw_step: optimizer state does not match parameter " + p.name);
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (auto& p : params) {
    auto& m = state.first_moment[p.name];
    auto& v = state.second_moment[p.name];
    auto g = p.tensor.grad();
    auto theta = p.tensor.mutable_values();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double gi = g.empty() ? 0.0 : g[i];
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
      const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + c.eps);
      theta[i] -= c.lr * c.weight_decay * theta[i] + c.lr * update;
    }
  }
}

// Halves the learning rate each time `patience` consecutive epochs fail to
// improve on the best validation loss seen so far.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, std::size_t patience = 5, double factor = 0.5)
      : lr_(lr), patience_(patience), factor_(factor) {}

  double step(double val_loss) {
    if (val_loss < best_) {
      best_ = val_loss;
      wait_ = 0;
    } else if (++wait_ >= patience_) {
      lr_ *= factor_;
      wait_ = 0;
    }
    return lr_;
  }

  double lr() const { return lr_; }

 private:
  double lr_;
  std::size_t patience_;
  double factor_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t wait_ = 0;
};

inline double plateau_schedule(std::span<const double> history, double initial_lr, std::size_t patience = 5,
                               double factor = 0.5) {
  if (history.empty()) throw std::invalid_argument("plateau_schedule: empty loss history");
  PlateauScheduler sched(initial_lr, patience, factor);
  for (double loss : history) sched.step(loss);
  return sched.lr();
}

// True once the best loss is at least `patience` epochs old.
inline bool early_stop(std::span<const double> history, std::size_t patience) {
  if (history.empty()) throw std::invalid_argument("early_stop: empty loss history");
  std::size_t best = 0;
  for (std::size_t i = 1; i < history.size(); ++i)
    if (history[i] < history[best]) best = i;
  return history.size() - 1 - best >= patience;
}

// Value copy of every parameter, for best-checkpoint selection.
class Snapshot {
 public:
  Snapshot() = default;
  explicit Snapshot(const ParameterList& params) {
    for (const auto& p : params) values_.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  }
  void restore(ParameterList& params) const {
    if (params.size() != values_.size()) throw ShapeError("Snapshot: parameter count changed");
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto v = params[i].tensor.mutable_values();
      std::copy(values_[i].begin(), values_[i].end(), v.begin());
    }
  }
  bool empty() const { return values_.empty(); }
  const std::vector<std::vector<double>>& values() const { return values_; }

 private:
  std::vector<std::vector<double>> values_;
};

}  // namespace riskref::nn

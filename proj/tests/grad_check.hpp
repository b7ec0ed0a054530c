#pragma once

// Central finite-difference oracle for reverse-mode gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "riskref/nn/layers.hpp"

namespace riskref::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;
  std::size_t checked = 0;
  std::size_t kinks = 0;       // entries sitting on a ReLU kink, not compared
  std::size_t remeasured = 0;  // entries compared with a narrower stencil
};

// Relative error |a - n| / max(|a|, |n|, floor).
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Compares backward() against central differences for up to `max_per_param`
// randomly chosen entries of every parameter.
inline GradCheckResult check_gradients(nn::ParameterList params, const std::function<nn::Tensor()>& loss_fn,
                                       std::uint64_t seed = 0, double eps = 1e-4,
                                       std::size_t max_per_param = 24) {
  nn::zero_grads(params);
  nn::backward(loss_fn());
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) {
    auto g = p.tensor.grad();
    analytic.emplace_back(g.begin(), g.end());
    if (analytic.back().empty()) analytic.back().assign(p.tensor.size(), 0.0);
  }

  std::mt19937_64 rng(seed);
  GradCheckResult result;
  nn::NoGradGuard no_grad;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto values = params[pi].tensor.mutable_values();
    std::vector<std::size_t> idx(values.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (idx.size() > max_per_param) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(max_per_param);
    }
    for (auto i : idx) {
      const double orig = values[i];
      auto probe = [&](double h) {
        values[i] = orig + h;
        const double up = loss_fn().item();
        values[i] = orig - h;
        const double down = loss_fn().item();
        values[i] = orig;
        return std::pair{up, down};
      };
      auto central = [&](double h) {
        auto [up, down] = probe(h);
        return (up - down) / (2 * h);
      };
      // A mismatch at eps is blamed on a ReLU kink only when the stencil is
      // visibly non-smooth there: away from a kink the central estimates at
      // eps and eps/10 agree to O(eps^2). Such entries are re-measured much
      // closer in, or skipped if that still disagrees.
      double numeric = central(eps);
      if (relative_error(analytic[pi][i], numeric) > 1e-5 && relative_error(numeric, central(eps / 10)) > 1e-5) {
        const double narrow = central(eps * 1e-2);
        if (relative_error(narrow, central(eps * 1e-3)) > 1e-3) {
          ++result.kinks;
          continue;
        }
        numeric = narrow;
        ++result.remeasured;
      }
      const double err = relative_error(analytic[pi][i], numeric);
      ++result.checked;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst = params[pi].name + "[" + std::to_string(i) + "] analytic=" + std::to_string(analytic[pi][i]) +
                       " numeric=" + std::to_string(numeric);
      }
    }
  }
  return result;
}

inline nn::Tensor random_tensor(nn::Shape shape, std::mt19937_64& rng, double scale = 1.0, bool tracked = true) {
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<double> v(shape.size());
  for (auto& x : v) x = dist(rng);
  return tracked ? nn::Tensor::variable(shape, std::move(v)) : nn::Tensor::constant(shape, std::move(v));
}

}  // namespace riskref::testing

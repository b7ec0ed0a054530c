#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "riskref/nn/ops.hpp"

namespace riskref::nn {

struct Parameter {
  std::string name;
  Tensor tensor;
};

using ParameterList = std::vector<Parameter>;

inline void append(ParameterList& out, const ParameterList& more) { out.insert(out.end(), more.begin(), more.end()); }

inline void zero_grads(ParameterList& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

// Fan-in scaled uniform U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline Tensor fan_in_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(shape.size());
  for (auto& x : v) x = dist(rng);
  return Tensor::variable(shape, std::move(v));
}

inline Tensor filled(Shape shape, double value) {
  return Tensor::variable(shape, std::vector<double>(shape.size(), value));
}

class Dense {
 public:
  Dense() = default;
  // zero_init leaves both weight and bias at exactly zero.
  Dense(std::size_t in, std::size_t out, std::mt19937_64& rng, bool zero_init = false)
      : weight_(zero_init ? filled({in, out}, 0.0) : fan_in_uniform({in, out}, in, rng)),
        bias_(filled({1, out}, 0.0)) {}

  Tensor operator()(const Tensor& x) const { return dense(x, weight_, bias_); }

  std::size_t in_dim() const { return weight_.rows(); }
  std::size_t out_dim() const { return weight_.cols(); }
  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }

  ParameterList parameters(const std::string& prefix) const {
    return {{prefix + ".weight", weight_}, {prefix + ".bias", bias_}};
  }

 private:
  Tensor weight_;
  Tensor bias_;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim) : gamma_(filled({1, dim}, 1.0)), beta_(filled({1, dim}, 0.0)) {}

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma_, beta_); }

  ParameterList parameters(const std::string& prefix) const {
    return {{prefix + ".gamma", gamma_}, {prefix + ".beta", beta_}};
  }

 private:
  Tensor gamma_;
  Tensor beta_;
};

// dense -> relu -> ... -> dense, no activation after the last layer.
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::vector<std::size_t> widths, std::mt19937_64& rng, bool zero_init_last = false) {
    if (widths.size() < 2) throw ShapeError("Mlp: need at least input and output widths");
    for (std::size_t i = 0; i + 1 < widths.size(); ++i)
      layers_.emplace_back(widths[i], widths[i + 1], rng, zero_init_last && i + 2 == widths.size());
  }

  Tensor operator()(const Tensor& x) const {
    if (x.cols() != in_dim()) throw ShapeError("Mlp input", x.shape(), Shape{x.rows(), in_dim()});
    Tensor h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      h = layers_[i](h);
      if (i + 1 < layers_.size()) h = relu(h);
    }
    return h;
  }

  std::size_t in_dim() const { return layers_.front().in_dim(); }
  std::size_t out_dim() const { return layers_.back().out_dim(); }
  Dense& last() { return layers_.back(); }

  ParameterList parameters(const std::string& prefix) const {
    ParameterList out;
    for (std::size_t i = 0; i < layers_.size(); ++i) append(out, layers_[i].parameters(prefix + "." + std::to_string(i)));
    return out;
  }

 private:
  std::vector<Dense> layers_;
};

}  // namespace riskref::nn

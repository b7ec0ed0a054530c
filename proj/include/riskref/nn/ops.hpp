#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "riskref/nn/tensor.hpp"

namespace riskref::nn {

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

inline ConstMap view(const std::vector<double>& v, const Shape& s) {
  return ConstMap(v.data(), static_cast<Eigen::Index>(s.rows), static_cast<Eigen::Index>(s.cols));
}
inline MutMap view(std::vector<double>& v, const Shape& s) {
  return MutMap(v.data(), static_cast<Eigen::Index>(s.rows), static_cast<Eigen::Index>(s.cols));
}

inline Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

inline void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError(op, a.shape(), b.shape());
}

inline double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
inline double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Validates segment lengths against a row count.
inline void check_segments(const char* op, std::span<const std::size_t> segments, std::size_t rows) {
  const std::size_t total = std::accumulate(segments.begin(), segments.end(), std::size_t{0});
  if (total != rows)
    throw ShapeError(std::string(op) + ": segments cover " + std::to_string(total) + " rows, tensor has " +
                     std::to_string(rows));
  for (auto s : segments)
    if (s == 0) throw ShapeError(std::string(op) + ": empty segment");
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same("add", a, b);
  std::vector<double> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      auto& in = detail::parent(self, p);
      if (!in.requires_grad) continue;
      auto& g = in.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same("sub", a, b);
  std::vector<double> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      auto& in = detail::parent(self, p);
      if (!in.requires_grad) continue;
      const double sign = p == 0 ? 1.0 : -1.0;
      auto& g = in.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same("mul", a, b);
  std::vector<double> out(a.size());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& x = detail::parent(self, 0);
    auto& y = detail::parent(self, 1);
    if (x.requires_grad) {
      auto& g = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y.value[i];
    }
    if (y.requires_grad) {
      auto& g = y.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * x.value[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= factor;
  return make_result(a.shape(), std::move(out), {a}, [factor](detail::Node& self) {
    auto& g = detail::parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}

// a + row, with row (1 x cols) broadcast over every row of a.
inline Tensor add_row(const Tensor& a, const Tensor& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row", a.shape(), row.shape());
  std::vector<double> out(a.values().begin(), a.values().end());
  auto rv = row.values();
  const std::size_t cols = a.cols();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += rv[i % cols];
  return make_result(a.shape(), std::move(out), {a, row}, [cols](detail::Node& self) {
    auto& x = detail::parent(self, 0);
    auto& r = detail::parent(self, 1);
    if (x.requires_grad) {
      auto& g = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (r.requires_grad) {
      auto& g = r.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % cols] += self.grad[i];
    }
  });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul", a.shape(), b.shape());
  const Shape out_shape{a.rows(), b.cols()};
  std::vector<double> out(out_shape.size());
  detail::view(out, out_shape).noalias() =
      detail::view(a.node()->value, a.shape()) * detail::view(b.node()->value, b.shape());
  return make_result(out_shape, std::move(out), {a, b}, [](detail::Node& self) {
    auto& x = detail::parent(self, 0);
    auto& y = detail::parent(self, 1);
    auto dout = detail::view(self.grad, self.shape);
    if (x.requires_grad)
      detail::view(x.grad_buffer(), x.shape).noalias() += dout * detail::view(y.value, y.shape).transpose();
    if (y.requires_grad)
      detail::view(y.grad_buffer(), y.shape).noalias() += detail::view(x.value, x.shape).transpose() * dout;
  });
}

inline Tensor transpose(const Tensor& a) {
  const Shape out_shape{a.cols(), a.rows()};
  std::vector<double> out(a.size());
  detail::view(out, out_shape) = detail::view(a.node()->value, a.shape()).transpose();
  return make_result(out_shape, std::move(out), {a}, [](detail::Node& self) {
    auto& x = detail::parent(self, 0);
    detail::view(x.grad_buffer(), x.shape) += detail::view(self.grad, self.shape).transpose();
  });
}

// x W + b with W (in x out) and b (1 x out).
inline Tensor dense(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.cols() != weight.rows()) throw ShapeError("dense", x.shape(), weight.shape());
  return add_row(matmul(x, weight), bias);
}

namespace detail {

template <class F, class DF>
Tensor unary(const Tensor& a, F f, DF df_from_x_y) {
  std::vector<double> out(a.size());
  auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  return make_result(a.shape(), std::move(out), {a}, [df_from_x_y](Node& self) {
    auto& x = parent(self, 0);
    auto& g = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df_from_x_y(x.value[i], self.value[i]);
  });
}

}  // namespace detail

inline Tensor relu(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(a, detail::stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

inline Tensor softplus(const Tensor& a) {
  return detail::unary(a, detail::stable_softplus, [](double x, double) { return detail::stable_sigmoid(x); });
}

inline Tensor sum(const Tensor& a) {
  const auto v = a.values();
  const double total = std::accumulate(v.begin(), v.end(), 0.0);
  return make_result({1, 1}, {total}, {a}, [](detail::Node& self) {
    auto& g = detail::parent(self, 0).grad_buffer();
    for (auto& gi : g) gi += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

// Row-wise layer normalization with affine (1 x cols) gamma/beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  const std::size_t n = x.rows(), d = x.cols();
  if (gamma.shape() != Shape{1, d}) throw ShapeError("layer_norm(gamma)", x.shape(), gamma.shape());
  if (beta.shape() != Shape{1, d}) throw ShapeError("layer_norm(beta)", x.shape(), beta.shape());
  std::vector<double> xhat(x.size()), inv_std(n), out(x.size());
  auto xv = x.values();
  auto gv = gamma.values(), bv = beta.values();
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0;
    for (std::size_t c = 0; c < d; ++c) mu += row[c];
    mu /= static_cast<double>(d);
    double var = 0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      xhat[r * d + c] = (row[c] - mu) * inv_std[r];
      out[r * d + c] = xhat[r * d + c] * gv[c] + bv[c];
    }
  }
  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
                       auto& xin = detail::parent(self, 0);
                       auto& gam = detail::parent(self, 1);
                       auto& bet = detail::parent(self, 2);
                       if (gam.requires_grad) {
                         auto& g = gam.grad_buffer();
                         for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % d] += self.grad[i] * xhat[i];
                       }
                       if (bet.requires_grad) {
                         auto& g = bet.grad_buffer();
                         for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % d] += self.grad[i];
                       }
                       if (!xin.requires_grad) return;
                       auto& gx = xin.grad_buffer();
                       const double inv_d = 1.0 / static_cast<double>(d);
                       for (std::size_t r = 0; r < n; ++r) {
                         double sum_dy = 0, sum_dy_xhat = 0;
                         for (std::size_t c = 0; c < d; ++c) {
                           const double dy = self.grad[r * d + c] * gam.value[c];
                           sum_dy += dy;
                           sum_dy_xhat += dy * xhat[r * d + c];
                         }
                         for (std::size_t c = 0; c < d; ++c) {
                           const double dy = self.grad[r * d + c] * gam.value[c];
                           gx[r * d + c] +=
                               inv_std[r] * (dy - inv_d * sum_dy - xhat[r * d + c] * inv_d * sum_dy_xhat);
                         }
                       }
                     });
}

// Selects rows of x (rows may repeat). Doubles as an embedding lookup.
inline Tensor gather_rows(const Tensor& x, std::vector<std::size_t> indices) {
  const std::size_t d = x.cols();
  std::vector<double> out(indices.size() * d);
  auto xv = x.values();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= x.rows())
      throw ShapeError("gather_rows: index " + std::to_string(indices[i]) + " out of range for " + x.shape().str());
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(indices[i] * d), d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  const Shape out_shape{indices.size(), d};
  return make_result(out_shape, std::move(out), {x}, [d, indices = std::move(indices)](detail::Node& self) {
    auto& g = detail::parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < indices.size(); ++i)
      for (std::size_t c = 0; c < d; ++c) g[indices[i] * d + c] += self.grad[i * d + c];
  });
}

inline Tensor embedding(const Tensor& table, std::vector<std::size_t> indices) {
  return gather_rows(table, std::move(indices));
}

inline Tensor take_cols(const Tensor& x, std::vector<std::size_t> columns) {
  const std::size_t n = x.rows(), d = x.cols(), k = columns.size();
  for (auto c : columns)
    if (c >= d) throw ShapeError("take_cols: column " + std::to_string(c) + " out of range for " + x.shape().str());
  std::vector<double> out(n * k);
  auto xv = x.values();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] = xv[r * d + columns[j]];
  return make_result({n, k}, std::move(out), {x}, [n, d, k, columns = std::move(columns)](detail::Node& self) {
    auto& g = detail::parent(self, 0).grad_buffer();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < k; ++j) g[r * d + columns[j]] += self.grad[r * k + j];
  });
}

// Mean of consecutive row blocks; one output row per segment.
inline Tensor segment_mean(const Tensor& x, std::vector<std::size_t> segments) {
  detail::check_segments("segment_mean", segments, x.rows());
  const std::size_t d = x.cols();
  std::vector<double> out(segments.size() * d, 0.0);
  auto xv = x.values();
  std::size_t row = 0;
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const double inv = 1.0 / static_cast<double>(segments[s]);
    for (std::size_t i = 0; i < segments[s]; ++i, ++row)
      for (std::size_t c = 0; c < d; ++c) out[s * d + c] += xv[row * d + c];
    for (std::size_t c = 0; c < d; ++c) out[s * d + c] *= inv;
  }
  const Shape out_shape{segments.size(), d};
  return make_result(out_shape, std::move(out), {x}, [d, segments = std::move(segments)](detail::Node& self) {
    auto& g = detail::parent(self, 0).grad_buffer();
    std::size_t row = 0;
    for (std::size_t s = 0; s < segments.size(); ++s) {
      const double inv = 1.0 / static_cast<double>(segments[s]);
      for (std::size_t i = 0; i < segments[s]; ++i, ++row)
        for (std::size_t c = 0; c < d; ++c) g[row * d + c] += inv * self.grad[s * d + c];
    }
  });
}

// Scaled dot-product attention with n_heads heads over already-projected
// queries/keys/values. Rows attend only within their segment; no causal mask.
inline Tensor multi_head_attention(const Tensor& queries, const Tensor& keys, const Tensor& values, std::size_t n_heads,
                                   std::vector<std::size_t> segments = {}) {
  detail::require_same("multi_head_attention(q,k)", queries, keys);
  detail::require_same("multi_head_attention(q,v)", queries, values);
  const std::size_t n = queries.rows(), d = queries.cols();
  if (n_heads == 0 || d % n_heads != 0)
    throw ShapeError("multi_head_attention: " + std::to_string(n_heads) + " heads do not divide model dim " +
                     std::to_string(d));
  if (segments.empty()) segments.push_back(n);
  detail::check_segments("multi_head_attention", segments, n);
  const std::size_t dh = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  auto qv = queries.values(), kv = keys.values(), vv = values.values();
  std::vector<double> out(n * d, 0.0);
  // Attention weights per (segment, head), stored back to back.
  std::vector<double> weights;
  weights.reserve(std::accumulate(segments.begin(), segments.end(), std::size_t{0},
                                  [](std::size_t acc, std::size_t s) { return acc + s * s; }) *
                  n_heads);
  std::size_t start = 0;
  for (const std::size_t len : segments) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t off = h * dh;
      const std::size_t base = weights.size();
      weights.resize(base + len * len);
      for (std::size_t i = 0; i < len; ++i) {
        double* w = weights.data() + base + i * len;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < len; ++j) {
          double s = 0;
          for (std::size_t c = 0; c < dh; ++c) s += qv[(start + i) * d + off + c] * kv[(start + j) * d + off + c];
          w[j] = s * inv_sqrt;
          mx = std::max(mx, w[j]);
        }
        double z = 0;
        for (std::size_t j = 0; j < len; ++j) z += (w[j] = std::exp(w[j] - mx));
        for (std::size_t j = 0; j < len; ++j) w[j] /= z;
        for (std::size_t j = 0; j < len; ++j)
          for (std::size_t c = 0; c < dh; ++c) out[(start + i) * d + off + c] += w[j] * vv[(start + j) * d + off + c];
      }
    }
    start += len;
  }

  return make_result(
      {n, d}, std::move(out), {queries, keys, values},
      [d, dh, n_heads, inv_sqrt, segments = std::move(segments), weights = std::move(weights)](detail::Node& self) {
        auto& qn = detail::parent(self, 0);
        auto& kn = detail::parent(self, 1);
        auto& vn = detail::parent(self, 2);
        std::vector<double> dq(qn.value.size(), 0.0), dk(kn.value.size(), 0.0), dv(vn.value.size(), 0.0);
        std::vector<double> dw;
        std::size_t start = 0, wbase = 0;
        for (const std::size_t len : segments) {
          dw.assign(len, 0.0);
          for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t off = h * dh;
            for (std::size_t i = 0; i < len; ++i) {
              const double* w = weights.data() + wbase + i * len;
              const double* dout = self.grad.data() + (start + i) * d + off;
              double dot = 0;
              for (std::size_t j = 0; j < len; ++j) {
                double s = 0;
                const double* vrow = vn.value.data() + (start + j) * d + off;
                double* dvrow = dv.data() + (start + j) * d + off;
                for (std::size_t c = 0; c < dh; ++c) {
                  s += dout[c] * vrow[c];
                  dvrow[c] += w[j] * dout[c];
                }
                dw[j] = s;
                dot += s * w[j];
              }
              for (std::size_t j = 0; j < len; ++j) {
                const double ds = w[j] * (dw[j] - dot) * inv_sqrt;
                const double* qrow = qn.value.data() + (start + i) * d + off;
                const double* krow = kn.value.data() + (start + j) * d + off;
                double* dqrow = dq.data() + (start + i) * d + off;
                double* dkrow = dk.data() + (start + j) * d + off;
                for (std::size_t c = 0; c < dh; ++c) {
                  dqrow[c] += ds * krow[c];
                  dkrow[c] += ds * qrow[c];
                }
              }
            }
            wbase += len * len;
          }
          start += len;
        }
        auto accumulate = [](detail::Node& node, const std::vector<double>& g) {
          if (!node.requires_grad) return;
          auto& buf = node.grad_buffer();
          for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
        };
        accumulate(qn, dq);
        accumulate(kn, dk);
        accumulate(vn, dv);
      });
}

// Divides each row by its Euclidean norm (floored at eps).
inline Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-12) {
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<double> out(x.size()), norms(n);
  auto xv = x.values();
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < d; ++c) s += xv[r * d + c] * xv[r * d + c];
    norms[r] = std::max(std::sqrt(s), eps);
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = xv[r * d + c] / norms[r];
  }
  return make_result(x.shape(), std::move(out), {x}, [n, d, norms = std::move(norms)](detail::Node& self) {
    auto& g = detail::parent(self, 0).grad_buffer();
    for (std::size_t r = 0; r < n; ++r) {
      double dot = 0;
      for (std::size_t c = 0; c < d; ++c) dot += self.grad[r * d + c] * self.value[r * d + c];
      for (std::size_t c = 0; c < d; ++c)
        g[r * d + c] += (self.grad[r * d + c] - self.value[r * d + c] * dot) / norms[r];
    }
  });
}

}  // namespace riskref::nn

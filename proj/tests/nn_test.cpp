#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <random>

#include "grad_check.hpp"
#include "riskref/nn/checkpoint.hpp"
#include "riskref/nn/layers.hpp"
#include "riskref/nn/ops.hpp"
#include "riskref/nn/optim.hpp"

using namespace riskref;
using namespace riskref::nn;
using riskref::testing::check_gradients;
using riskref::testing::random_tensor;

namespace {

constexpr double kGradTol = 1e-4;
constexpr int kSeeds = 20;

// Weighted sum so every output entry carries a distinct upstream gradient.
Tensor probe(const Tensor& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0xabcdefULL);
  return sum(mul(y, random_tensor(y.shape(), rng, 1.0, false)));
}

}  // namespace

TEST(Ops, ScalarActivations) {
  EXPECT_DOUBLE_EQ(sigmoid(Tensor::scalar(0.0)).item(), 0.5);
  EXPECT_NEAR(softplus(Tensor::scalar(0.0)).item(), std::log(2.0), 1e-15);
  EXPECT_DOUBLE_EQ(relu(Tensor::scalar(-3.0)).item(), 0.0);
  EXPECT_DOUBLE_EQ(relu(Tensor::scalar(2.5)).item(), 2.5);
  // Stable at extremes.
  EXPECT_EQ(softplus(Tensor::scalar(-1000.0)).item(), 0.0);
  EXPECT_DOUBLE_EQ(softplus(Tensor::scalar(1000.0)).item(), 1000.0);
  EXPECT_DOUBLE_EQ(sigmoid(Tensor::scalar(-800.0)).item(), 0.0);
}

TEST(Ops, DenseIdentity) {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor({4, 3}, rng, 1.0, false);
  std::vector<double> eye(9, 0.0);
  for (int i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
  Tensor y = dense(x, Tensor::constant({3, 3}, eye), Tensor::zeros({1, 3}));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y.values()[i], x.values()[i]);
}

TEST(Ops, ShapeMismatchReportsBothShapes) {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 5});
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[4x5]"), std::string::npos);
  }
  EXPECT_THROW(add(a, Tensor::zeros({3, 2})), ShapeError);
  EXPECT_THROW(multi_head_attention(a, a, a, 2), ShapeError);
}

TEST(Backward, SigmoidSquaredAtZero) {
  Tensor w = Tensor::variable({1, 1}, {0.0});
  Tensor s = sigmoid(w);
  backward(mul(s, s));
  EXPECT_NEAR(w.grad()[0], 0.25, 1e-15);
}

TEST(Backward, ConstantLossGivesZeroGradients) {
  Tensor w = Tensor::variable({2, 2}, {1, 2, 3, 4});
  Tensor loss = add(sum(scale(w, 0.0)), Tensor::scalar(3.0));
  backward(loss);
  for (double g : w.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, RejectsUntapedAndNonScalar) {
  EXPECT_THROW(backward(Tensor::scalar(1.0)), std::logic_error);
  Tensor w = Tensor::variable({1, 2}, {1, 2});
  EXPECT_THROW(backward(scale(w, 2.0)), ShapeError);
  NoGradGuard guard;
  EXPECT_THROW(backward(sum(w)), std::logic_error);
}

TEST(Backward, SharedSubexpressionAccumulates) {
  Tensor w = Tensor::variable({1, 1}, {3.0});
  Tensor y = mul(w, w);
  backward(add(y, y));  // 2 w^2
  EXPECT_DOUBLE_EQ(w.grad()[0], 12.0);
}

class GradientSuite : public ::testing::TestWithParam<int> {};

TEST_P(GradientSuite, ElementwiseAndLinear) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  std::mt19937_64 rng(seed);
  Tensor x = random_tensor({5, 4}, rng);
  Tensor w = random_tensor({4, 3}, rng);
  Tensor b = random_tensor({1, 3}, rng);
  Tensor z = random_tensor({5, 3}, rng);
  ParameterList params{{"x", x}, {"w", w}, {"b", b}, {"z", z}};
  auto r = check_gradients(params, [&] {
    Tensor h = dense(x, w, b);
    Tensor a = add(sigmoid(h), softplus(sub(h, z)));
    Tensor c = mul(a, relu(add(z, Tensor::constant(z.shape(), std::vector<double>(z.size(), 3.0)))));
    return probe(add(c, transpose(transpose(scale(h, 0.5)))), seed);
  }, seed);
  EXPECT_LT(r.max_rel_error, kGradTol) << r.worst;
}

TEST_P(GradientSuite, LayerNorm) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  std::mt19937_64 rng(seed);
  Tensor x = random_tensor({4, 6}, rng, 2.0);
  Tensor g = random_tensor({1, 6}, rng);
  Tensor b = random_tensor({1, 6}, rng);
  auto r = check_gradients({{"x", x}, {"gamma", g}, {"beta", b}},
                           [&] { return probe(layer_norm(x, g, b), seed); }, seed);
  EXPECT_LT(r.max_rel_error, kGradTol) << r.worst;
}

TEST_P(GradientSuite, SegmentedAttention) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  std::mt19937_64 rng(seed);
  Tensor q = random_tensor({6, 8}, rng);
  Tensor k = random_tensor({6, 8}, rng);
  Tensor v = random_tensor({6, 8}, rng);
  auto r = check_gradients({{"q", q}, {"k", k}, {"v", v}},
                           [&] { return probe(multi_head_attention(q, k, v, 4, {1, 3, 2}), seed); }, seed);
  EXPECT_LT(r.max_rel_error, kGradTol) << r.worst;
}

TEST_P(GradientSuite, GatherPoolNormalize) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  std::mt19937_64 rng(seed);
  Tensor table = random_tensor({5, 3}, rng);
  Tensor x = random_tensor({4, 3}, rng);
  auto r = check_gradients({{"table", table}, {"x", x}}, [&] {
    Tensor e = add(embedding(table, {4, 0, 4, 2}), x);
    Tensor pooled = segment_mean(e, {3, 1});
    Tensor n = l2_normalize_rows(pooled);
    return add(probe(n, seed), probe(take_cols(gather_rows(e, {1, 3}), {2, 0}), seed + 1));
  }, seed);
  EXPECT_LT(r.max_rel_error, kGradTol) << r.worst;
}

INSTANTIATE_TEST_SUITE_P(Seeds, GradientSuite, ::testing::Range(0, kSeeds));

TEST(Attention, SingleElementSegmentReturnsValue) {
  std::mt19937_64 rng(1);
  Tensor q = random_tensor({1, 4}, rng, 1.0, false);
  Tensor v = random_tensor({1, 4}, rng, 1.0, false);
  Tensor out = multi_head_attention(q, q, v, 2);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(out.values()[i], v.values()[i], 1e-15);
}

TEST(Optim, SgdStep) {
  Tensor w = Tensor::variable({1, 1}, {1.0});
  ParameterList params{{"w", w}};
  backward(scale(w, 0.5));
  sgd_step(params, 0.1);
  EXPECT_DOUBLE_EQ(w.values()[0], 0.95);
}

TEST(Optim, AdamWFirstStep) {
  Tensor w = Tensor::variable({1, 1}, {1.0});
  ParameterList params{{"w", w}};
  backward(sum(w));  // g = 1
  OptimizerState state;
  state.config.lr = 1e-3;
  state.config.weight_decay = 1e-2;
  adamw_step(state, params);
  EXPECT_NEAR(w.values()[0], 0.99899, 1e-8);
  EXPECT_EQ(state.step, 1);
}

TEST(Optim, AdamWZeroGradientZeroDecayIsNoop) {
  Tensor w = Tensor::variable({1, 3}, {1.0, -2.0, 0.5});
  ParameterList params{{"w", w}};
  backward(sum(scale(w, 0.0)));
  OptimizerState state;
  state.config.lr = 1e-2;
  state.config.weight_decay = 0.0;
  adamw_step(state, params);
  EXPECT_EQ(w.values()[0], 1.0);
  EXPECT_EQ(w.values()[1], -2.0);
  EXPECT_EQ(w.values()[2], 0.5);
}

TEST(Optim, AdamWDecoupledDecay) {
  Tensor w = Tensor::variable({1, 2}, {2.0, -4.0});
  ParameterList params{{"w", w}};
  OptimizerState state;
  state.config.lr = 1e-2;
  state.config.weight_decay = 0.1;
  for (int step = 0; step < 3; ++step) {
    std::vector<double> before(w.values().begin(), w.values().end());
    zero_grads(params);
    backward(sum(scale(w, 0.0)));
    adamw_step(state, params);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(w.values()[i], before[i] - 1e-2 * 0.1 * before[i]);
  }
}

TEST(Optim, NonFiniteGradientRejectedWithName) {
  Tensor w = Tensor::variable({1, 1}, {1.0});
  Tensor u = Tensor::variable({1, 1}, {1.0});
  ParameterList params{{"encoder.weight", w}, {"other", u}};
  backward(scale(add(w, u), std::numeric_limits<double>::infinity()));
  OptimizerState state;
  try {
    adamw_step(state, params);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("encoder.weight"), std::string::npos);
  }
  EXPECT_EQ(w.values()[0], 1.0);
  EXPECT_EQ(state.step, 0);
  EXPECT_THROW(sgd_step(params, 0.1), NumericalError);
}

TEST(Schedule, Plateau) {
  const std::vector<double> improving{1.0, 0.9, 0.8};
  EXPECT_EQ(plateau_schedule(improving, 1e-3), 1e-3);
  const std::vector<double> one{0.8, 0.8, 0.85, 0.9, 0.8, 0.81};
  EXPECT_EQ(plateau_schedule(one, 1e-3), 0.5e-3);
  const std::vector<double> four_flat{0.8, 0.8, 0.85, 0.9, 0.8};
  EXPECT_EQ(plateau_schedule(four_flat, 1e-3), 1e-3);
  std::vector<double> two{0.8};
  for (int i = 0; i < 10; ++i) two.push_back(0.8 + 0.01 * i);
  EXPECT_EQ(plateau_schedule(two, 1e-3), 0.25e-3);
  EXPECT_THROW(plateau_schedule(std::vector<double>{}, 1e-3), std::invalid_argument);
}

TEST(Schedule, EarlyStop) {
  EXPECT_FALSE(early_stop(std::vector<double>{1.0, 0.9, 0.8}, 3));
  EXPECT_TRUE(early_stop(std::vector<double>{0.5, 0.9, 0.8, 0.7}, 3));
  EXPECT_FALSE(early_stop(std::vector<double>{0.5, 0.9, 0.8}, 3));
  EXPECT_THROW(early_stop(std::vector<double>{}, 3), std::invalid_argument);
}

TEST(Taping, ForwardLeavesParametersAndStateUntouched) {
  std::mt19937_64 rng(5);
  Mlp mlp({3, 4, 2}, rng);
  auto params = mlp.parameters("mlp");
  Snapshot before(params);
  Tensor x = random_tensor({2, 3}, rng, 1.0, false);
  Tensor y = mlp(x);
  EXPECT_TRUE(y.requires_grad());
  {
    NoGradGuard guard;
    EXPECT_FALSE(mlp(x).requires_grad());
  }
  auto params2 = mlp.parameters("mlp");
  Snapshot after(params2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    EXPECT_TRUE(params[i].tensor.grad().empty());
    for (std::size_t j = 0; j < params[i].tensor.size(); ++j)
      EXPECT_EQ(params[i].tensor.values()[j], params2[i].tensor.values()[j]);
  }
}

TEST(Init, DeterministicForSeedAndZeroInit) {
  std::mt19937_64 a(9), b(9);
  Dense da(5, 3, a), db(5, 3, b);
  for (std::size_t i = 0; i < 15; ++i) EXPECT_EQ(da.weight().values()[i], db.weight().values()[i]);
  Dense z(5, 3, a, true);
  for (double v : z.weight().values()) EXPECT_EQ(v, 0.0);
  for (double v : z.bias().values()) EXPECT_EQ(v, 0.0);
}

TEST(Checkpoint, RoundTripWithOptimizer) {
  const auto dir = std::filesystem::temp_directory_path() / "riskref_nn_ckpt";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "m.ckpt").string();
  std::mt19937_64 rng(11);
  Mlp mlp({3, 4, 2}, rng);
  auto params = mlp.parameters("mlp");
  backward(sum(mlp(random_tensor({2, 3}, rng, 1.0, false))));
  OptimizerState state;
  state.config.lr = 0.01;
  adamw_step(state, params);
  save_checkpoint(path, params, &state);

  std::mt19937_64 other(99);
  Mlp copy({3, 4, 2}, other);
  auto cparams = copy.parameters("mlp");
  auto restored = load_checkpoint(path, cparams);
  ASSERT_TRUE(restored.has_value());
  EXPECT_EQ(restored->step, 1);
  EXPECT_EQ(restored->config.lr, 0.01);
  EXPECT_EQ(restored->first_moment, state.first_moment);
  EXPECT_EQ(restored->second_moment, state.second_moment);
  for (std::size_t i = 0; i < params.size(); ++i)
    for (std::size_t j = 0; j < params[i].tensor.size(); ++j)
      EXPECT_EQ(params[i].tensor.values()[j], cparams[i].tensor.values()[j]);

  Mlp wrong({3, 5, 2}, other);
  auto wparams = wrong.parameters("mlp");
  EXPECT_THROW(load_checkpoint(path, wparams), ShapeError);
  EXPECT_THROW(load_checkpoint((dir / "absent.ckpt").string(), wparams), MissingArtifact);
}

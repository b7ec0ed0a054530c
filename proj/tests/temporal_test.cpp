#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "grad_check.hpp"
#include "riskref/temporal.hpp"

using namespace riskref;
using riskref::testing::check_gradients;
using riskref::testing::random_tensor;

namespace {

Representation random_rep(Track t, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  Representation r{std::vector<double>(representation_dim(t)), t};
  for (auto& x : r.vector) x = nd(rng);
  return r;
}

TemporalSequence random_sequence(Track t, std::size_t priors, std::mt19937_64& rng) {
  TemporalSequence seq{random_rep(t, rng), {}};
  std::uniform_int_distribution<int> bucket(0, max_bucket(t));
  for (std::size_t i = 0; i < priors; ++i) seq.priors.push_back({random_rep(t, rng), bucket(rng)});
  return seq;
}

HeadOutputs random_head(std::mt19937_64& rng, double sd = 2.0) {
  std::normal_distribution<double> nd(0, sd);
  HeadOutputs h{};
  for (auto& x : h) x = nd(rng);
  return h;
}

double max_abs_diff(const ChangeSignal& a, const ChangeSignal& b) {
  double m = 0;
  for (std::size_t i = 0; i < kChangeSignalDim; ++i) m = std::max(m, std::abs(a.g[i] - b.g[i]));
  return m;
}

RefinementHead head_with_baseline_shift(double shift, std::mt19937_64& rng) {
  RefinementHead rr(rng);
  rr.mlp().last().bias().mutable_values()[0] = shift;
  return rr;
}

}  // namespace

TEST(TemporalLearner, PermutationInvariant) {
  for (auto track : {Track::imaging, Track::clinical}) {
    std::mt19937_64 rng(1);
    TemporalLearner tl(track, rng);
    for (int trial = 0; trial < 10; ++trial) {
      auto seq = random_sequence(track, 1 + trial % 5, rng);
      const auto g = tl.signal(seq);
      std::shuffle(seq.priors.begin(), seq.priors.end(), rng);
      EXPECT_LE(max_abs_diff(g, tl.signal(seq)), 1e-9);
    }
  }
}

TEST(TemporalLearner, DuplicatePriorReweightsDeterministically) {
  std::mt19937_64 rng(2);
  TemporalLearner tl(Track::clinical, rng);
  auto seq = random_sequence(Track::clinical, 3, rng);
  const auto g = tl.signal(seq);
  auto dup_end = seq;
  dup_end.priors.push_back(seq.priors[1]);
  auto dup_front = seq;
  dup_front.priors.insert(dup_front.priors.begin(), seq.priors[1]);
  const auto a = tl.signal(dup_end), b = tl.signal(dup_front);
  EXPECT_GT(max_abs_diff(g, a), 1e-6);
  EXPECT_LE(max_abs_diff(a, b), 1e-9);
  EXPECT_EQ(a.g, tl.signal(dup_end).g);
}

TEST(TemporalLearner, ZeroInitOutputGivesZeroSignal) {
  std::mt19937_64 rng(3);
  TemporalLearner tl(Track::imaging, rng, {}, /*zero_init_output=*/true);
  const auto g = tl.signal(random_sequence(Track::imaging, 2, rng));
  for (double v : g.g) EXPECT_EQ(v, 0.0);
}

TEST(TemporalLearner, RejectsInvalidSequences) {
  std::mt19937_64 rng(4);
  TemporalLearner tl(Track::imaging, rng);
  auto seq = random_sequence(Track::imaging, 2, rng);
  auto empty = seq;
  empty.priors.clear();
  EXPECT_THROW(tl.signal(empty), std::invalid_argument);
  auto mixed = seq;
  mixed.priors.push_back({random_rep(Track::clinical, rng), 1});
  EXPECT_THROW(tl.signal(mixed), std::invalid_argument);
  auto far = seq;
  far.priors[0].bucket = 11;
  EXPECT_THROW(tl.signal(far), std::out_of_range);
  TemporalLearner clinical(Track::clinical, rng);
  auto cseq = random_sequence(Track::clinical, 1, rng);
  cseq.priors[0].bucket = 40;
  EXPECT_NO_THROW(clinical.signal(cseq));
  cseq.priors[0].bucket = 41;
  EXPECT_THROW(clinical.signal(cseq), std::out_of_range);
}

TEST(Refine, BypassWithoutPriorsIsExact) {
  std::mt19937_64 rng(5);
  RefinementHead rr(rng, /*zero_init_last=*/false);
  for (int i = 0; i < 100; ++i) {
    const auto base = random_head(rng);
    const auto curve = RiskCurve::from_preactivations(base);
    const auto r = refine(base, std::nullopt, rr);
    for (std::size_t k = 0; k <= kHazardSteps; ++k) EXPECT_EQ(r.probability(k), cumulative_probability(curve, k));
  }
}

TEST(Refine, ZeroInitHeadIsExactIdentity) {
  std::mt19937_64 rng(6);
  RefinementHead rr(rng);
  std::normal_distribution<double> nd(0, 3);
  for (int i = 0; i < 100; ++i) {
    const auto base = random_head(rng);
    ChangeSignal g;
    for (auto& v : g.g) v = nd(rng);
    const auto r = refine(base, g, rr);
    const auto curve = RiskCurve::from_preactivations(base);
    for (std::size_t k = 0; k <= kHazardSteps; ++k) EXPECT_EQ(r.probability(k), cumulative_probability(curve, k));
  }
}

TEST(Refine, BaselineShiftUpgradesOrDowngrades) {
  std::mt19937_64 rng(7);
  HeadOutputs base{};
  const auto up = refine(base, ChangeSignal{}, head_with_baseline_shift(1.0, rng));
  const auto down = refine(base, ChangeSignal{}, head_with_baseline_shift(-1.0, rng));
  EXPECT_NEAR(up.probability(0), 0.7311, 1e-4);
  EXPECT_NEAR(down.probability(0), 0.2689, 1e-4);
  EXPECT_NEAR(up.probability(0), 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
}

TEST(SuccessiveRefine, Examples) {
  std::mt19937_64 rng(8);
  HeadOutputs base{};
  const auto img = head_with_baseline_shift(0.5, rng), clin = head_with_baseline_shift(0.5, rng);
  const auto both = successive_refine(base, ChangeSignal{}, img, ChangeSignal{}, clin);
  EXPECT_NEAR(both.probability(0), 0.7311, 1e-4);

  RefinementHead rr_img(rng, false), rr_clin(rng, false);
  for (int i = 0; i < 50; ++i) {
    const auto b = random_head(rng);
    ChangeSignal g;
    for (auto& v : g.g) v = std::normal_distribution<double>()(rng);
    const auto none = successive_refine(b, std::nullopt, rr_img, std::nullopt, rr_clin);
    const auto plain = refine(b, std::nullopt, rr_img);
    EXPECT_EQ(none.probabilities, plain.probabilities);
    const auto img_only = successive_refine(b, g, rr_img, std::nullopt, rr_clin);
    EXPECT_EQ(img_only.probabilities, refine(b, g, rr_img).probabilities);
    EXPECT_EQ(img_only.logits, refine(b, g, rr_img).logits);
  }
}

TEST(Refine, RefinedCurvesAreMonotone) {
  std::mt19937_64 rng(9);
  RefinementHead rr_img(rng, false), rr_clin(rng, false);
  std::normal_distribution<double> nd(0, 4);
  for (int i = 0; i < 1000; ++i) {
    ChangeSignal a, b;
    for (auto& v : a.g) v = nd(rng);
    for (auto& v : b.g) v = nd(rng);
    const auto r = successive_refine(random_head(rng, 5.0), a, rr_img, b, rr_clin);
    for (std::size_t k = 0; k < kHazardSteps; ++k) ASSERT_GE(r.probabilities[k + 1], r.probabilities[k]);
  }
}

TEST(Refine, BatchedPathMatchesSingleCase) {
  std::mt19937_64 rng(10);
  RefinementHead rr(rng, false);
  const auto base = random_head(rng);
  ChangeSignal g;
  for (auto& v : g.g) v = std::normal_distribution<double>()(rng);
  const auto single = refine(base, g, rr);
  const auto batched = refined_logits(nn::Tensor::row(std::vector<double>(base.begin(), base.end())),
                                      rr(nn::Tensor::row(std::vector<double>(g.g.begin(), g.g.end()))));
  for (std::size_t k = 0; k <= kHazardSteps; ++k) EXPECT_NEAR(batched.values()[k], single.logits[k], 1e-12);
}

class TemporalGradients : public ::testing::TestWithParam<int> {};

TEST_P(TemporalGradients, LearnerAndRefinementHead) {
  std::mt19937_64 rng(GetParam());
  TemporalConfig cfg;
  cfg.ff_width = 16;
  TemporalLearner tl(Track::clinical, rng, cfg);
  RefinementHead rr(rng, false);
  const auto reps = random_tensor({7, kClinicalRepresentationDim}, rng, 1.0, false);
  const std::vector<std::size_t> buckets{0, 3, 17, 0, 0, 40, 2};
  const std::vector<std::size_t> segments{3, 1, 3};
  const auto base = random_tensor({3, kHeadOutputs}, rng, 1.0, false);
  const auto w = random_tensor({3, kHeadOutputs}, rng, 1.0, false);
  auto params = tl.parameters("tl");
  nn::append(params, rr.parameters("rr"));
  const auto r = check_gradients(
      params, [&] { return nn::sum(nn::mul(nn::sigmoid(refined_logits(base, rr(tl(reps, buckets, segments)))), w)); },
      GetParam(), 1e-4, 8);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

INSTANTIATE_TEST_SUITE_P(Seeds, TemporalGradients, ::testing::Range(0, 20));

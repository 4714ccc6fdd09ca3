#include <gtest/gtest.h>

#include <cmath>

#include "rbnn/inference.hpp"

using namespace rbnn;

namespace {

std::vector<Probs> random_draws(std::size_t n, Rng& rng) {
  std::vector<Probs> d(n);
  for (auto& p : d) {
    const double r = rng.uniform();
    p = {1.0 - r, r};
  }
  return d;
}

}  // namespace

TEST(SummarizeDraws, IdenticalDrawsHaveZeroCovariance) {
  const std::vector<Probs> draws(50, Probs{0.3, 0.7});
  const PredictiveSummary s = summarize_draws(draws);
  EXPECT_EQ(s.mean_probs[1], 0.7);
  for (const auto& row : s.covariance)
    for (double c : row) EXPECT_EQ(c, 0.0);
  EXPECT_EQ(s.std_rescaled, 0.0);
  EXPECT_EQ(s.n_draws, 50u);
}

TEST(SummarizeDraws, OuterProductFormulaMatchesTwoPass) {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const auto draws = random_draws(3 + rng.uniform_index(0, 60), rng);
    const PredictiveSummary s = summarize_draws(draws);
    const double n = static_cast<double>(draws.size());
    Probs mean{0, 0};
    for (const auto& y : draws)
      for (int i = 0; i < 2; ++i) mean[i] += y[i] / n;
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) {
        double eyy = 0.0, two_pass = 0.0;
        for (const auto& y : draws) {
          eyy += y[i] * y[j] / n;
          two_pass += (y[i] - mean[i]) * (y[j] - mean[j]) / n;
        }
        EXPECT_NEAR(s.covariance[i][j], eyy - mean[i] * mean[j], 1e-12);
        EXPECT_NEAR(s.covariance[i][j], two_pass, 1e-12);
      }
    // Two-class simplex: both variances equal, covariance is their negative.
    EXPECT_NEAR(s.covariance[0][0], s.covariance[1][1], 1e-12);
    EXPECT_NEAR(s.covariance[0][1], -s.covariance[1][1], 1e-12);
  }
}

TEST(SummarizeDraws, HandComputedPair) {
  const std::vector<Probs> draws = {{0.9, 0.1}, {0.5, 0.5}};
  const PredictiveSummary s = summarize_draws(draws, true);
  EXPECT_NEAR(s.mean_probs[1], 0.3, 1e-15);
  EXPECT_NEAR(s.covariance[1][1], 0.04, 1e-15);
  EXPECT_NEAR(s.std_rescaled, 0.2, 1e-15);
  EXPECT_EQ(s.draws.size(), 2u);
  EXPECT_THROW(summarize_draws(std::vector<Probs>(1)), std::invalid_argument);
}

TEST(UncertaintyBand, ClampsForDisplayOnly) {
  PredictiveSummary s;
  s.mean_probs = {0.05, 0.95};
  s.std_rescaled = 0.1;
  const UncertaintyBand b = uncertainty_band(s);
  EXPECT_NEAR(b.raw_high, 1.15, 1e-12);
  EXPECT_EQ(b.high, 1.0);
  EXPECT_NEAR(b.low, 0.75, 1e-12);
}

TEST(Confidence, MeanOfMaxProbability) {
  const std::vector<Probs> probs = {{0.9, 0.1}, {0.2, 0.8}, {0.6, 0.4}, {0.45, 0.55}};
  const std::vector<int> labels = {0, 1, 1, 0};
  const ConfidenceReport r = confidence_from_probs(probs, labels, 1.25);
  EXPECT_NEAR(r.confidence, (0.9 + 0.8 + 0.6 + 0.55) / 4.0, 1e-15);
  EXPECT_DOUBLE_EQ(r.accuracy, 0.5);
  EXPECT_EQ(r.count, 4u);
  EXPECT_EQ(r.scale, 1.25);
  EXPECT_THROW(confidence_from_probs({}, {}), std::invalid_argument);
}

TEST(Confidence, BaselineSoftmaxIsAtLeastOneHalf) {
  const Model m = build(ModelSpec::desk_default(), ModelMode::Baseline, 4);
  Rng rng(5);
  const Tensor x = rng.uniform_tensor({6, 1, 64, 64}, 0, 1);
  const std::vector<int> labels(6, 1);
  const ConfidenceReport r = softmax_confidence(m, x, labels);
  EXPECT_GE(r.confidence, 0.5);
  EXPECT_LE(r.confidence, 1.0);
  EXPECT_THROW(softmax_confidence(build(ModelSpec::desk_default(), ModelMode::Bayesian, 4), x, labels),
               std::invalid_argument);
}

TEST(McPredict, DeterministicUnderSeedAndBatchInvariant) {
  VariationalInit init;
  init.rho = -2.0;
  const Model m = build(ModelSpec::desk_default(), ModelMode::Bayesian, 6, init);
  Rng rng(7);
  const Tensor x = rng.uniform_tensor({3, 1, 64, 64}, 0, 1);
  const auto a = mc_predict_batch(m, x, 8, 99);
  const auto b = mc_predict_batch(m, x, 8, 99);
  const auto c = mc_predict_batch(m, x, 8, 100);
  ASSERT_EQ(a.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(a[i].mean_probs, b[i].mean_probs);
    EXPECT_EQ(a[i].std_rescaled, b[i].std_rescaled);
    EXPECT_GT(a[i].std_rescaled, 0.0);
    EXPECT_NEAR(a[i].mean_probs[0] + a[i].mean_probs[1], 1.0, 1e-12);
  }
  EXPECT_NE(a[0].mean_probs, c[0].mean_probs);
}

TEST(McPredict, CollapsedPosteriorHasNoSpread) {
  VariationalInit init;
  init.rho = -40.0;
  const Model m = build(ModelSpec::desk_default(), ModelMode::Bayesian, 8, init);
  Rng rng(9);
  const Tensor x = rng.uniform_tensor({1, 1, 64, 64}, 0, 1);
  const PredictiveSummary s = mc_predict(m, x, 20, rng);
  EXPECT_LT(s.std_rescaled, 1e-8);
  const auto det = probs_from_logits(forward_deterministic(collapse(m), x));
  EXPECT_NEAR(s.mean_probs[1], det[0][1], 1e-9);
}

TEST(McPredict, RejectsBadArguments) {
  const Model bnn = build(ModelSpec::desk_default(), ModelMode::Bayesian, 1);
  const Model base = build(ModelSpec::desk_default(), ModelMode::Baseline, 1);
  const Tensor x({1, 1, 64, 64});
  Rng rng(1);
  EXPECT_THROW(mc_predict(base, x, 10, rng), std::invalid_argument);
  EXPECT_THROW(mc_predict(bnn, x, 1, rng), std::invalid_argument);
  EXPECT_THROW(mc_predict(bnn, Tensor({2, 1, 64, 64}), 10, rng), ShapeError);
}

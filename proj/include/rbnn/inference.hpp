#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "rbnn/model.hpp"

namespace rbnn {

/// Class indices of the two-way detector.
inline constexpr int kOriginal = 0;
inline constexpr int kRescaled = 1;

using Probs = std::array<double, 2>;

/// Monte Carlo estimate of the predictive posterior for one input.
struct PredictiveSummary {
  Probs mean_probs{};
  std::array<Probs, 2> covariance{};  // E[y y^T] - E[y] E[y]^T over the draws
  double std_rescaled = 0.0;          // sqrt(covariance[1][1])
  std::size_t n_draws = 0;
  std::vector<Probs> draws;  // filled only on request
};

/// Mean and population covariance of a set of probability vectors.
/// Accumulated with Welford updates, so identical draws give exactly zero.
inline PredictiveSummary summarize_draws(std::span<const Probs> draws, bool keep_draws = false) {
  if (draws.size() < 2) throw std::invalid_argument("predictive summary needs at least 2 draws");
  PredictiveSummary s;
  Probs mean{0.0, 0.0};
  std::array<Probs, 2> m2{};
  std::size_t k = 0;
  for (const Probs& y : draws) {
    ++k;
    const Probs before = mean;
    for (int i = 0; i < 2; ++i) mean[i] += (y[i] - mean[i]) / static_cast<double>(k);
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) m2[i][j] += (y[i] - before[i]) * (y[j] - mean[j]);
  }
  const double n = static_cast<double>(draws.size());
  s.mean_probs = mean;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) s.covariance[i][j] = m2[i][j] / n;
  // Symmetrize: the Welford cross terms agree only up to rounding.
  s.covariance[0][1] = s.covariance[1][0] = 0.5 * (s.covariance[0][1] + s.covariance[1][0]);
  s.std_rescaled = std::sqrt(std::max(0.0, s.covariance[1][1]));
  s.n_draws = draws.size();
  if (keep_draws) s.draws.assign(draws.begin(), draws.end());
  return s;
}

/// Softmax probabilities of a [N, 2] logit matrix as pairs.
inline std::vector<Probs> probs_from_logits(const Tensor& logits) {
  if (logits.rank() != 2 || logits.dim(1) != 2) {
    throw ShapeError("expected [N, 2] logits, got " + shape_str(logits.shape()));
  }
  const Tensor p = softmax_rows(logits);
  std::vector<Probs> out(logits.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = {p[2 * i], p[2 * i + 1]};
  return out;
}

/// MC predictive posterior for every row of `batch`: n stochastic passes with
/// draw d seeded from derive_seed(base_seed, d); softmax per draw, then averaged.
inline std::vector<PredictiveSummary> mc_predict_batch(const Model& model, const Tensor& batch, std::size_t n,
                                                       std::uint64_t base_seed, bool keep_draws = false) {
  if (!model.bayesian()) throw std::invalid_argument("mc_predict needs a Bayesian model");
  if (n < 2) throw std::invalid_argument("mc_predict needs n >= 2 draws");
  const std::size_t rows = batch.dim(0);
  std::vector<std::vector<Probs>> per_input(rows, std::vector<Probs>(n));
  for (std::size_t d = 0; d < n; ++d) {
    Rng draw_rng(derive_seed(base_seed, d));
    const auto probs = probs_from_logits(predict_logits(model, batch, &draw_rng));
    for (std::size_t i = 0; i < rows; ++i) per_input[i][d] = probs[i];
  }
  std::vector<PredictiveSummary> out;
  out.reserve(rows);
  for (const auto& draws : per_input) out.push_back(summarize_draws(draws, keep_draws));
  return out;
}

/// Single-input form; `input` is [1, C, H, W]. Consumes one value from `rng`
/// to seed the per-draw substreams.
inline PredictiveSummary mc_predict(const Model& model, const Tensor& input, std::size_t n, Rng& rng,
                                    bool keep_draws = false) {
  if (input.rank() != 4 || input.dim(0) != 1) throw ShapeError("mc_predict expects a single input [1, C, H, W]");
  return mc_predict_batch(model, input, n, rng.next_u64(), keep_draws).front();
}

struct ConfidenceReport {
  double scale = 1.0;
  double confidence = 0.0;  // mean over inputs of the max class probability
  double accuracy = 0.0;
  std::size_t count = 0;
};

/// c = (1/M) sum_m max_k P(y_k | x_m), plus accuracy against `labels`.
inline ConfidenceReport confidence_from_probs(std::span<const Probs> probs, std::span<const int> labels,
                                              double scale = 1.0) {
  if (probs.empty()) throw std::invalid_argument("confidence needs at least one input");
  if (probs.size() != labels.size()) throw std::invalid_argument("confidence: probs and labels differ in length");
  ConfidenceReport r;
  r.scale = scale;
  r.count = probs.size();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    r.confidence += std::max(probs[i][0], probs[i][1]);
    const int pred = probs[i][1] > probs[i][0] ? kRescaled : kOriginal;
    if (pred == labels[i]) ++correct;
  }
  r.confidence /= static_cast<double>(probs.size());
  r.accuracy = static_cast<double>(correct) / static_cast<double>(probs.size());
  return r;
}

/// Softmax confidence of a point-estimate model on a batch of M inputs.
inline ConfidenceReport softmax_confidence(const Model& baseline, const Tensor& inputs, std::span<const int> labels,
                                           double scale = 1.0) {
  if (baseline.bayesian()) throw std::invalid_argument("softmax_confidence needs a baseline model");
  if (inputs.rank() == 0 || inputs.dim(0) == 0) throw std::invalid_argument("softmax_confidence: empty batch");
  const auto probs = probs_from_logits(forward_deterministic(baseline, inputs));
  return confidence_from_probs(probs, labels, scale);
}

struct UncertaintyBand {
  double raw_low = 0.0;
  double raw_high = 0.0;
  double low = 0.0;   // clamped to [0, 1] for display
  double high = 0.0;
};

/// mean P(rescaled) -/+ two standard deviations.
inline UncertaintyBand uncertainty_band(const PredictiveSummary& s) {
  UncertaintyBand b;
  const double m = s.mean_probs[kRescaled];
  b.raw_low = m - 2.0 * s.std_rescaled;
  b.raw_high = m + 2.0 * s.std_rescaled;
  b.low = std::clamp(b.raw_low, 0.0, 1.0);
  b.high = std::clamp(b.raw_high, 0.0, 1.0);
  return b;
}

}  // namespace rbnn

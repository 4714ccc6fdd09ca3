#pragma once

#include <cmath>
#include <numbers>
#include <optional>

#include "rbnn/autodiff.hpp"
#include "rbnn/layers.hpp"
#include "rbnn/rng.hpp"

namespace rbnn {

/// Isotropic Gaussian prior over every weight.
struct PriorSpec {
  double mean = 0.0;
  double variance = 1.0;

  void validate() const {
    if (!(variance > 0.0) || !std::isfinite(variance) || !std::isfinite(mean)) {
      throw std::invalid_argument("prior variance must be positive and finite");
    }
  }
};

/// Mean-field Gaussian q(w | mu, rho) with sigma = softplus(rho).
struct GaussianVariational {
  Tensor mu;
  Tensor rho;

  GaussianVariational() = default;
  GaussianVariational(Tensor mu_, Tensor rho_) : mu(std::move(mu_)), rho(std::move(rho_)) {
    if (mu.shape() != rho.shape()) {
      throw ShapeError("variational mu " + shape_str(mu.shape()) + " and rho " + shape_str(rho.shape()) + " differ");
    }
  }

  /// mu given, rho filled with a constant.
  static GaussianVariational with_rho(Tensor mu_, double rho_value) {
    Tensor r(mu_.shape(), rho_value);
    return GaussianVariational(std::move(mu_), std::move(r));
  }

  Tensor sigma() const {
    Tensor s(rho.shape());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = softplus(rho[i]);
    return s;
  }

  std::size_t size() const noexcept { return mu.size(); }
};

/// One reparameterized draw w = mu + softplus(rho) * eps, eps ~ N(0, I).
inline Tensor sample_weight(const GaussianVariational& v, Rng& rng) {
  Tensor w(v.mu.shape());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = v.mu[i] + softplus(v.rho[i]) * rng.normal();
  return w;
}

/// Differentiable reparameterized draw for a fixed eps.
inline Var sample_weight(Var mu, Var rho, const Tensor& eps) {
  Var eps_v = mu.tape().constant(eps);
  return add(mu, mul(softplus(rho), eps_v));
}

/// KL(q || prior) summed over all weights, closed form.
inline double kl_closed_form(const GaussianVariational& v, const PriorSpec& prior = {}) {
  prior.validate();
  double kl = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double s = softplus(v.rho[i]);
    const double d = v.mu[i] - prior.mean;
    kl += 0.5 * (std::log(prior.variance / (s * s)) + (s * s + d * d) / prior.variance - 1.0);
  }
  return kl;
}

/// Closed-form KL as a tape op; gradients flow to mu and rho.
inline Var kl_divergence(Var mu, Var rho, const PriorSpec& prior = {}) {
  prior.validate();
  detail::require_same_tape(mu, rho);
  detail::require_same_shape("kl_divergence", mu.value(), rho.value());
  const GaussianVariational v(mu.value(), rho.value());
  const double kl = kl_closed_form(v, prior);
  return mu.tape().record(Tensor::scalar(kl), {mu, rho},
                          [mu, rho, prior](Tape& t, const Tensor& g) {
                            const Tensor& m = mu.value();
                            const Tensor& r = rho.value();
                            double* gm = t.grad_buffer(mu);
                            double* gr = t.grad_buffer(rho);
                            for (std::size_t i = 0; i < m.size(); ++i) {
                              if (gm) gm[i] += g[0] * (m[i] - prior.mean) / prior.variance;
                              if (gr) {
                                const double s = softplus(r[i]);
                                gr[i] += g[0] * (s / prior.variance - 1.0 / s) * sigmoid(r[i]);
                              }
                            }
                          },
                          "kl_divergence");
}

inline double log_normal_pdf(double x, double mean, double variance) {
  const double d = x - mean;
  return -0.5 * (std::log(2.0 * std::numbers::pi * variance) + d * d / variance);
}

/// Single-sample term log q(w|theta) - log P(w) summed over weights, at
/// w = mu + sigma * eps. Differentiable through the reparameterization.
inline Var kl_sample_term(Var mu, Var rho, const Tensor& eps, const PriorSpec& prior = {}) {
  prior.validate();
  detail::require_same_tape(mu, rho);
  detail::require_same_shape("kl_sample_term", mu.value(), rho.value());
  detail::require_same_shape("kl_sample_term", mu.value(), eps);
  const Tensor& m = mu.value();
  const Tensor& r = rho.value();
  double total = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double s = softplus(r[i]);
    const double w = m[i] + s * eps[i];
    total += log_normal_pdf(w, m[i], s * s) - log_normal_pdf(w, prior.mean, prior.variance);
  }
  return mu.tape().record(Tensor::scalar(total), {mu, rho},
                          [mu, rho, eps, prior](Tape& t, const Tensor& g) {
                            const Tensor& m = mu.value();
                            const Tensor& r = rho.value();
                            double* gm = t.grad_buffer(mu);
                            double* gr = t.grad_buffer(rho);
                            for (std::size_t i = 0; i < m.size(); ++i) {
                              const double s = softplus(r[i]);
                              const double w = m[i] + s * eps[i];
                              // log q at the sampled point is -log s - eps^2/2 + const.
                              const double dprior = (w - prior.mean) / prior.variance;
                              if (gm) gm[i] += g[0] * dprior;
                              if (gr) gr[i] += g[0] * (-1.0 / s + dprior * eps[i]) * sigmoid(r[i]);
                            }
                          },
                          "kl_sample_term");
}

struct McEstimate {
  double mean = 0.0;
  double std_error = 0.0;
  std::size_t samples = 0;
};

/// Monte Carlo estimate (1/n) sum_i [log q(w_i|theta) - log P(w_i)] with
/// w_i ~ q, plus its standard error.
inline McEstimate kl_monte_carlo(const GaussianVariational& v, const PriorSpec& prior, std::size_t n_samples,
                                 Rng& rng) {
  if (n_samples == 0) throw std::invalid_argument("kl_monte_carlo: n_samples must be >= 1");
  prior.validate();
  const Tensor sigma = v.sigma();
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t k = 0; k < n_samples; ++k) {
    double term = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double w = v.mu[i] + sigma[i] * rng.normal();
      term += log_normal_pdf(w, v.mu[i], sigma[i] * sigma[i]) - log_normal_pdf(w, prior.mean, prior.variance);
    }
    sum += term;
    sum_sq += term * term;
  }
  const double n = static_cast<double>(n_samples);
  McEstimate est;
  est.samples = n_samples;
  est.mean = sum / n;
  if (n_samples > 1) {
    const double var = std::max(0.0, (sum_sq - n * est.mean * est.mean) / (n - 1.0));
    est.std_error = std::sqrt(var / n);
  }
  return est;
}

// ---------------------------------------------------------------------------
// Flipout layers

/// Bayesian twin of ConvLayer. For the constrained first layer the projection
/// acts on mu only.
struct FlipoutConvLayer {
  GaussianVariational kernel;
  std::optional<GaussianVariational> bias;
  std::size_t stride = 1;
  Padding padding = Padding::Valid;
  bool constrained = false;
};

/// Bayesian twin of DenseLayer.
struct FlipoutDenseLayer {
  GaussianVariational weight;
  GaussianVariational bias;
};

/// Variational parameters of one tensor bound onto a tape, with the Gaussian
/// noise drawn for the current pass.
struct BoundVariational {
  Var mu;
  Var rho;
  Tensor eps;
};

/// Noise is drawn in a fixed order: weight eps, bias eps, input signs [N, C_in],
/// output signs [N, C_out]. Tests replay this order with an identically seeded Rng.
struct FlipoutNoise {
  Tensor weight_eps;
  std::optional<Tensor> bias_eps;
  Tensor input_signs;
  Tensor output_signs;
};

inline FlipoutNoise draw_flipout_noise(const Shape& weight_shape, const std::optional<Shape>& bias_shape,
                                       std::size_t batch, std::size_t in_channels, std::size_t out_channels, Rng& rng) {
  FlipoutNoise noise;
  noise.weight_eps = rng.normal_tensor(weight_shape);
  if (bias_shape) noise.bias_eps = rng.normal_tensor(*bias_shape);
  noise.input_signs = rng.rademacher_tensor({batch, in_channels});
  noise.output_signs = rng.rademacher_tensor({batch, out_channels});
  return noise;
}

/// out = op(x; mu) + op(x * r; sigma * eps) * s, where `op` is the layer's
/// linear map, eps is shared across the batch and r, s are per-example signs.
template <class LinearOp>
Var flipout_apply(Var x, Var mu, Var rho, const FlipoutNoise& noise, LinearOp&& op) {
  Tape& tape = x.tape();
  Var delta = mul(softplus(rho), tape.constant(noise.weight_eps));
  Var base = op(x, mu);
  Var perturbed = op(scale_channels(x, noise.input_signs), delta);
  return add(base, scale_channels(perturbed, noise.output_signs));
}

}  // namespace rbnn

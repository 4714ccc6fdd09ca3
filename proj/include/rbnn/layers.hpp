#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>

#include "rbnn/autodiff.hpp"

namespace rbnn {

/// Projects each filter of kernel[F, C, kH, kW] onto the prediction-error
/// constraint: center tap -1, remaining taps rescaled to sum to 1. Filters whose
/// off-center sum is (numerically) zero fall back to a uniform 1/(kH*kW - 1).
inline Tensor constrained_project(const Tensor& kernel) {
  if (kernel.rank() != 4) throw ShapeError("constrained_project: expected [F, C, kH, kW], got " + shape_str(kernel.shape()));
  const std::size_t kh = kernel.dim(2), kw = kernel.dim(3);
  if (kh % 2 == 0 || kw % 2 == 0) {
    throw ShapeError("constrained_project: kernel extents must be odd, got " + std::to_string(kh) + "x" +
                     std::to_string(kw));
  }
  const std::size_t taps = kh * kw;
  const std::size_t center = (kh / 2) * kw + kw / 2;
  Tensor out = kernel;
  for (std::size_t filt = 0; filt < kernel.size() / taps; ++filt) {
    double* k = out.data() + filt * taps;
    double off = 0.0;
    for (std::size_t t = 0; t < taps; ++t) {
      if (t != center) off += k[t];
    }
    if (std::abs(off) <= 1e-12) {
      for (std::size_t t = 0; t < taps; ++t) k[t] = 1.0 / static_cast<double>(taps - 1);
    } else {
      for (std::size_t t = 0; t < taps; ++t) k[t] /= off;
    }
    k[center] = -1.0;
  }
  return out;
}

/// Largest deviation from the constraint over all filters: max of |center + 1|
/// and |off-center sum - 1|.
inline double constraint_violation(const Tensor& kernel) {
  const std::size_t kh = kernel.dim(2), kw = kernel.dim(3);
  const std::size_t taps = kh * kw;
  const std::size_t center = (kh / 2) * kw + kw / 2;
  double worst = 0.0;
  for (std::size_t filt = 0; filt < kernel.size() / taps; ++filt) {
    const double* k = kernel.data() + filt * taps;
    double off = 0.0;
    for (std::size_t t = 0; t < taps; ++t) {
      if (t != center) off += k[t];
    }
    worst = std::max({worst, std::abs(k[center] + 1.0), std::abs(off - 1.0)});
  }
  return worst;
}

enum class Activation { Relu, Tanh };

inline Var apply_activation(Activation a, Var x) { return a == Activation::Relu ? relu(x) : tanh(x); }

/// Point-estimate convolution. `constrained` marks the forensic first layer
/// (no bias, kernel kept on the prediction-error constraint).
struct ConvLayer {
  Tensor kernel;
  std::optional<Tensor> bias;
  std::size_t stride = 1;
  Padding padding = Padding::Valid;
  bool constrained = false;
};

struct DenseLayer {
  Tensor weight;  // [D, K]
  Tensor bias;    // [K]
};

struct ActivationLayer {
  Activation kind = Activation::Relu;
};

struct MaxPoolLayer {
  std::size_t window = 2;
  std::size_t stride = 2;
};

struct FlattenLayer {};

/// Binds a parameter tensor onto the tape: trainable parameters become leaves
/// that collect gradients, frozen ones are recorded as constants.
inline Var bind_tensor(Tape& tape, const Tensor& value, bool trainable) {
  return trainable ? tape.parameter(value) : tape.constant(value);
}

}  // namespace rbnn

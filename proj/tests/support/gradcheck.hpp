#pragma once

// Central-difference gradient checker and the catalogue of differentiable
// primitives it is run against.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "rbnn/autodiff.hpp"
#include "rbnn/rng.hpp"
#include "rbnn/variational.hpp"

namespace rbnn::check {

using GraphFn = std::function<Var(Tape&, const std::vector<Var>&)>;

/// Scalar objective: the output itself when scalar, else sum(out * w) with a
/// fixed random projection w so every output element carries gradient.
inline double objective_value(const GraphFn& f, const std::vector<Tensor>& inputs, const Tensor* projection) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.constant(t));
  const Tensor& out = f(tape, vars).value();
  if (!projection) return out.item();
  double acc = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) acc += out[i] * (*projection)[i];
  return acc;
}

/// Relative error ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-8)
/// over all inputs jointly.
inline double gradient_check(const GraphFn& f, const std::vector<Tensor>& inputs, Rng& rng, double h = 1e-5) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.parameter(t));
  Var out = f(tape, vars);
  std::optional<Tensor> projection;
  Var loss = out;
  if (out.value().size() != 1 || out.value().rank() != 0) {
    projection = rng.normal_tensor(out.value().shape());
    loss = sum(mul(out, tape.constant(*projection)));
  }
  tape.backward(loss);

  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  std::vector<Tensor> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor analytic = tape.grad(vars[k]);
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double x = inputs[k][i];
      probe[k][i] = x + h;
      const double up = objective_value(f, probe, projection ? &*projection : nullptr);
      probe[k][i] = x - h;
      const double down = objective_value(f, probe, projection ? &*projection : nullptr);
      probe[k][i] = x;
      const double numeric = (up - down) / (2.0 * h);
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
    }
  }
  return std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), 1e-8});
}

struct OpCase {
  std::string name;
  std::function<std::vector<Tensor>(Rng&)> make_inputs;
  GraphFn fn;
};

/// Normal values pushed at least `gap` away from zero, so kinks are not crossed.
inline Tensor away_from_zero(const Shape& s, Rng& rng, double gap = 1e-2) {
  Tensor t = rng.normal_tensor(s);
  for (auto& v : t.values()) v = v >= 0 ? v + gap : v - gap;
  return t;
}

/// Shuffled distinct values with spacing >= 0.01, so max-pool winners are
/// stable under small perturbations.
inline Tensor distinct_values(const Shape& s, Rng& rng) {
  Tensor t(s);
  std::vector<std::size_t> order(t.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(0, i - 1)]);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.02 * static_cast<double>(order[i]) - 1.0 + rng.uniform(0, 0.005);
  return t;
}

inline std::vector<OpCase> differentiable_ops() {
  std::vector<OpCase> ops;
  auto normals = [](std::vector<Shape> shapes) {
    return [shapes](Rng& rng) {
      std::vector<Tensor> out;
      for (const auto& s : shapes) out.push_back(rng.normal_tensor(s));
      return out;
    };
  };
  ops.push_back({"add", normals({{3, 4}, {3, 4}}), [](Tape&, const auto& v) { return add(v[0], v[1]); }});
  ops.push_back({"mul", normals({{2, 5}, {2, 5}}), [](Tape&, const auto& v) { return mul(v[0], v[1]); }});
  ops.push_back({"scale", normals({{7}}), [](Tape&, const auto& v) { return scale(v[0], -1.7); }});
  ops.push_back({"sum", normals({{2, 3, 2}}), [](Tape&, const auto& v) { return sum(v[0]); }});
  ops.push_back({"scale_channels", normals({{2, 3, 2, 2}}), [](Tape&, const auto& v) {
                   Tensor f({2, 3}, {1, -1, 1, -1, -1, 1});
                   return scale_channels(v[0], f);
                 }});
  ops.push_back({"add_channel_bias_4d", normals({{2, 3, 2, 2}, {3}}),
                 [](Tape&, const auto& v) { return add_channel_bias(v[0], v[1]); }});
  ops.push_back({"add_channel_bias_2d", normals({{4, 3}, {3}}),
                 [](Tape&, const auto& v) { return add_channel_bias(v[0], v[1]); }});
  ops.push_back({"reshape", normals({{2, 6}}), [](Tape&, const auto& v) { return reshape(v[0], {3, 4}); }});
  ops.push_back({"flatten", normals({{2, 2, 3, 1}}), [](Tape&, const auto& v) { return flatten(v[0]); }});
  ops.push_back({"relu", [](Rng& rng) { return std::vector<Tensor>{away_from_zero({3, 5}, rng)}; },
                 [](Tape&, const auto& v) { return relu(v[0]); }});
  ops.push_back({"tanh", normals({{3, 5}}), [](Tape&, const auto& v) { return rbnn::tanh(v[0]); }});
  ops.push_back({"softplus", normals({{3, 5}}), [](Tape&, const auto& v) { return softplus(v[0]); }});
  ops.push_back({"conv2d_valid_direct", normals({{2, 1, 6, 6}, {3, 1, 3, 3}}),
                 [](Tape&, const auto& v) { return conv2d(v[0], v[1], 1, Padding::Valid); }});
  ops.push_back({"conv2d_valid_stride2", normals({{2, 2, 7, 7}, {3, 2, 3, 3}}),
                 [](Tape&, const auto& v) { return conv2d(v[0], v[1], 2, Padding::Valid); }});
  ops.push_back({"conv2d_same", normals({{1, 3, 5, 5}, {4, 3, 3, 3}}),
                 [](Tape&, const auto& v) { return conv2d(v[0], v[1], 1, Padding::Same); }});
  ops.push_back({"conv2d_same_stride2", normals({{2, 2, 6, 5}, {2, 2, 3, 3}}),
                 [](Tape&, const auto& v) { return conv2d(v[0], v[1], 2, Padding::Same); }});
  ops.push_back({"matmul", normals({{4, 6}, {6, 3}}), [](Tape&, const auto& v) { return matmul(v[0], v[1]); }});
  ops.push_back({"dense", normals({{4, 6}, {6, 3}, {3}}), [](Tape&, const auto& v) { return dense(v[0], v[1], v[2]); }});
  ops.push_back({"maxpool2d", [](Rng& rng) { return std::vector<Tensor>{distinct_values({2, 2, 4, 4}, rng)}; },
                 [](Tape&, const auto& v) { return maxpool2d(v[0], 2, 2); }});
  ops.push_back({"maxpool2d_overlap", [](Rng& rng) { return std::vector<Tensor>{distinct_values({1, 2, 5, 5}, rng)}; },
                 [](Tape&, const auto& v) { return maxpool2d(v[0], 3, 2); }});
  ops.push_back({"softmax_cross_entropy", normals({{5, 3}}), [](Tape&, const auto& v) {
                   const std::vector<int> labels = {0, 2, 1, 1, 0};
                   return softmax_cross_entropy(v[0], labels);
                 }});
  ops.push_back({"kl_divergence", normals({{3, 4}, {3, 4}}), [](Tape&, const auto& v) {
                   return kl_divergence(v[0], v[1], PriorSpec{0.3, 1.5});
                 }});
  ops.push_back({"kl_sample_term", normals({{3, 4}, {3, 4}}), [](Tape&, const auto& v) {
                   Tensor eps({3, 4});
                   for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = std::sin(1.3 * static_cast<double>(i) + 0.2);
                   return kl_sample_term(v[0], v[1], eps);
                 }});
  ops.push_back({"sample_weight", normals({{2, 3}, {2, 3}}), [](Tape&, const auto& v) {
                   return sample_weight(v[0], v[1], Tensor({2, 3}, {0.5, -1.0, 2.0, 0.1, -0.3, 1.2}));
                 }});
  ops.push_back({"flipout_dense", normals({{3, 4}, {4, 2}, {4, 2}}), [](Tape&, const auto& v) {
                   Rng noise_rng(17);
                   const FlipoutNoise noise = draw_flipout_noise({4, 2}, std::nullopt, 3, 4, 2, noise_rng);
                   return flipout_apply(v[0], v[1], v[2], noise, [](Var x, Var w) { return matmul(x, w); });
                 }});
  ops.push_back({"flipout_conv", normals({{2, 2, 5, 5}, {3, 2, 3, 3}, {3, 2, 3, 3}}), [](Tape&, const auto& v) {
                   Rng noise_rng(23);
                   const FlipoutNoise noise = draw_flipout_noise({3, 2, 3, 3}, std::nullopt, 2, 2, 3, noise_rng);
                   return flipout_apply(v[0], v[1], v[2], noise, [](Var x, Var k) { return conv2d(x, k, 1); });
                 }});
  return ops;
}

}  // namespace rbnn::check

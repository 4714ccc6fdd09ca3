#include <gtest/gtest.h>

#include "rbnn/layers.hpp"
#include "rbnn/model.hpp"
#include "rbnn/rng.hpp"
#include "rbnn/training.hpp"

using namespace rbnn;

namespace {

double center_tap(const Tensor& k, std::size_t filt) {
  const std::size_t kh = k.dim(2), kw = k.dim(3);
  return k[filt * kh * kw + (kh / 2) * kw + kw / 2];
}

double off_center_sum(const Tensor& k, std::size_t filt) {
  const std::size_t kh = k.dim(2), kw = k.dim(3), taps = kh * kw;
  double s = 0.0;
  for (std::size_t t = 0; t < taps; ++t) {
    if (t != (kh / 2) * kw + kw / 2) s += k[filt * taps + t];
  }
  return s;
}

}  // namespace

TEST(ConstrainedProjection, CenterAndNeighbourSum) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor k = constrained_project(rng.normal_tensor({4, 1, 5, 5}));
    for (std::size_t f = 0; f < 4; ++f) {
      EXPECT_EQ(center_tap(k, f), -1.0);
      EXPECT_NEAR(off_center_sum(k, f), 1.0, 1e-9);
    }
    EXPECT_LT(constraint_violation(k), 1e-9);
  }
}

TEST(ConstrainedProjection, IsIdempotent) {
  Rng rng(4);
  const Tensor once = constrained_project(rng.uniform_tensor({3, 1, 5, 5}, 0, 1));
  EXPECT_LT(max_abs_diff(once, constrained_project(once)), 1e-15);
}

TEST(ConstrainedProjection, ZeroNeighbourSumFallsBackToUniform) {
  Tensor k({1, 1, 3, 3});
  k[0] = 1.0;
  k[8] = -1.0;  // off-center taps cancel
  const Tensor p = constrained_project(k);
  for (std::size_t t = 0; t < 9; ++t) EXPECT_DOUBLE_EQ(p[t], t == 4 ? -1.0 : 1.0 / 8.0);
}

TEST(ConstrainedProjection, EvenKernelRejected) {
  EXPECT_THROW(constrained_project(Tensor({1, 1, 4, 4})), ShapeError);
}

TEST(ConstrainedProjection, HoldsAfterEveryOptimizerStep) {
  // A few Adam steps on a model with a constrained first layer.
  Rng rng(5);
  Model model = build(ModelSpec::desk_default(), ModelMode::Baseline, 11);
  LabeledSet data{rng.uniform_tensor({16, 1, 64, 64}, 0, 1), std::vector<int>(16)};
  for (std::size_t i = 0; i < 16; ++i) data.labels[i] = static_cast<int>(i % 2);
  TrainConfig cfg;
  cfg.max_iterations = 20;
  cfg.batch_size = 8;
  cfg.validation_interval = 20;
  std::size_t steps = 0;
  train(model, data, data, cfg, [&](const StepInfo& s) {
    ++steps;
    EXPECT_LT(constraint_violation(s.model.constrained_kernel()), 1e-9);
    EXPECT_EQ(center_tap(s.model.constrained_kernel(), 0), -1.0);
  });
  EXPECT_EQ(steps, 20u);
}

TEST(Activation, ApplyByKind) {
  Tape tape;
  Var x = tape.constant(Tensor({2}, {-2, 3}));
  EXPECT_EQ(apply_activation(Activation::Relu, x).value(), Tensor({2}, {0, 3}));
  EXPECT_NEAR(apply_activation(Activation::Tanh, x).value()[0], std::tanh(-2.0), 1e-15);
}

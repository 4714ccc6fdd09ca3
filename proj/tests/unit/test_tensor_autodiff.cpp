#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "gradcheck.hpp"
#include "rbnn/autodiff.hpp"

using namespace rbnn;

namespace {

/// Straight-line reference convolution with TF-style padding, written
/// independently of the im2col and direct paths.
Tensor reference_conv(const Tensor& x, const Tensor& k, std::size_t stride, Padding pad) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t f = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  std::size_t ho, wo, pt = 0, pl = 0;
  if (pad == Padding::Valid) {
    ho = (h - kh) / stride + 1;
    wo = (w - kw) / stride + 1;
  } else {
    ho = (h + stride - 1) / stride;
    wo = (w + stride - 1) / stride;
    const std::size_t ph = std::max<long>(0, static_cast<long>((ho - 1) * stride + kh) - static_cast<long>(h));
    const std::size_t pw = std::max<long>(0, static_cast<long>((wo - 1) * stride + kw) - static_cast<long>(w));
    pt = ph / 2;
    pl = pw / 2;
  }
  Tensor out({n, f, ho, wo});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < f; ++o)
      for (std::size_t y = 0; y < ho; ++y)
        for (std::size_t xo = 0; xo < wo; ++xo) {
          double acc = 0.0;
          for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const long sy = static_cast<long>(y * stride + i) - static_cast<long>(pt);
                const long sx = static_cast<long>(xo * stride + j) - static_cast<long>(pl);
                if (sy < 0 || sx < 0 || sy >= static_cast<long>(h) || sx >= static_cast<long>(w)) continue;
                acc += x[((b * c + ci) * h + sy) * w + sx] * k[((o * c + ci) * kh + i) * kw + j];
              }
          out[((b * f + o) * ho + y) * wo + xo] = acc;
        }
  return out;
}

}  // namespace

TEST(Tensor, ShapeAndIndexing) {
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t[4], 5.0);
  EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_THROW(t.reshaped({4, 2}), ShapeError);
  EXPECT_EQ(t.reshaped({3, 2}).dim(0), 3u);
  EXPECT_DOUBLE_EQ(Tensor::scalar(2.5).item(), 2.5);
  EXPECT_THROW(t.item(), ShapeError);
}

TEST(Autodiff, GradientOfUnusedInputIsZero) {
  Tape tape;
  Var a = tape.parameter(Tensor({2}, {1, 2}));
  Var b = tape.parameter(Tensor({2}, {3, 4}));
  tape.backward(sum(a));
  EXPECT_EQ(tape.grad(b), Tensor({2}, {0, 0}));
  EXPECT_EQ(tape.grad(a), Tensor({2}, {1, 1}));
}

TEST(Autodiff, BackwardNeedsScalar) {
  Tape tape;
  Var a = tape.parameter(Tensor({2}, {1, 2}));
  EXPECT_THROW(tape.backward(a), ShapeError);
}

TEST(Autodiff, NonFiniteValuesAreRejected) {
  Tape tape;
  Var a = tape.parameter(Tensor({1}, {std::numeric_limits<double>::max()}));
  EXPECT_THROW(scale(a, 10.0), NumericError);
  EXPECT_THROW(tape.constant(Tensor({1}, {std::nan("")})), NumericError);
}

TEST(Autodiff, ShapeMismatchIsAnError) {
  Tape tape;
  Var a = tape.constant(Tensor({2, 3}));
  Var b = tape.constant(Tensor({3, 2}));
  EXPECT_THROW(add(a, b), ShapeError);
  EXPECT_THROW(matmul(a, a), ShapeError);
}

TEST(Autodiff, MixingTapesIsAnError) {
  Tape t1, t2;
  Var a = t1.constant(Tensor({1}, {1}));
  Var b = t2.constant(Tensor({1}, {1}));
  EXPECT_THROW(add(a, b), std::logic_error);
}

TEST(Autodiff, ReusedVariableAccumulatesGradient) {
  Tape tape;
  Var x = tape.parameter(Tensor({1}, {3.0}));
  tape.backward(sum(mul(x, x)));
  EXPECT_DOUBLE_EQ(tape.grad(x)[0], 6.0);
}

TEST(Autodiff, FiniteDifferenceEveryOp) {
  Rng rng(2024);
  for (const auto& op : check::differentiable_ops()) {
    double worst = 0.0;
    for (int instance = 0; instance < 20; ++instance) {
      worst = std::max(worst, check::gradient_check(op.fn, op.make_inputs(rng), rng));
    }
    EXPECT_LT(worst, 1e-5) << op.name;
  }
}

TEST(Conv2d, DeltaKernelIsIdentity) {
  Rng rng(1);
  Tape tape;
  const Tensor x = rng.normal_tensor({2, 1, 5, 5});
  Tensor k({1, 1, 3, 3});
  k[4] = 1.0;
  const Tensor y = conv2d(tape.constant(x), tape.constant(k), 1, Padding::Same).value();
  EXPECT_EQ(max_abs_diff(x, y), 0.0);
}

TEST(Conv2d, MatchesReferenceOnAllPaths) {
  Rng rng(5);
  struct Case {
    Shape x, k;
    std::size_t stride;
    Padding pad;
  };
  const std::vector<Case> cases = {{{2, 1, 9, 8}, {3, 1, 5, 5}, 1, Padding::Valid},  // direct path
                                   {{2, 3, 9, 8}, {4, 3, 3, 3}, 2, Padding::Valid},
                                   {{1, 2, 7, 7}, {5, 2, 3, 3}, 1, Padding::Same},
                                   {{1, 2, 8, 7}, {2, 2, 3, 3}, 2, Padding::Same},
                                   {{1, 16, 6, 6}, {2, 16, 3, 3}, 1, Padding::Valid}};
  for (const auto& c : cases) {
    Tape tape;
    const Tensor x = rng.normal_tensor(c.x);
    const Tensor k = rng.normal_tensor(c.k);
    const Tensor got = conv2d(tape.constant(x), tape.constant(k), c.stride, c.pad).value();
    const Tensor want = reference_conv(x, k, c.stride, c.pad);
    ASSERT_EQ(got.shape(), want.shape());
    EXPECT_LT(max_abs_diff(got, want), 1e-12);
  }
}

TEST(Conv2d, OutputShapes) {
  Tape tape;
  Var x = tape.constant(Tensor({1, 1, 64, 64}));
  EXPECT_EQ(conv2d(x, tape.constant(Tensor({3, 1, 5, 5})), 1).shape(), (Shape{1, 3, 60, 60}));
  EXPECT_EQ(conv2d(x, tape.constant(Tensor({3, 1, 5, 5})), 2, Padding::Same).shape(), (Shape{1, 3, 32, 32}));
  EXPECT_THROW(conv2d(x, tape.constant(Tensor({3, 2, 5, 5}))), ShapeError);
  EXPECT_THROW(conv2d(x, tape.constant(Tensor({3, 1, 65, 65}))), ShapeError);
}

TEST(Dense, IdentityAndBias) {
  Tape tape;
  Tensor eye({3, 3});
  for (int i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
  const Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(dense(tape.constant(x), tape.constant(eye), tape.constant(Tensor({3}))).value(), x);
  const Tensor b({3}, {7, 8, 9});
  const Tensor y = dense(tape.constant(x), tape.constant(Tensor({3, 3})), tape.constant(b)).value();
  EXPECT_EQ(y, Tensor({2, 3}, {7, 8, 9, 7, 8, 9}));
}

TEST(MaxPool, ForwardAndTieRouting) {
  Tape tape;
  Var x = tape.parameter(Tensor({1, 1, 2, 4}, {1, 5, 2, 2, 3, 4, 2, 2}));
  Var y = maxpool2d(x, 2, 2);
  EXPECT_EQ(y.value(), Tensor({1, 1, 1, 2}, {5, 2}));
  tape.backward(sum(y));
  // The all-equal window routes its gradient to the first element only.
  EXPECT_EQ(tape.grad(x), Tensor({1, 1, 2, 4}, {0, 1, 1, 0, 0, 0, 0, 0}));
}

TEST(SoftmaxCrossEntropy, KnownValuesAndStability) {
  Tape tape;
  const std::vector<int> labels = {0, 1};
  Var l = tape.constant(Tensor({2, 2}, {0, 0, 1000, -1000}));
  const double loss = softmax_cross_entropy(l, labels).value().item();
  EXPECT_NEAR(loss, 0.5 * (std::log(2.0) + 2000.0), 1e-9);
  const std::vector<int> bad = {0, 2};
  EXPECT_THROW(softmax_cross_entropy(l, bad), std::out_of_range);
  const Tensor p = softmax_rows(Tensor({1, 3}, {1e4, 1e4, 0}));
  EXPECT_NEAR(p[0], 0.5, 1e-15);
  EXPECT_EQ(p[2], 0.0);
}

TEST(Activations, Values) {
  Tape tape;
  Var x = tape.constant(Tensor({3}, {-1, 0, 2}));
  EXPECT_EQ(relu(x).value(), Tensor({3}, {0, 0, 2}));
  EXPECT_NEAR(rbnn::tanh(x).value()[2], std::tanh(2.0), 1e-15);
  EXPECT_NEAR(softplus(x).value()[1], std::log(2.0), 1e-15);
  EXPECT_NEAR(softplus(-800.0), 0.0, 1e-300);
  EXPECT_NEAR(softplus(800.0), 800.0, 1e-12);
}

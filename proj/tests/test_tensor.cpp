#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "fgr/gradcheck.hpp"
#include "fgr/rng.hpp"
#include "fgr/tensor.hpp"

using fgr::Shape;
using fgr::Tape;
using fgr::TapeScope;
using fgr::Tensor;

namespace {

// Independent sliding-window convolution, used as the oracle for conv2d.
std::vector<double> conv_reference(const Tensor<double>& in,
                                   const Tensor<double>& w,
                                   const Tensor<double>& b, int stride,
                                   int pad) {
  const int64_t B = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
  const int64_t O = w.dim(0), K = w.dim(2);
  const int64_t Ho = (H + 2 * pad - K) / stride + 1;
  const int64_t Wo = (W + 2 * pad - K) / stride + 1;
  std::vector<double> out(static_cast<size_t>(B * O * Ho * Wo), 0.0);
  for (int64_t n = 0; n < B; ++n)
    for (int64_t o = 0; o < O; ++o)
      for (int64_t y = 0; y < Ho; ++y)
        for (int64_t x = 0; x < Wo; ++x) {
          double acc = b.data()[static_cast<size_t>(o)];
          for (int64_t c = 0; c < C; ++c)
            for (int64_t ky = 0; ky < K; ++ky)
              for (int64_t kx = 0; kx < K; ++kx) {
                const int64_t iy = y * stride + ky - pad;
                const int64_t ix = x * stride + kx - pad;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += in.at({n, c, iy, ix}) * w.at({o, c, ky, kx});
              }
          out[static_cast<size_t>(((n * O + o) * Ho + y) * Wo + x)] = acc;
        }
  return out;
}

Tensor<double> zeros_bias(int64_t n) { return Tensor<double>(Shape{n}); }

}  // namespace

TEST(Conv2d, ScalingKernel) {
  Tensor<double> in(Shape{1, 1, 3, 3}, 1.0);
  Tensor<double> w(Shape{1, 1, 1, 1}, std::vector<double>{2.0});
  Tensor<double> out = fgr::conv2d(in, w, zeros_bias(1), 1, 0);
  EXPECT_EQ(out.shape(), (Shape{1, 1, 3, 3}));
  for (double v : out.data()) EXPECT_DOUBLE_EQ(v, 2.0);
}

TEST(Conv2d, SlidingWindowSum) {
  Tensor<double> in(Shape{1, 1, 3, 3},
                    std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor<double> w(Shape{1, 1, 2, 2}, 1.0);
  Tensor<double> out = fgr::conv2d(in, w, zeros_bias(1), 1, 0);
  const std::vector<double> expected{12, 16, 24, 28};
  EXPECT_EQ(out.data(), expected);
}

TEST(Conv2d, SamePaddingPreservesSize) {
  fgr::Rng rng(7);
  Tensor<double> in = fgr::random_tensor<double>(Shape{1, 2, 64, 64}, rng);
  Tensor<double> w = fgr::random_tensor<double>(Shape{3, 2, 3, 3}, rng);
  Tensor<double> out = fgr::conv2d(in, w, zeros_bias(3), 1, 1);
  EXPECT_EQ(out.shape(), (Shape{1, 3, 64, 64}));
}

TEST(Conv2d, MatchesReferenceOnRandomInput) {
  fgr::Rng rng(11);
  for (int stride : {1, 2}) {
    for (int pad : {0, 1}) {
      Tensor<double> in = fgr::random_tensor<double>(Shape{2, 3, 7, 6}, rng);
      Tensor<double> w = fgr::random_tensor<double>(Shape{4, 3, 3, 3}, rng);
      Tensor<double> b = fgr::random_tensor<double>(Shape{4}, rng);
      Tensor<double> out = fgr::conv2d(in, w, b, stride, pad);
      const std::vector<double> ref = conv_reference(in, w, b, stride, pad);
      ASSERT_EQ(out.data().size(), ref.size());
      for (size_t i = 0; i < ref.size(); ++i)
        EXPECT_NEAR(out.data()[i], ref[i], 1e-12);
    }
  }
}

TEST(Conv2d, ChannelMismatchNamesAxis) {
  Tensor<double> in(Shape{1, 2, 4, 4});
  Tensor<double> w(Shape{1, 3, 3, 3});
  try {
    fgr::conv2d(in, w, zeros_bias(1), 1, 1);
    FAIL() << "expected ShapeError";
  } catch (const fgr::ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("channel"), std::string::npos);
  }
}

TEST(Conv2d, KernelLargerThanPaddedInputRejected) {
  Tensor<double> in(Shape{1, 1, 2, 2});
  Tensor<double> w(Shape{1, 1, 3, 3});
  EXPECT_THROW(fgr::conv2d(in, w, zeros_bias(1), 1, 0), fgr::ShapeError);
  EXPECT_NO_THROW(fgr::conv2d(in, w, zeros_bias(1), 1, 1));
}

TEST(MaxPool, Basic2x2) {
  Tensor<double> in(Shape{1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  Tensor<double> out = fgr::maxpool2d(in, 2, 2);
  EXPECT_EQ(out.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(out.data()[0], 4.0);
}

TEST(MaxPool, SpatialHalving480) {
  Tensor<double> in(Shape{1, 1, 480, 480}, 0.5);
  Tensor<double> out = fgr::maxpool2d(in, 2, 2);
  EXPECT_EQ(out.dim(2), 240);
  EXPECT_EQ(out.dim(3), 240);
}

TEST(MaxPool, AllNegativeKeepsLeastNegative) {
  Tensor<double> in(Shape{1, 1, 2, 2}, std::vector<double>{-4, -2, -3, -9});
  Tensor<double> out = fgr::maxpool2d(in, 2, 2);
  EXPECT_DOUBLE_EQ(out.data()[0], -2.0);
}

TEST(MaxPool, KernelLargerThanInputRejected) {
  Tensor<double> in(Shape{1, 1, 2, 2});
  EXPECT_THROW(fgr::maxpool2d(in, 3, 1), fgr::ShapeError);
}

TEST(MaxPool, GradientRoutesToFirstArgmax) {
  Tensor<double> in(Shape{1, 1, 2, 2}, std::vector<double>{5, 5, 1, 5});
  in.set_requires_grad(true);
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    Tensor<double> loss = fgr::sum(fgr::maxpool2d(in, 2, 2));
    tape.backward(loss);
  }
  const std::vector<double> expected{1, 0, 0, 0};  // first max in scan order
  EXPECT_EQ(in.grad(), expected);
}

TEST(BilinearUpsample, ConstantField) {
  Tensor<double> in(Shape{1, 1, 1, 1}, std::vector<double>{5.0});
  Tensor<double> out = fgr::bilinear_upsample(in, 2);
  EXPECT_EQ(out.shape(), (Shape{1, 1, 2, 2}));
  for (double v : out.data()) EXPECT_DOUBLE_EQ(v, 5.0);
}

TEST(BilinearUpsample, FeatureMap15To30) {
  Tensor<double> in(Shape{1, 4, 15, 15}, 1.0);
  Tensor<double> out = fgr::bilinear_upsample(in, 2);
  EXPECT_EQ(out.dim(2), 30);
  EXPECT_EQ(out.dim(3), 30);
}

TEST(BilinearUpsample, HalfPixelCenterRule) {
  // hand evaluation of (i + 0.5)/2 - 0.5 sampling with border clamp
  Tensor<double> in(Shape{1, 1, 2, 2}, std::vector<double>{0, 1, 0, 1});
  Tensor<double> out = fgr::bilinear_upsample(in, 2);
  const std::vector<double> row{0.0, 0.25, 0.75, 1.0};
  ASSERT_EQ(out.shape(), (Shape{1, 1, 4, 4}));
  for (int64_t y = 0; y < 4; ++y)
    for (int64_t x = 0; x < 4; ++x)
      EXPECT_DOUBLE_EQ(out.at({0, 0, y, x}), row[static_cast<size_t>(x)]);
}

TEST(Relu, ClampsNegatives) {
  Tensor<double> in(Shape{3}, std::vector<double>{-1, 0, 2});
  Tensor<double> out = fgr::relu(in);
  const std::vector<double> expected{0, 0, 2};
  EXPECT_EQ(out.data(), expected);
}

TEST(Relu, GradientMaskIsPositiveIndicator) {
  Tensor<double> in(Shape{2}, std::vector<double>{-1, 2});
  in.set_requires_grad(true);
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    tape.backward(fgr::sum(fgr::relu(in)));
  }
  const std::vector<double> expected{0, 1};
  EXPECT_EQ(in.grad(), expected);
}

TEST(Relu, AllNegativeGivesZeroOutputAndZeroGradient) {
  Tensor<double> in(Shape{4}, std::vector<double>{-3, -1, -2, -5});
  in.set_requires_grad(true);
  Tape<double> tape;
  Tensor<double> out;
  {
    TapeScope<double> scope(tape);
    out = fgr::relu(in);
    tape.backward(fgr::sum(out));
  }
  for (double v : out.data()) EXPECT_DOUBLE_EQ(v, 0.0);
  for (double g : in.grad()) EXPECT_DOUBLE_EQ(g, 0.0);
}

TEST(Linear, IdentityWeight) {
  Tensor<double> in(Shape{2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  Tensor<double> w(Shape{3, 3});
  for (int i = 0; i < 3; ++i) w.data()[static_cast<size_t>(i * 3 + i)] = 1.0;
  Tensor<double> out = fgr::linear(in, w, zeros_bias(3));
  EXPECT_EQ(out.data(), in.data());
}

TEST(Linear, ClassifierStageShape) {
  Tensor<double> in(Shape{1, 512}, 0.1);
  Tensor<double> w(Shape{512, 256}, 0.01);
  Tensor<double> out = fgr::linear(in, w, zeros_bias(256));
  EXPECT_EQ(out.shape(), (Shape{1, 256}));
}

TEST(Linear, HandComputedAffineMap) {
  Tensor<double> in(Shape{1, 2}, std::vector<double>{1, 2});
  Tensor<double> w(Shape{2, 2}, std::vector<double>{1, 0, 0, 3});
  Tensor<double> b(Shape{2}, std::vector<double>{1, 1});
  Tensor<double> out = fgr::linear(in, w, b);
  const std::vector<double> expected{2, 7};
  EXPECT_EQ(out.data(), expected);
}

TEST(Linear, InnerDimensionMismatchRejected) {
  Tensor<double> in(Shape{1, 3});
  Tensor<double> w(Shape{4, 2});
  EXPECT_THROW(fgr::linear(in, w, zeros_bias(2)), fgr::ShapeError);
}

TEST(ConcatChannels, WidthsAdd) {
  Tensor<double> a(Shape{1, 512, 2, 2}, 1.0);
  Tensor<double> b(Shape{1, 256, 2, 2}, 2.0);
  Tensor<double> out = fgr::concat_channels(a, b);
  EXPECT_EQ(out.shape(), (Shape{1, 768, 2, 2}));
}

TEST(ConcatChannels, EmptySecondOperandIsIdentity) {
  fgr::Rng rng(3);
  Tensor<double> a = fgr::random_tensor<double>(Shape{2, 3, 4, 4}, rng);
  Tensor<double> empty(Shape{2, 0, 4, 4});
  Tensor<double> out = fgr::concat_channels(a, empty);
  EXPECT_EQ(out.shape(), a.shape());
  EXPECT_EQ(out.data(), a.data());
}

TEST(ConcatChannels, PreservesOrder) {
  fgr::Rng rng(4);
  Tensor<double> a = fgr::random_tensor<double>(Shape{2, 2, 3, 3}, rng);
  Tensor<double> b = fgr::random_tensor<double>(Shape{2, 2, 3, 3}, rng);
  Tensor<double> out = fgr::concat_channels(a, b);
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t c = 0; c < 2; ++c)
      for (int64_t y = 0; y < 3; ++y)
        for (int64_t x = 0; x < 3; ++x) {
          EXPECT_DOUBLE_EQ(out.at({n, c, y, x}), a.at({n, c, y, x}));
          EXPECT_DOUBLE_EQ(out.at({n, c + 2, y, x}), b.at({n, c, y, x}));
        }
}

TEST(ConcatChannels, SpatialMismatchNamesAxis) {
  Tensor<double> a(Shape{1, 2, 4, 4});
  Tensor<double> b(Shape{1, 2, 5, 4});
  try {
    fgr::concat_channels(a, b);
    FAIL() << "expected ShapeError";
  } catch (const fgr::ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("height"), std::string::npos);
  }
}

TEST(Backward, SumOfSquares) {
  Tensor<double> x(Shape{3}, std::vector<double>{1, -2, 3});
  x.set_requires_grad(true);
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    tape.backward(fgr::sum(fgr::mul(x, x)));
  }
  const std::vector<double> expected{2, -4, 6};
  EXPECT_EQ(x.grad(), expected);
}

TEST(Backward, NonScalarLossRejected) {
  Tensor<double> x(Shape{3}, 1.0);
  x.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  Tensor<double> y = fgr::mul(x, x);
  EXPECT_THROW(tape.backward(y), fgr::ContractError);
}

TEST(Backward, LossMustComeFromTape) {
  Tensor<double> x = Tensor<double>::scalar(1.0, true);
  Tape<double> tape;
  EXPECT_THROW(tape.backward(x), fgr::ContractError);
}

TEST(Backward, FanOutAccumulates) {
  Tensor<double> x(Shape{2}, std::vector<double>{1, 2});
  x.set_requires_grad(true);
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    tape.backward(fgr::sum(fgr::add(x, x)));
  }
  const std::vector<double> expected{2, 2};
  EXPECT_EQ(x.grad(), expected);
}

TEST(Backward, IdempotentAfterGradReset) {
  fgr::Rng rng(5);
  Tensor<double> x = fgr::random_tensor<double>(Shape{1, 2, 6, 6}, rng);
  Tensor<double> w = fgr::random_tensor<double>(Shape{3, 2, 3, 3}, rng);
  x.set_requires_grad(true);
  w.set_requires_grad(true);
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    Tensor<double> y = fgr::conv2d(x, w, zeros_bias(3), 1, 1);
    Tensor<double> loss = fgr::mean(fgr::mul(y, y));
    tape.backward(loss);
  }
  const std::vector<double> gx = x.grad();
  const std::vector<double> gw = w.grad();
  x.reset_grad();
  w.reset_grad();
  // replaying the same tape after a grad reset reproduces the gradients
  Tape<double> tape2;
  {
    TapeScope<double> scope(tape2);
    Tensor<double> y = fgr::conv2d(x, w, zeros_bias(3), 1, 1);
    Tensor<double> loss = fgr::mean(fgr::mul(y, y));
    tape2.backward(loss);
  }
  EXPECT_EQ(x.grad(), gx);
  EXPECT_EQ(w.grad(), gw);
}

TEST(Backward, LeafFilterRestrictsAccumulation) {
  fgr::Rng rng(6);
  Tensor<double> x = fgr::random_tensor<double>(Shape{1, 1, 4, 4}, rng);
  Tensor<double> w = fgr::random_tensor<double>(Shape{2, 1, 3, 3}, rng);
  x.set_requires_grad(true);
  w.set_requires_grad(true);
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    Tensor<double> y = fgr::conv2d(x, w, zeros_bias(2), 1, 1);
    tape.backward(fgr::sum(y), {x});
  }
  EXPECT_TRUE(x.has_grad());
  EXPECT_FALSE(w.has_grad());
}

TEST(Tape, RecordsOpsAndCounts) {
  Tensor<double> x(Shape{1, 1, 4, 4}, 1.0);
  Tensor<double> w(Shape{1, 1, 3, 3}, 0.5);
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    Tensor<double> y = fgr::relu(fgr::conv2d(x, w, zeros_bias(1), 1, 1));
    y = fgr::maxpool2d(y, 2, 2);
  }
  EXPECT_EQ(tape.size(), 3u);
  EXPECT_EQ(tape.count("conv2d"), 1u);
  EXPECT_EQ(tape.count("relu"), 1u);
  EXPECT_EQ(tape.count("maxpool2d"), 1u);
}

TEST(Tape, NoRecordingWithoutScope) {
  Tensor<double> x(Shape{2}, std::vector<double>{1, 2});
  Tensor<double> y = fgr::relu(x);
  EXPECT_FALSE(y.from_op());
}

// Shape algebra across random valid settings.
TEST(Properties, ShapeAlgebra) {
  fgr::Rng rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    const int64_t B = 1 + rng.uniform_int(2);
    const int64_t C = 1 + rng.uniform_int(4);
    const int64_t H = 3 + rng.uniform_int(10);
    const int64_t W = 3 + rng.uniform_int(10);
    const int64_t O = 1 + rng.uniform_int(4);
    const int k = 1 + rng.uniform_int(3);
    const int s = 1 + rng.uniform_int(2);
    const int p = rng.uniform_int(2);
    if (k > H + 2 * p || k > W + 2 * p) continue;
    Tensor<double> in = fgr::random_tensor<double>(Shape{B, C, H, W}, rng);
    Tensor<double> w = fgr::random_tensor<double>(Shape{O, C, k, k}, rng);
    Tensor<double> out = fgr::conv2d(in, w, zeros_bias(O), s, p);
    EXPECT_EQ(out.dim(2), (H + 2 * p - k) / s + 1);
    EXPECT_EQ(out.dim(3), (W + 2 * p - k) / s + 1);

    const int pk = 1 + rng.uniform_int(static_cast<int>(std::min(H, W)) - 1);
    const int ps = 1 + rng.uniform_int(2);
    Tensor<double> pooled = fgr::maxpool2d(in, pk, ps);
    EXPECT_EQ(pooled.dim(2), (H - pk) / ps + 1);
    EXPECT_EQ(pooled.dim(3), (W - pk) / ps + 1);

    const int f = 1 + rng.uniform_int(3);
    Tensor<double> up = fgr::bilinear_upsample(in, f);
    EXPECT_EQ(up.dim(2), H * f);
    EXPECT_EQ(up.dim(3), W * f);

    const int64_t C2 = rng.uniform_int(4);
    Tensor<double> other = fgr::random_tensor<double>(Shape{B, C2, H, W}, rng);
    EXPECT_EQ(fgr::concat_channels(in, other).dim(1), C + C2);
  }
}

// f(a*x + b*y) == a*f(x) + b*f(y) for the linear maps (zero bias).
TEST(Properties, LinearityOfLinearMaps) {
  fgr::Rng rng(13);
  const double alpha = 0.7, beta = -1.3;
  const auto expect_close = [](const Tensor<double>& u, const Tensor<double>& v) {
    ASSERT_EQ(u.shape(), v.shape());
    for (int64_t i = 0; i < u.size(); ++i) {
      const double a = u.data()[static_cast<size_t>(i)];
      const double b = v.data()[static_cast<size_t>(i)];
      EXPECT_LE(std::fabs(a - b), 1e-6 * std::max({std::fabs(a), std::fabs(b), 1.0}));
    }
  };
  const auto mix = [&](const Tensor<double>& x, const Tensor<double>& y) {
    return fgr::add(fgr::mul_scalar(x, alpha), fgr::mul_scalar(y, beta));
  };

  Tensor<double> x = fgr::random_tensor<double>(Shape{1, 2, 8, 8}, rng);
  Tensor<double> y = fgr::random_tensor<double>(Shape{1, 2, 8, 8}, rng);
  Tensor<double> w = fgr::random_tensor<double>(Shape{3, 2, 3, 3}, rng);
  expect_close(fgr::conv2d(mix(x, y), w, zeros_bias(3), 1, 1),
               mix(fgr::conv2d(x, w, zeros_bias(3), 1, 1),
                   fgr::conv2d(y, w, zeros_bias(3), 1, 1)));

  expect_close(fgr::bilinear_upsample(mix(x, y), 2),
               mix(fgr::bilinear_upsample(x, 2), fgr::bilinear_upsample(y, 2)));

  Tensor<double> fx = fgr::random_tensor<double>(Shape{2, 6}, rng);
  Tensor<double> fy = fgr::random_tensor<double>(Shape{2, 6}, rng);
  Tensor<double> lw = fgr::random_tensor<double>(Shape{6, 4}, rng);
  expect_close(fgr::linear(mix(fx, fy), lw, zeros_bias(4)),
               mix(fgr::linear(fx, lw, zeros_bias(4)),
                   fgr::linear(fy, lw, zeros_bias(4))));

  Tensor<double> x2 = fgr::random_tensor<double>(Shape{1, 3, 8, 8}, rng);
  Tensor<double> y2 = fgr::random_tensor<double>(Shape{1, 3, 8, 8}, rng);
  expect_close(fgr::concat_channels(mix(x, y), mix(x2, y2)),
               mix(fgr::concat_channels(x, x2), fgr::concat_channels(y, y2)));
}

TEST(Properties, ForwardOpsProduceFiniteValues) {
  fgr::Rng rng(14);
  Tensor<float> in = fgr::random_tensor<float>(Shape{2, 3, 9, 9}, rng, -3.0, 3.0);
  Tensor<float> w = fgr::random_tensor<float>(Shape{4, 3, 3, 3}, rng, -2.0, 2.0);
  Tensor<float> b = fgr::random_tensor<float>(Shape{4}, rng);
  Tensor<float> y = fgr::conv2d(in, w, b, 1, 1);
  EXPECT_TRUE(y.all_finite());
  EXPECT_TRUE(fgr::maxpool2d(y, 2, 2).all_finite());
  EXPECT_TRUE(fgr::bilinear_upsample(y, 3).all_finite());
  EXPECT_TRUE(fgr::sigmoid(y).all_finite());
}

TEST(Properties, DeterministicAcrossRuns) {
  const auto run = [] {
    fgr::Rng rng(99);
    Tensor<float> in = fgr::random_tensor<float>(Shape{2, 3, 8, 8}, rng);
    Tensor<float> w = fgr::random_tensor<float>(Shape{4, 3, 3, 3}, rng);
    Tensor<float> b = fgr::random_tensor<float>(Shape{4}, rng);
    return fgr::conv2d(fgr::bilinear_upsample(in, 2), w, b, 2, 1).data();
  };
  EXPECT_EQ(run(), run());
}

TEST(Reshape, RoundTripGradient) {
  Tensor<double> x(Shape{2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  x.set_requires_grad(true);
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    Tensor<double> y = fgr::reshape(x, Shape{6});
    tape.backward(fgr::sum(fgr::mul(y, y)));
  }
  const std::vector<double> expected{2, 4, 6, 8, 10, 12};
  EXPECT_EQ(x.grad(), expected);
  EXPECT_THROW(fgr::reshape(x, Shape{5}), fgr::ShapeError);
}

TEST(GlobalAvgPool, ConstantPlanePoolsToConstant) {
  Tensor<double> x(Shape{2, 3, 4, 4}, 0.25);
  Tensor<double> out = fgr::global_avg_pool(x);
  EXPECT_EQ(out.shape(), (Shape{2, 3}));
  for (double v : out.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

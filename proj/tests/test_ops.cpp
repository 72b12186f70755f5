#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "sfl/ops.hpp"
#include "sfl/optim.hpp"
#include "support/gradcheck.hpp"

using namespace sfl;

namespace {

Tensor iota(const Shape& shape, double start = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  std::iota(v.begin(), v.end(), start);
  return Tensor::from_vector(shape, v).to(DType::f32);
}

double dot(const Tensor& a, const Tensor& b) {
  auto x = a.to_doubles(), y = b.to_doubles();
  return std::inner_product(x.begin(), x.end(), y.begin(), 0.0);
}

}  // namespace

TEST(Conv2d, ScalingKernel) {
  auto x = iota({1, 1, 3, 3});
  auto y = conv2d(x, Tensor::full({1, 1, 1, 1}, 2.0), {});
  auto v = y.to_doubles();
  for (int i = 0; i < 9; ++i) EXPECT_FLOAT_EQ(v[i], 2.0 * (i + 1));
}

TEST(Conv2d, OnesKernelCountsOverlap) {
  auto y = conv2d(Tensor::full({1, 1, 3, 3}, 1.0), Tensor::full({1, 1, 3, 3}, 1.0), {}, {1, 1, 1});
  EXPECT_EQ(y.to_doubles(), (std::vector<double>{4, 6, 4, 6, 9, 6, 4, 6, 4}));
}

TEST(Conv2d, OutputShape) {
  auto y = conv2d(Tensor::zeros({2, 3, 64, 64}), Tensor::zeros({8, 3, 3, 3}), Tensor::zeros({8}), {1, 1, 1});
  EXPECT_EQ(y.shape(), (Shape{2, 8, 64, 64}));
  EXPECT_EQ(conv_out_extent(64, 3, {2, 1, 1}), 32);
  EXPECT_EQ(conv_out_extent(7, 3, {1, 2, 2}), 7);
}

TEST(Conv2d, RejectsChannelMismatch) {
  EXPECT_THROW(conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 3, 3, 3}), {}), ContractError);
  EXPECT_THROW(conv2d(Tensor::zeros({1, 2, 4}), Tensor::zeros({1, 2, 3, 3}), {}), ContractError);
}

TEST(ConvTranspose2d, PlacesInputsOnStrideGrid) {
  auto x = Tensor::from_vector({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
  auto w = Tensor::from_vector({1, 1, 2, 2}, std::vector<float>{1, 0, 0, 0});
  auto y = conv_transpose2d(x, w, {}, 2, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
  EXPECT_EQ(y.to_doubles(), (std::vector<double>{1, 0, 2, 0, 0, 0, 0, 0, 3, 0, 4, 0, 0, 0, 0, 0}));
}

TEST(ConvTranspose2d, IsAdjointOfConv) {
  std::mt19937_64 rng(11);
  for (auto [k, s, p] : {std::tuple{3, 1, 1}, {3, 1, 0}, {2, 2, 0}, {4, 2, 1}}) {
    auto x = sfl::testing::random_tensor({2, 3, 8, 8}, rng);
    auto w = sfl::testing::random_tensor({5, 3, k, k}, rng);
    auto cx = conv2d(x, w, {}, {s, p, 1});
    auto y = sfl::testing::random_tensor(cx.shape(), rng);
    auto ty = conv_transpose2d(y, w, {}, s, p);
    ASSERT_EQ(ty.shape(), x.shape());
    EXPECT_NEAR(dot(cx, y), dot(x, ty), 1e-9 * std::abs(dot(cx, y)) + 1e-9);
  }
}

TEST(ConvTranspose2d, OutputShape) {
  auto y = conv_transpose2d(Tensor::zeros({1, 16, 30, 30}), Tensor::zeros({16, 8, 2, 2}), Tensor::zeros({8}), 2, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 8, 60, 60}));
}

TEST(MaxPool, PicksMaxAndRecordsOffset) {
  auto r = maxpool2d(Tensor::from_vector({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4}));
  EXPECT_EQ(r.values.item(), 4.0);
  EXPECT_EQ(r.indices->offsets, (std::vector<std::int32_t>{3}));
}

TEST(MaxPool, TiesTakeLowestOffset) {
  auto r = maxpool2d(Tensor::full({1, 1, 4, 4}, 7.0));
  EXPECT_EQ(r.indices->offsets, (std::vector<std::int32_t>{0, 2, 8, 10}));
  for (double v : r.values.to_doubles()) EXPECT_EQ(v, 7.0);
}

TEST(MaxPool, Shapes) {
  auto r = maxpool2d(Tensor::zeros({1, 4, 32, 32}));
  EXPECT_EQ(r.values.shape(), (Shape{1, 4, 16, 16}));
  EXPECT_EQ(r.indices->output_shape, (Shape{1, 4, 16, 16}));
  EXPECT_EQ(r.indices->offsets.size(), 4u * 16 * 16);
  EXPECT_THROW(maxpool2d(Tensor::zeros({1, 1, 5, 4})), ContractError);
}

TEST(MaxUnpool, SingleScatter) {
  PoolIndices idx{{1, 1, 2, 2}, {1, 1, 1, 1}, {3}};
  auto y = max_unpool2d(Tensor::full({1, 1, 1, 1}, 4.0), idx, {1, 1, 2, 2});
  EXPECT_EQ(y.to_doubles(), (std::vector<double>{0, 0, 0, 4}));
}

TEST(MaxUnpool, RestoresArgmaxPositions) {
  std::mt19937_64 rng(5);
  auto x = sfl::testing::random_distinct({2, 3, 6, 6}, rng);
  auto r = maxpool2d(x);
  auto u = max_unpool2d(r.values, *r.indices, x.shape()).to_doubles();
  auto xv = x.to_doubles();
  int kept = 0;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    if (u[i] != 0.0) {
      EXPECT_EQ(u[i], xv[i]);
      ++kept;
    }
  }
  EXPECT_EQ(kept, 2 * 3 * 9);
}

TEST(BatchNorm, StandardizedInputPassesThrough) {
  auto x = Tensor::from_vector({2, 1, 1, 2}, std::vector<double>{1, -1, 1, -1});
  Tensor rm = Tensor::zeros({1}, DType::f64), rv = Tensor::full({1}, 1.0, DType::f64);
  auto y = batchnorm2d(x, Tensor::full({1}, 1.0, DType::f64), Tensor::zeros({1}, DType::f64), rm, rv, NormMode::train);
  auto v = y.to_doubles();
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(v[i], x.to_doubles()[i], 1e-5);
}

TEST(BatchNorm, ConstantChannelGivesBeta) {
  Tensor rm = Tensor::zeros({2}), rv = Tensor::full({2}, 1.0);
  auto y = batchnorm2d(Tensor::full({3, 2, 2, 2}, 5.0), Tensor::full({2}, 2.0),
                       Tensor::from_vector({2}, std::vector<float>{0.25f, -1.0f}), rm, rv, NormMode::train);
  auto v = y.to_doubles();
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(v[i], (i / 4) % 2 == 0 ? 0.25 : -1.0, 1e-6);
}

TEST(BatchNorm, MomentumOneMakesEvalMatchTrain) {
  std::mt19937_64 rng(2);
  auto x = sfl::testing::random_tensor({4, 3, 5, 5}, rng, -2.0, 3.0, DType::f32);
  auto gamma = sfl::testing::random_tensor({3}, rng, 0.5, 1.5, DType::f32);
  auto beta = sfl::testing::random_tensor({3}, rng, -1.0, 1.0, DType::f32);
  Tensor rm = Tensor::zeros({3}), rv = Tensor::full({3}, 1.0);
  auto train = batchnorm2d(x, gamma, beta, rm, rv, NormMode::train, 1.0);
  auto eval = batchnorm2d(x, gamma, beta, rm, rv, NormMode::eval, 1.0);
  EXPECT_LT(max_abs_diff(train, eval), 1e-5);
}

TEST(BatchNorm, SingleSampleBatchIsFinite) {
  Tensor rm = Tensor::zeros({1}), rv = Tensor::full({1}, 1.0);
  auto y = batchnorm2d(Tensor::full({1, 1, 1, 1}, 3.0), Tensor::full({1}, 1.0), Tensor::zeros({1}), rm, rv,
                       NormMode::train);
  EXPECT_TRUE(std::isfinite(y.item()));
}

TEST(Activation, Values) {
  auto r = relu(Tensor::from_vector({3}, std::vector<float>{-1, 0, 2}));
  EXPECT_EQ(r.to_doubles(), (std::vector<double>{0, 0, 2}));
  EXPECT_FLOAT_EQ(sigmoid(Tensor::scalar(0.0)).item(), 0.5);
  auto p = prelu(Tensor::from_vector({1, 2, 1, 1}, std::vector<float>{-2, -2}),
                 Tensor::from_vector({2}, std::vector<float>{0.5f, 0.25f}));
  EXPECT_EQ(p.to_doubles(), (std::vector<double>{-1.0, -0.5}));
}

TEST(Activation, SoftmaxSumsToOne) {
  std::mt19937_64 rng(4);
  auto s = softmax_channel(sfl::testing::random_tensor({2, 5, 4, 4}, rng, -10.0, 10.0, DType::f32)).to_doubles();
  for (int n = 0; n < 2; ++n)
    for (int i = 0; i < 16; ++i) {
      double total = 0.0;
      for (int c = 0; c < 5; ++c) total += s[(n * 5 + c) * 16 + i];
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
}

TEST(Concat, StacksChannels) {
  const Tensor parts[] = {Tensor::zeros({1, 2, 8, 8}), Tensor::full({1, 3, 8, 8}, 1.0)};
  auto y = concat_channels(parts);
  EXPECT_EQ(y.shape(), (Shape{1, 5, 8, 8}));
  EXPECT_EQ(y.at(2 * 64 - 1), 0.0);
  EXPECT_EQ(y.at(2 * 64), 1.0);
  const Tensor one[] = {iota({1, 2, 2, 2})};
  EXPECT_TRUE(bit_equal(concat_channels(one), one[0]));
  const Tensor bad[] = {Tensor::zeros({1, 1, 4, 4}), Tensor::zeros({1, 1, 2, 2})};
  EXPECT_THROW(concat_channels(bad), ContractError);
}

TEST(Upsample, IdentityAndConstant) {
  auto x = iota({1, 2, 3, 3});
  EXPECT_TRUE(bit_equal(upsample_bilinear(x, 1), x));
  for (double v : upsample_bilinear(Tensor::full({1, 1, 3, 2}, 2.5), 2).to_doubles()) EXPECT_FLOAT_EQ(v, 2.5);
}

TEST(Upsample, HalfPixelCorners) {
  // Output corner (0,0) maps to source (-0.25,-0.25), clamped to pixel 0.
  auto y = upsample_bilinear(Tensor::from_vector({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4}), 2).to_doubles();
  ASSERT_EQ(y.size(), 16u);
  EXPECT_FLOAT_EQ(y[0], 1.0);
  EXPECT_FLOAT_EQ(y[3], 2.0);
  EXPECT_FLOAT_EQ(y[12], 3.0);
  EXPECT_FLOAT_EQ(y[15], 4.0);
  // (0.25, 0.25) -> 1 + 0.25*1 + 0.25*2
  EXPECT_FLOAT_EQ(y[5], 1.75);
}

TEST(Linear, HandValues) {
  auto y = linear(Tensor::from_vector({1, 2}, std::vector<float>{1, 2}),
                  Tensor::from_vector({2, 1}, std::vector<float>{1, 1}), Tensor::full({1}, 1.0));
  EXPECT_FLOAT_EQ(y.item(), 4.0);
  auto x = iota({2, 3});
  auto eye = Tensor::from_vector({3, 3}, std::vector<float>{1, 0, 0, 0, 1, 0, 0, 0, 1});
  EXPECT_TRUE(bit_equal(linear(x, eye, Tensor::zeros({3})), x));
}

TEST(Autograd, ReluOfPositiveHasUnitGradient) {
  auto x = Tensor::from_vector({4}, std::vector<double>{0.5, 1, 2, 3}).set_requires_grad(true);
  backward(sum(relu(x)));
  for (double g : x.grad().to_doubles()) EXPECT_EQ(g, 1.0);
}

TEST(Autograd, SeededCutMatchesFullBackward) {
  std::mt19937_64 rng(9);
  auto x = sfl::testing::random_tensor({1, 2, 4, 4}, rng, -1, 1, DType::f32);
  auto w1 = sfl::testing::random_tensor({3, 2, 3, 3}, rng, -1, 1, DType::f32).set_requires_grad(true);
  auto w2 = sfl::testing::random_tensor({2, 3, 3, 3}, rng, -1, 1, DType::f32).set_requires_grad(true);
  auto full = sum(sigmoid(conv2d(relu(conv2d(x, w1, {}, {1, 1, 1})), w2, {}, {1, 1, 1})));
  backward(full);
  auto reference = w1.grad().to_doubles();
  w1.zero_grad();
  w2.zero_grad();

  auto cut = relu(conv2d(x, w1, {}, {1, 1, 1}));
  auto leaf = cut.detach().set_requires_grad(true);
  backward(sum(sigmoid(conv2d(leaf, w2, {}, {1, 1, 1}))));
  const GradSeed seeds[] = {{cut, leaf.grad()}};
  backward(seeds);
  auto split = w1.grad().to_doubles();
  for (std::size_t i = 0; i < split.size(); ++i) EXPECT_NEAR(split[i], reference[i], 1e-6);
}

TEST(Adam, ZeroGradientKeepsParameters) {
  auto p = Tensor::full({3}, 1.5).set_requires_grad(true);
  TensorList params{{"p", p}};
  p.grad_data<float>();
  AdamState adam;
  adam.step(params);
  for (double v : p.to_doubles()) EXPECT_EQ(v, 1.5);
}

TEST(Adam, FirstStepMovesByLr) {
  auto p = Tensor::full({1}, 1.0, DType::f64).set_requires_grad(true);
  p.grad_data<double>()[0] = 1.0;
  AdamState adam;
  adam.step({{"p", p}});
  EXPECT_NEAR(p.item(), 0.999, 1e-9);
  EXPECT_EQ(adam.step_count(), 1);
  EXPECT_FALSE(p.has_grad() && p.grad().to_doubles()[0] != 0.0);
}

TEST(Adam, ReplicasStayBitIdentical) {
  std::mt19937_64 rng(1);
  auto init = sfl::testing::random_tensor({16}, rng, -1, 1, DType::f32);
  auto a = init.to(DType::f32).detach().set_requires_grad(true);
  auto b = Tensor::from_vector({16}, init.to_doubles()).to(DType::f32).set_requires_grad(true);
  AdamState sa, sb;
  for (int step = 0; step < 5; ++step) {
    auto g = sfl::testing::random_tensor({16}, rng, -1, 1, DType::f32).to_doubles();
    for (int i = 0; i < 16; ++i) a.grad_data<float>()[i] = b.grad_data<float>()[i] = static_cast<float>(g[i]);
    sa.step({{"w", a}});
    sb.step({{"w", b}});
  }
  EXPECT_TRUE(bit_equal(a, b));
}

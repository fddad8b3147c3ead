#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "drn/layers.hpp"
#include "test_support.hpp"

namespace drn {
namespace {

using testing::random_tensor;

Tensor naive_conv(const Tensor& x, const Conv2d& conv, int k, int stride) {
  const Shape os = conv.output_shape(x.shape());
  Tensor y(os);
  const int cin = x.c(), cout = os.c;
  for (int b = 0; b < os.n; ++b)
    for (int oy = 0; oy < os.h; ++oy)
      for (int ox = 0; ox < os.w; ++ox)
        for (int o = 0; o < cout; ++o) {
          double acc = conv.bias.value.empty() ? 0.0 : conv.bias.value[o];
          for (int r = 0; r < k; ++r)
            for (int c = 0; c < k; ++c) {
              const int iy = oy * stride + r - k / 2, ix = ox * stride + c - k / 2;
              if (iy < 0 || iy >= x.h() || ix < 0 || ix >= x.w()) continue;
              for (int i = 0; i < cin; ++i)
                acc += conv.weight.value[((r * k + c) * cin + i) * cout + o] * x(b, iy, ix, i);
            }
          y(b, oy, ox, o) = acc;
        }
  return y;
}

TEST(Conv2d, MatchesDirectCorrelation) {
  std::mt19937_64 rng(1);
  for (int k : {1, 3}) {
    for (int stride : {1, 2}) {
      Rng init(k * 10 + stride);
      Conv2d conv("c", k, k, 3, 5, stride, true, init);
      for (double& b : conv.bias.value) b = 0.3;
      const Tensor x = random_tensor({2, 8, 6, 3}, rng);
      const Tensor y = conv.forward(x);
      EXPECT_EQ(y.shape(), conv.output_shape(x.shape()));
      EXPECT_LE(max_abs_diff(y, naive_conv(x, conv, k, stride)), 1e-10) << k << " " << stride;
    }
  }
}

TEST(Conv2d, StrideTwoHalvesResolution) {
  Rng init(2);
  Conv2d conv("c", 3, 3, 2, 4, 2, false, init);
  EXPECT_EQ(conv.output_shape({1, 16, 12, 2}), (Shape{1, 8, 6, 4}));
  EXPECT_TRUE(conv.bias.value.empty());
}

TEST(Conv2d, Gradients) {
  std::mt19937_64 rng(3);
  for (int stride : {1, 2}) {
    Rng init(3);
    Conv2d conv("c", 3, 3, 3, 4, stride, true, init);
    Tensor x = random_tensor({2, 6, 6, 3}, rng);
    const Tensor proj = random_tensor(conv.output_shape(x.shape()), rng);
    const auto loss = [&] { return testing::dot(conv.forward(x), proj); };
    const auto run = [&] {
      conv.weight.zero_grad();
      conv.bias.zero_grad();
      conv.forward(x);
      return conv.backward(proj);
    };
    testing::GradTarget tw{"weight", conv.weight.value, [&] {
                             run();
                             return conv.weight.grad;
                           }};
    testing::GradTarget tb{"bias", conv.bias.value, [&] {
                             run();
                             return conv.bias.grad;
                           }};
    testing::GradTarget tx{"input", x.storage(), [&] { return run().storage(); }};
    for (auto* t : {&tw, &tb, &tx}) EXPECT_LE(testing::check_gradient(loss, *t).rel_error, 1e-6);
  }
}

TEST(BatchNorm, TrainModeNormalises) {
  std::mt19937_64 rng(4);
  BatchNorm bn("bn", 3);
  const Tensor x = random_tensor({2, 4, 4, 3}, rng, -3.0, 5.0);
  const Tensor y = bn.forward(x, Mode::kTrain);
  for (int c = 0; c < 3; ++c) {
    double m = 0.0, v = 0.0;
    const int count = 2 * 4 * 4;
    for (std::size_t i = c; i < y.size(); i += 3) m += y[i];
    m /= count;
    for (std::size_t i = c; i < y.size(); i += 3) v += (y[i] - m) * (y[i] - m);
    v /= count;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-4);
  }
}

TEST(BatchNorm, RunningStatisticsAndInference) {
  BatchNorm bn("bn", 1);
  Tensor x(1, 1, 4, 1);
  for (int i = 0; i < 4; ++i) x[i] = i;  // mean 1.5, unbiased var 5/3
  bn.forward(x, Mode::kTrain);
  EXPECT_NEAR(bn.running_mean.value[0], 0.15, 1e-12);
  EXPECT_NEAR(bn.running_var.value[0], 0.9 + 0.1 * 5.0 / 3.0, 1e-12);
  EXPECT_FALSE(bn.running_mean.trainable);
  bn.gamma.value[0] = 2.0;
  bn.beta.value[0] = -1.0;
  const Tensor y = bn.forward(x, Mode::kInfer);
  const double scale = 2.0 / std::sqrt(bn.running_var.value[0] + bn.eps);
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(y[i], (i - 0.15) * scale - 1.0, 1e-12);
}

TEST(BatchNorm, Gradients) {
  std::mt19937_64 rng(5);
  for (Mode mode : {Mode::kTrain, Mode::kInfer}) {
    BatchNorm bn("bn", 3);
    for (double& g : bn.gamma.value) g = 0.5 + std::uniform_real_distribution<double>(0, 1)(rng);
    for (double& b : bn.beta.value) b = std::uniform_real_distribution<double>(-1, 1)(rng);
    bn.running_var.value = {0.5, 2.0, 1.5};
    bn.running_mean.value = {0.1, -0.2, 0.3};
    Tensor x = random_tensor({2, 3, 3, 3}, rng);
    const Tensor proj = random_tensor(x.shape(), rng);
    const BatchNorm frozen = bn;
    const auto loss = [&] {
      BatchNorm copy = frozen;
      copy.gamma = bn.gamma;
      copy.beta = bn.beta;
      return testing::dot(copy.forward(x, mode), proj);
    };
    const auto run = [&] {
      BatchNorm copy = frozen;
      copy.gamma = bn.gamma;
      copy.beta = bn.beta;
      copy.gamma.zero_grad();
      copy.beta.zero_grad();
      copy.forward(x, mode);
      Tensor dx = copy.backward(proj);
      bn.gamma.grad = copy.gamma.grad;
      bn.beta.grad = copy.beta.grad;
      return dx;
    };
    testing::GradTarget tx{"input", x.storage(), [&] { return run().storage(); }};
    testing::GradTarget tg{"gamma", bn.gamma.value, [&] {
                             run();
                             return bn.gamma.grad;
                           }};
    testing::GradTarget tb{"beta", bn.beta.value, [&] {
                             run();
                             return bn.beta.grad;
                           }};
    for (auto* t : {&tx, &tg, &tb})
      EXPECT_LE(testing::check_gradient(loss, *t).rel_error, 1e-6)
          << t->name << (mode == Mode::kTrain ? " train" : " infer");
  }
}

TEST(Relu, ForwardBackward) {
  Relu r;
  Tensor x(1, 1, 1, 4);
  x.storage() = {-1.0, 0.0, 2.0, -0.5};
  const Tensor y = r.forward(x);
  EXPECT_EQ(y.storage(), (std::vector<double>{0.0, 0.0, 2.0, 0.0}));
  const Tensor dx = r.backward(Tensor(1, 1, 1, 4, 1.0));
  EXPECT_EQ(dx.storage(), (std::vector<double>{0.0, 0.0, 1.0, 0.0}));
}

TEST(Upsample, NearestAndAdjoint) {
  std::mt19937_64 rng(6);
  const Tensor x = random_tensor({2, 3, 4, 2}, rng);
  const Tensor y = upsample2x(x);
  ASSERT_EQ(y.shape(), (Shape{2, 6, 8, 2}));
  EXPECT_EQ(y(1, 5, 7, 1), x(1, 2, 3, 1));
  EXPECT_EQ(y(0, 2, 3, 0), x(0, 1, 1, 0));
  // <up(x), g> == <x, up^T(g)>
  const Tensor g = random_tensor(y.shape(), rng);
  EXPECT_NEAR(testing::dot(y, g), testing::dot(x, upsample2x_backward(g)), 1e-12);
}

TEST(GlobalAvgPool, MeanAndAdjoint) {
  std::mt19937_64 rng(7);
  const Tensor x = random_tensor({2, 3, 5, 4}, rng);
  const Tensor p = global_avg_pool(x);
  ASSERT_EQ(p.shape(), (Shape{2, 1, 1, 4}));
  double s = 0.0;
  for (int y = 0; y < 3; ++y)
    for (int xx = 0; xx < 5; ++xx) s += x(1, y, xx, 2);
  EXPECT_NEAR(p(1, 0, 0, 2), s / 15.0, 1e-14);
  const Tensor g = random_tensor(p.shape(), rng);
  EXPECT_NEAR(testing::dot(p, g), testing::dot(x, global_avg_pool_backward(g, x.shape())), 1e-12);
}

TEST(Parameters, CountAndZero) {
  Rng init(8);
  ConvBlock block("b", 3, 2, 4, 1, true, true, init);
  ParamList ps;
  block.collect(ps);
  // conv weight (no bias under norm), gamma, beta
  EXPECT_EQ(count_trainable(ps), 3u * 3 * 2 * 4 + 4 + 4);
  for (Parameter* p : ps) std::fill(p->grad.begin(), p->grad.end(), 1.0);
  zero_grads(ps);
  for (Parameter* p : ps)
    for (double g : p->grad) EXPECT_EQ(g, 0.0);
}

}  // namespace
}  // namespace drn

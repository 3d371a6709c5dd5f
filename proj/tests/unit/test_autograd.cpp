#include "test_support.hpp"

#include "biaswap/nn.hpp"

namespace biaswap {
namespace {

using ag::Var;
using testing::fd_max_error;
using testing::project;
using testing::random_tensor;

constexpr double kTol = 5e-3;

TEST(Autograd, Conv2dMatchesNaiveLoops) {
  std::mt19937_64 rng(1);
  const Tensor x = random_tensor({2, 3, 7, 6}, rng), w = random_tensor({4, 3, 3, 3}, rng), b = random_tensor({4}, rng);
  for (int stride : {1, 2}) {
    const Tensor y = ag::conv2d(Var(x), Var(w), Var(b), stride, 1).value();
    const int oh = (7 + 2 - 3) / stride + 1, ow = (6 + 2 - 3) / stride + 1;
    ASSERT_EQ(y.shape(), (Shape{2, 4, oh, ow}));
    for (int n = 0; n < 2; ++n)
      for (int o = 0; o < 4; ++o)
        for (int i = 0; i < oh; ++i)
          for (int j = 0; j < ow; ++j) {
            double s = b[o];
            for (int c = 0; c < 3; ++c)
              for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) {
                  const int yy = i * stride - 1 + ky, xx = j * stride - 1 + kx;
                  if (yy >= 0 && yy < 7 && xx >= 0 && xx < 6) s += static_cast<double>(x.at(n, c, yy, xx)) * w.at(o, c, ky, kx);
                }
            EXPECT_NEAR(y.at(n, o, i, j), s, 1e-4);
          }
  }
}

TEST(Autograd, Conv2dGradients) {
  std::mt19937_64 rng(2);
  for (int stride : {1, 2}) {
    Var x(random_tensor({2, 2, 5, 5}, rng), true), w(random_tensor({3, 2, 3, 3}, rng), true), b(random_tensor({3}, rng), true);
    const Tensor r = random_tensor({2, 3, stride == 1 ? 5 : 3, stride == 1 ? 5 : 3}, rng);
    EXPECT_LT(fd_max_error({x, w, b}, [&] { return project(ag::conv2d(x, w, b, stride, 1), r); }), kTol);
  }
}

TEST(Autograd, LinearAndActivationGradients) {
  std::mt19937_64 rng(3);
  Var x(random_tensor({4, 5}, rng), true), w(random_tensor({3, 5}, rng), true), b(random_tensor({3}, rng), true);
  const Tensor r = random_tensor({4, 3}, rng);
  EXPECT_LT(fd_max_error({x, w, b}, [&] { return project(ag::linear(x, w, b), r); }), kTol);
  EXPECT_LT(fd_max_error({x}, [&] { return project(ag::sigmoid(ag::linear(x, w, b)), r); }), kTol);
  EXPECT_LT(fd_max_error({x}, [&] { return project(ag::tanh(ag::linear(x, w, b)), r); }), kTol);
}

TEST(Autograd, LeakyReluAwayFromKink) {
  Var x(Tensor({4}, std::vector<float>{-2.0f, -0.5f, 0.5f, 3.0f}), true);
  const Tensor r({4}, std::vector<float>{1, 2, 3, 4});
  EXPECT_LT(fd_max_error({x}, [&] { return project(ag::leaky_relu(x, 0.2f), r); }), kTol);
  const Tensor y = ag::leaky_relu(x, 0.2f).value();
  EXPECT_FLOAT_EQ(y[0], -0.4f);
  EXPECT_FLOAT_EQ(y[3], 3.0f);
}

TEST(Autograd, ShapeOpsGradients) {
  std::mt19937_64 rng(4);
  Var x(random_tensor({3, 2, 4, 4}, rng), true), y(random_tensor({2, 2, 4, 4}, rng), true);
  std::mt19937_64 r2(5);
  const Tensor r_up = random_tensor({3, 2, 8, 8}, r2);
  EXPECT_LT(fd_max_error({x}, [&] { return project(ag::upsample2x(x), r_up); }), kTol);
  const Tensor r_gap = random_tensor({3, 2}, r2), r_cat = random_tensor({5, 2, 4, 4}, r2), r_sl = random_tensor({2, 2, 4, 4}, r2);
  EXPECT_LT(fd_max_error({x}, [&] { return project(ag::global_avg_pool(x), r_gap); }), kTol);
  EXPECT_LT(fd_max_error({x, y}, [&] { return project(ag::concat_batch(x, y), r_cat); }), kTol);
  EXPECT_LT(fd_max_error({x}, [&] { return project(ag::slice_batch(x, 1, 2), r_sl); }), kTol);
  const Tensor r_crop = random_tensor({2, 2, 3, 3}, r2);
  EXPECT_LT(fd_max_error({x}, [&] { return project(ag::crop(x, {{0, 1, 0}, {2, 0, 1}}, 3, 3), r_crop); }), kTol);
}

TEST(Autograd, FeatureOpsGradients) {
  std::mt19937_64 rng(6);
  Var a(random_tensor({4, 3}, rng), true), b(random_tensor({4, 2}, rng), true);
  const Tensor r_cat = random_tensor({4, 5}, rng), r_g = random_tensor({2, 3}, rng);
  EXPECT_LT(fd_max_error({a, b}, [&] { return project(ag::concat_features(a, b), r_cat); }), kTol);
  EXPECT_LT(fd_max_error({a}, [&] { return project(ag::group_mean(a, 2), r_g); }), kTol);
  const Tensor gm = ag::group_mean(a, 2).value();
  EXPECT_NEAR(gm[0], (a.value()[0] + a.value()[3]) / 2, 1e-6);
}

TEST(Autograd, ModulatedConvGradients) {
  std::mt19937_64 rng(7);
  for (bool demod : {true, false}) {
    nn::ModulatedConv2d m(2, 3, 3, 4, rng, demod);
    Var x(random_tensor({2, 2, 4, 4}, rng), true), s(random_tensor({2, 4}, rng), true);
    const Tensor r = random_tensor({2, 3, 4, 4}, rng);
    EXPECT_LT(fd_max_error({x, s, m.weight, m.bias, m.affine.weight}, [&] { return project(m(x, s), r); }), 1e-2) << "demod " << demod;
  }
}

TEST(Autograd, ScalarLossGradients) {
  std::mt19937_64 rng(8);
  Var x(random_tensor({3, 5}, rng), true), t(random_tensor({3, 5}, rng), true);
  EXPECT_LT(fd_max_error({x, t}, [&] { return ag::mse(x, t); }), kTol);
  EXPECT_LT(fd_max_error({x}, [&] { return ag::softplus_mean(x, 1.0f); }), kTol);
  EXPECT_LT(fd_max_error({x}, [&] { return ag::softplus_mean(x, -1.0f); }), kTol);
  EXPECT_LT(fd_max_error({x}, [&] { return ag::cross_entropy(x, {0, 4, 2}); }), kTol);
  for (double q : {0.3, 0.7, 1.0}) EXPECT_LT(fd_max_error({x}, [&] { return ag::generalized_cross_entropy(x, {1, 3, 2}, q); }), kTol);
}

TEST(Autograd, SoftplusMatchesLogSigmoid) {
  Var x(Tensor({3}, std::vector<float>{-30.0f, 0.0f, 2.0f}));
  double expect = 0;
  for (double v : {-30.0, 0.0, 2.0}) expect += -std::log(1.0 / (1.0 + std::exp(-v)));
  EXPECT_NEAR(ag::softplus_mean(x, -1.0f).item(), expect / 3, 1e-5);
}

TEST(Autograd, LossesRejectBadTargets) {
  Var x(Tensor({2, 3}));
  EXPECT_THROW(ag::cross_entropy(x, {0, 3}), InvalidArgument);
  EXPECT_THROW(ag::cross_entropy(x, {0}), InvalidArgument);
  EXPECT_THROW(ag::generalized_cross_entropy(x, {0, 1}, 0.0), InvalidArgument);
  EXPECT_THROW(ag::crop(Var(Tensor({1, 1, 4, 4})), {{0, 2, 2}}, 3, 3), InvalidArgument);
}

TEST(Nn, AdamSingleStepMatchesClosedForm) {
  Var p(Tensor({2}, std::vector<float>{1.0f, -1.0f}), true);
  nn::Adam opt({{"p", p}}, {0.1, 0.9, 0.999, 1e-8});
  ag::backward(ag::mse(p, Var(Tensor({2}))));
  opt.step();
  // First bias-corrected step moves each weight by lr * sign(g).
  EXPECT_NEAR(p.value()[0], 0.9f, 1e-6);
  EXPECT_NEAR(p.value()[1], -0.9f, 1e-6);
}

}  // namespace
}  // namespace biaswap

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "refgen/nn/optim.hpp"

using namespace refgen;
using refgen::testing::grad_check;
using refgen::testing::probe;
using V = nn::Var<double>;

namespace {

V rand_var(Shape s, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  return V(Tensor<double>::randn(std::move(s), rng, scale));
}

constexpr double kTol = 1e-6;

}  // namespace

TEST(Ops, ElementwiseGradients) {
  auto r = grad_check({rand_var({2, 3}, 1), rand_var({2, 3}, 2)}, [](const std::vector<V>& in) {
    return probe(nn::silu(nn::add(nn::mul(in[0], in[1]), nn::sub(in[0], nn::scale(in[1], 0.5)))));
  });
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Ops, ConvGradientsAcrossStrideAndKernel) {
  for (auto [k, stride] : {std::pair{3, 1}, {3, 2}, {1, 1}}) {
    auto r = grad_check({rand_var({2, 3, 6, 4}, 3), rand_var({4, 3, k, k}, 4, 0.3), rand_var({4}, 5)},
                        [stride = stride](const std::vector<V>& in) {
                          return probe(nn::conv2d(in[0], in[1], in[2], stride));
                        });
    EXPECT_LT(r.max_rel_error, kTol) << "k=" << k << " stride=" << stride;
  }
}

TEST(Ops, ConvMatchesDirectSum) {
  auto x = rand_var({1, 2, 5, 4}, 6);
  auto w = rand_var({3, 2, 3, 3}, 7);
  auto b = rand_var({3}, 8);
  auto y = nn::conv2d(x, w, b);
  for (int o = 0; o < 3; ++o)
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 4; ++j) {
        double s = b.value()[o];
        for (int c = 0; c < 2; ++c)
          for (int di = -1; di <= 1; ++di)
            for (int dj = -1; dj <= 1; ++dj) {
              int yi = i + di, xj = j + dj;
              if (yi < 0 || yi >= 5 || xj < 0 || xj >= 4) continue;
              s += w.value().at(o, c, di + 1, dj + 1) * x.value().at(0, c, yi, xj);
            }
        EXPECT_NEAR(y.value().at(0, o, i, j), s, 1e-12);
      }
}

TEST(Ops, GroupNormGradients) {
  auto r = grad_check({rand_var({2, 4, 3, 2}, 9), rand_var({4}, 10), rand_var({4}, 11)},
                      [](const std::vector<V>& in) { return probe(nn::group_norm(in[0], in[1], in[2], 2)); });
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST(Ops, AttentionGradients) {
  auto r = grad_check({rand_var({2, 3, 5}, 12), rand_var({2, 3, 4}, 13), rand_var({2, 2, 4}, 14)},
                      [](const std::vector<V>& in) { return probe(nn::attention(in[0], in[1], in[2])); });
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Ops, LayoutOpGradients) {
  auto r = grad_check({rand_var({1, 2, 6, 4}, 15), rand_var({1, 3, 6, 4}, 16)}, [](const std::vector<V>& in) {
    auto c = nn::concat_channels(in[0], in[1]);
    auto f = nn::fold_slots(c, 3);
    auto m = nn::time_mean_broadcast(f);
    auto u = nn::upsample_nearest2x(nn::add(f, m));
    auto p = nn::avg_pool(u, 2, 2);
    auto a = nn::adaptive_avg_pool(c, 4, 3);
    auto z = nn::bilinear_resize(a, 7, 5);
    return nn::add(nn::add(probe(p), probe(z, 3)), probe(nn::time_mean(c), 4));
  });
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Ops, FoldSlotsPlacesSlotsOnChannels) {
  Tensor<double> x({1, 1, 4, 1}, std::vector<double>{1, 2, 3, 4});
  auto f = nn::fold_slots(V(x), 2);
  EXPECT_EQ(f.shape(), (Shape{1, 2, 2, 1}));
  EXPECT_EQ(f.value().data, (AlignedVector<double>{1, 2, 3, 4}));
  Tensor<double> x2({1, 2, 2, 1}, std::vector<double>{1, 2, 3, 4});
  auto f2 = nn::fold_slots(V(x2), 2);
  EXPECT_EQ(f2.value().data, (AlignedVector<double>{1, 3, 2, 4}));
}

TEST(Ops, DenseAndLossGradients) {
  auto r = grad_check({rand_var({3, 4}, 17), rand_var({4, 5}, 18), rand_var({5}, 19)}, [](const std::vector<V>& in) {
    auto y = nn::linear(in[0], in[1], in[2]);
    return nn::softmax_cross_entropy(y, {0, 4, 2});
  });
  EXPECT_LT(r.max_rel_error, kTol);

  Rng rng(5);
  auto eps = Tensor<double>::randn({2, 3}, rng);
  auto r2 = grad_check({rand_var({2, 3}, 20), rand_var({2, 3}, 21, 0.5)}, [&](const std::vector<V>& in) {
    auto z = nn::reparameterize(in[0], in[1], eps);
    return nn::add(nn::mse(z, Tensor<double>({2, 3}, 0.3)), nn::gaussian_kl(in[0], in[1]));
  });
  EXPECT_LT(r2.max_rel_error, kTol);
}

TEST(Ops, GatherAndChannelBiasGradients) {
  auto r = grad_check({rand_var({6, 3}, 22), rand_var({2, 3, 2, 2}, 23)}, [](const std::vector<V>& in) {
    auto rows = nn::gather_rows(in[0], {1, 4, 1});  // (3 rows, 3 dims)
    auto bias = nn::reshape(nn::gather_rows(in[0], {0, 5}), {2, 3});
    return nn::add(probe(rows), probe(nn::channel_bias(in[1], bias), 7));
  });
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Ops, FrozenParentsReceiveNoGradient) {
  auto a = rand_var({2, 2}, 24);
  auto b = rand_var({2, 2}, 25);
  b.set_requires_grad(true);
  auto loss = nn::sum_all(nn::mul(a, b));
  nn::backward(loss);
  EXPECT_TRUE(a.grad().empty());
  EXPECT_FALSE(b.grad().empty());
}

TEST(Ops, NoGradGuardBuildsNoGraph) {
  auto a = rand_var({2, 2}, 26);
  a.set_requires_grad(true);
  nn::NoGradGuard guard;
  auto y = nn::silu(a);
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.node()->parents.empty());
}

TEST(Ops, WarmupScheduleIsLinear) {
  EXPECT_DOUBLE_EQ(nn::warmup_lr(5e-5, 2500, 10000), 0.25 * 5e-5);
  EXPECT_DOUBLE_EQ(nn::warmup_lr(5e-5, 9999, 10000), 0.9999 * 5e-5);
  EXPECT_DOUBLE_EQ(nn::warmup_lr(5e-5, 10000, 10000), 5e-5);
  EXPECT_DOUBLE_EQ(nn::warmup_lr(5e-5, 20000, 10000), 5e-5);
}

TEST(Ops, CosineDecayReachesZeroAtEnd) {
  EXPECT_DOUBLE_EQ(nn::warmup_lr(1e-3, 50, 100, 1100), 0.5e-3);
  EXPECT_DOUBLE_EQ(nn::warmup_lr(1e-3, 100, 100, 1100), 1e-3);
  EXPECT_NEAR(nn::warmup_lr(1e-3, 600, 100, 1100), 0.5e-3, 1e-15);
  EXPECT_NEAR(nn::warmup_lr(1e-3, 1100, 100, 1100), 0.0, 1e-18);
  EXPECT_NEAR(nn::warmup_lr(1e-3, 5000, 100, 1100), 0.0, 1e-18);
  double prev = 1.0;
  for (long s = 100; s <= 1100; s += 10) {
    const double lr = nn::warmup_lr(1e-3, s, 100, 1100);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
}

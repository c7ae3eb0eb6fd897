#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "segnet/adam.hpp"
#include "segnet/autodiff.hpp"
#include "segnet/ops.hpp"
#include "segnet/parallel.hpp"
#include "segnet/pipeline.hpp"
#include "test_util.hpp"

namespace segnet {
namespace {

using testing::max_abs_diff;
using testing::naive_conv2d;
using testing::naive_conv2d_transpose;
using testing::random_tensor;

TEST(Tensor, ShapeAndData) {
  Tensor t({2, 3, 4}, 1.5f);
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.rank(), 3u);
  EXPECT_EQ(t.at(1, 2, 3), 1.5f);
  EXPECT_THROW(Tensor({2, 0}), ShapeError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<float>(3)), ShapeError);
  EXPECT_EQ(shape_to_string({2, 3}), "(2, 3)");
}

TEST(Tensor, BitwiseEqualSeesSignedZero) {
  Tensor a({1}, 0.0f), b({1}, -0.0f);
  EXPECT_TRUE(a == b);
  EXPECT_FALSE(bitwise_equal(a, b));
}

// --- conv2d -----------------------------------------------------------------

TEST(Conv2d, OneByOneIdentityKernel) {
  Rng rng(1);
  const auto x = random_tensor<float>({4, 4, 1}, rng);
  const Tensor k({1, 1, 1, 1}, 1.0f), b({1}, 0.0f);
  EXPECT_TRUE(bitwise_equal(ops::conv2d(x, k, b, {}), x));
  const auto x64 = random_tensor<double>({5, 3, 1}, rng);
  EXPECT_TRUE(bitwise_equal(ops::conv2d(x64, Tensor64({1, 1, 1, 1}, 1.0), Tensor64({1}, 0.0), {}), x64));
}

TEST(Conv2d, MultiChannelIdentityIsExact) {
  Rng rng(2);
  const std::size_t C = 5;
  const auto x = random_tensor<float>({6, 7, C}, rng);
  Tensor k({1, 1, C, C});
  for (std::size_t c = 0; c < C; ++c) k[c * C + c] = 1.0f;
  EXPECT_TRUE(bitwise_equal(ops::conv2d(x, k, Tensor({C}), {}), x));
}

TEST(Conv2d, DilatedImpulseHitsExactOffsets) {
  Tensor x({7, 7, 1});
  x.at(3, 3, 0) = 1.0f;
  const Tensor k({3, 3, 1, 1}, 1.0f), b({1}, 0.0f);
  const ops::ConvOptions o{1, 2, ops::Padding::Same};
  const auto y = ops::conv2d(x, k, b, o);
  const auto ref = naive_conv2d(x, k, b, 1, 2, true);
  ASSERT_EQ(y.shape(), (Shape{7, 7, 1}));
  EXPECT_EQ(max_abs_diff(y, ref), 0.0);
  for (int dy = -3; dy <= 3; ++dy)
    for (int dx = -3; dx <= 3; ++dx) {
      const bool on = (dy == -2 || dy == 0 || dy == 2) && (dx == -2 || dx == 0 || dx == 2);
      EXPECT_EQ(y.at(3 + dy, 3 + dx, 0), on ? 1.0f : 0.0f) << dy << "," << dx;
    }
}

TEST(Conv2d, StrideTwoShape) {
  Rng rng(3);
  const auto y = ops::conv2d(random_tensor<float>({8, 8, 2}, rng), random_tensor<float>({3, 3, 2, 4}, rng),
                             Tensor({4}), {2, 1, ops::Padding::Same});
  EXPECT_EQ(y.shape(), (Shape{4, 4, 4}));
  const auto z = ops::conv2d(random_tensor<float>({9, 7, 1}, rng), random_tensor<float>({3, 3, 1, 1}, rng),
                             Tensor({1}), {2, 1, ops::Padding::Same});
  EXPECT_EQ(z.shape(), (Shape{5, 4, 1}));
}

TEST(Conv2d, SamePaddingPreservesSizeForAnyDilation) {
  Rng rng(4);
  for (std::size_t d : {1u, 2u, 6u, 12u, 18u}) {
    const auto y = ops::conv2d(random_tensor<float>({5, 9, 2}, rng), random_tensor<float>({3, 3, 2, 3}, rng),
                               Tensor({3}), {1, d, ops::Padding::Same});
    EXPECT_EQ(y.shape(), (Shape{5, 9, 3})) << "dilation " << d;
  }
}

TEST(Conv2d, MatchesNaiveOracle) {
  Rng rng(5);
  struct Case {
    Shape in;
    std::size_t k, s, d;
    bool same;
  };
  const std::vector<Case> cases{{{6, 6, 3}, 3, 1, 1, true}, {{7, 5, 2}, 3, 2, 1, true},  {{8, 8, 4}, 1, 1, 1, true},
                                {{9, 9, 2}, 3, 1, 3, true}, {{10, 7, 3}, 2, 2, 1, false}, {{8, 9, 2}, 3, 1, 2, false},
                                {{4, 4, 1}, 3, 1, 6, true}, {{6, 6, 2}, 4, 2, 1, true}};
  for (const auto& c : cases) {
    const std::size_t co = 3;
    const auto x = random_tensor<double>(c.in, rng);
    const auto k = random_tensor<double>({c.k, c.k, c.in[2], co}, rng);
    const auto b = random_tensor<double>({co}, rng);
    const ops::ConvOptions o{c.s, c.d, c.same ? ops::Padding::Same : ops::Padding::Valid};
    const auto y = ops::conv2d(x, k, b, o);
    const auto ref = naive_conv2d(x, k, b, c.s, c.d, c.same);
    ASSERT_EQ(y.shape(), ref.shape());
    EXPECT_LT(max_abs_diff(y, ref), 1e-12);
  }
}

TEST(Conv2d, Errors) {
  const Tensor x({4, 4, 2});
  EXPECT_THROW(ops::conv2d(x, Tensor({3, 3, 3, 1}), Tensor({1}), {}), ShapeError);
  EXPECT_THROW(ops::conv2d(x, Tensor({3, 3, 2, 1}), Tensor({1}), {0, 1, ops::Padding::Same}), ShapeError);
  EXPECT_THROW(ops::conv2d(x, Tensor({3, 3, 2, 1}), Tensor({1}), {1, 0, ops::Padding::Same}), ShapeError);
}

TEST(Conv2d, DeterministicAcrossRuns) {
  Rng rng(6);
  const auto x = random_tensor<float>({16, 16, 8}, rng);
  const auto k = random_tensor<float>({3, 3, 8, 8}, rng);
  const auto b = random_tensor<float>({8}, rng);
  const auto a = ops::conv2d(x, k, b, {});
  set_num_threads(3);
  const auto c = ops::conv2d(x, k, b, {});
  const auto d = ops::conv2d(x, k, b, {});
  set_num_threads(1);
  EXPECT_TRUE(bitwise_equal(c, d));
  EXPECT_LT(max_abs_diff(a, c), 1e-5);
}

// --- conv2d_transpose ---------------------------------------------------------

TEST(Conv2dTranspose, SingleTapPlacesEachInput) {
  Tensor x({2, 2, 1}, std::vector<float>{1, 2, 3, 4});
  Tensor k({2, 2, 1, 1});
  k[1] = 1.0f;  // tap (0, 1)
  const auto y = ops::conv2d_transpose(x, k, Tensor({1}), 2);
  ASSERT_EQ(y.shape(), (Shape{4, 4, 1}));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t a = 0; a < 2; ++a)
        for (std::size_t b = 0; b < 2; ++b)
          EXPECT_EQ(y.at(2 * i + a, 2 * j + b, 0), (a == 0 && b == 1) ? x.at(i, j, 0) : 0.0f);
}

TEST(Conv2dTranspose, ZeroInputGivesBias) {
  const auto y = ops::conv2d_transpose(Tensor({3, 3, 2}), Tensor({2, 2, 4, 2}, 0.7f),
                                       Tensor({4}, std::vector<float>{1, -2, 3, 0.5f}), 2);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_EQ(y[i], (std::vector<float>{1, -2, 3, 0.5f})[i % 4]);
}

TEST(Conv2dTranspose, ShapeArithmetic) {
  const auto y = ops::conv2d_transpose(Tensor({16, 16, 256}), Tensor({2, 2, 128, 256}), Tensor({128}), 2);
  EXPECT_EQ(y.shape(), (Shape{32, 32, 128}));
}

TEST(Conv2dTranspose, MatchesScatterOracle) {
  Rng rng(7);
  for (std::size_t s : {1u, 2u, 3u}) {
    const auto x = random_tensor<double>({4, 5, 3}, rng);
    const auto k = random_tensor<double>({3, 2, 2, 3}, rng);
    const auto b = random_tensor<double>({2}, rng);
    const auto y = ops::conv2d_transpose(x, k, b, s);
    const auto ref = naive_conv2d_transpose(x, k, b, s);
    ASSERT_EQ(y.shape(), ref.shape());
    EXPECT_LT(max_abs_diff(y, ref), 1e-12);
  }
}

template <typename T>
double adjoint_gap(std::uint64_t seed, std::size_t stride, std::size_t kernel) {
  Rng rng(seed);
  const std::size_t ci = 3, co = 4;
  // Forward valid conv: (H, W, co) -> (h, w, ci) with a (k, k, co, ci) kernel.
  const std::size_t h = 5, w = 4;
  const std::size_t H = (h - 1) * stride + kernel, W = (w - 1) * stride + kernel;
  const auto k = random_tensor<T>({kernel, kernel, co, ci}, rng);
  const auto x = random_tensor<T>({H, W, co}, rng);
  const auto y = random_tensor<T>({h, w, ci}, rng);
  const auto fx = ops::conv2d(x, k, BasicTensor<T>({ci}), {stride, 1, ops::Padding::Valid});
  const auto ty = ops::conv2d_transpose(y, k, BasicTensor<T>({co}), stride);
  const double lhs = static_cast<double>(ops::inner_product(fx, y));
  const double rhs = static_cast<double>(ops::inner_product(x, ty));
  return std::abs(lhs - rhs) / std::max(std::abs(lhs), std::abs(rhs));
}

TEST(Conv2dTranspose, AdjointOfConv) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    for (auto [s, k] : {std::pair{1u, 3u}, std::pair{2u, 2u}, std::pair{2u, 3u}, std::pair{3u, 3u}}) {
      EXPECT_LT(adjoint_gap<float>(seed, s, k), 1e-4);
      EXPECT_LT(adjoint_gap<double>(seed, s, k), 1e-10);
    }
  }
}

// --- pooling and activations -------------------------------------------------

TEST(Pooling, Examples) {
  const Tensor m({2, 2, 1}, std::vector<float>{1, 2, 3, 4});
  EXPECT_EQ(ops::global_avg_pool(m)[0], 2.5f);
  EXPECT_EQ(ops::global_max_pool(m)[0], 4.0f);
  const Tensor c({3, 5, 2}, 1.25f);
  EXPECT_EQ(ops::global_avg_pool(c)[1], 1.25f);
  EXPECT_EQ(ops::global_max_pool(c)[0], 1.25f);
  Tensor spike({4, 4, 1});
  spike.at(2, 1, 0) = 9.0f;
  EXPECT_EQ(ops::global_max_pool(spike)[0], 9.0f);
}

TEST(Pooling, ChannelPermutation) {
  Rng rng(8);
  const auto x = random_tensor<float>({3, 4, 3}, rng);
  Tensor p(x.shape());
  const std::size_t perm[3] = {2, 0, 1};
  for (std::size_t i = 0; i < 12; ++i)
    for (std::size_t c = 0; c < 3; ++c) p[i * 3 + c] = x[i * 3 + perm[c]];
  const auto a = ops::global_avg_pool(x), b = ops::global_avg_pool(p);
  const auto ma = ops::global_max_pool(x), mb = ops::global_max_pool(p);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(b[c], a[perm[c]]);
    EXPECT_EQ(mb[c], ma[perm[c]]);
  }
}

TEST(Activations, Examples) {
  EXPECT_EQ(ops::sigmoid_scalar(0.0), 0.5);
  EXPECT_NEAR(ops::sigmoid_scalar(20.0), 0.999999997938846, 1e-9);
  const Tensor r = ops::relu(Tensor({2}, std::vector<float>{-3, 3}));
  EXPECT_EQ(r[0], 0.0f);
  EXPECT_EQ(r[1], 3.0f);
}

TEST(Activations, SigmoidStaysOpen) {
  for (double x : {-1000.0, -40.0, -20.0, 0.0, 20.0, 40.0, 1000.0}) {
    const double d = ops::sigmoid_scalar(x);
    const float f = ops::sigmoid_scalar(static_cast<float>(x));
    EXPECT_GT(d, 0.0);
    EXPECT_LT(d, 1.0);
    EXPECT_GT(f, 0.0f);
    EXPECT_LT(f, 1.0f);
  }
}

// --- autodiff --------------------------------------------------------------

TEST(Autodiff, LinearSum) {
  Rng rng(9);
  const auto w = random_tensor<double>({3, 2}, rng);
  const auto x = random_tensor<double>({3, 2}, rng);
  ad::Graph<double> g;
  const auto loss = ad::sum(g, ad::mul(g, g.parameter("w", w), g.constant(x)));
  const auto grads = g.backward(loss);
  EXPECT_TRUE(grads.at("w") == x);
}

TEST(Autodiff, SigmoidAtZero) {
  const Tensor64 w({1}, 0.0);
  ad::Graph<double> g;
  const auto grads = g.backward(ad::sigmoid(g, g.parameter("w", w)));
  EXPECT_DOUBLE_EQ(grads.at("w")[0], 0.25);
}

TEST(Autodiff, DisconnectedParameterGetsZeros) {
  const Tensor64 w({1}, 2.0), u({2, 3}, 1.0);
  ad::Graph<double> g;
  const auto pw = g.parameter("w", w);
  g.parameter("u", u);
  const auto grads = g.backward(ad::sum(g, pw));
  EXPECT_TRUE(grads.at("u") == Tensor64({2, 3}));
}

TEST(Autodiff, NonScalarLossThrows) {
  const Tensor64 w({2}, 1.0);
  ad::Graph<double> g;
  EXPECT_THROW(g.backward(g.parameter("w", w)), ShapeError);
}

TEST(Autodiff, RecordRejectsNonFinite) {
  ad::Graph<float> g;
  const auto big = g.constant(Tensor({1}, 1e30f));
  EXPECT_THROW(ad::mul(g, big, big), NonFiniteError);
}

TEST(Autodiff, InputsPrecedeNodes) {
  Rng rng(10);
  const auto w = random_tensor<double>({2, 2, 1}, rng);
  ad::Graph<double> g;
  const auto a = g.parameter("w", w);
  const auto b = ad::relu(g, a);
  const auto c = ad::add(g, b, a);
  ad::sum(g, c);
  for (ad::NodeId n = 0; n < g.size(); ++n)
    for (ad::NodeId i : g.inputs(n)) EXPECT_LT(i, n);
}

// Central-difference checks of each differentiable op in isolation.
class OpGradcheck : public ::testing::Test {
 protected:
  void expect_ok(const pipeline::LossBuilder& f, NamedTensors<double> params) {
    pipeline::GradcheckOptions o;
    o.coords_per_tensor = 40;
    const auto r = pipeline::check_gradients(f, params, o);
    EXPECT_GT(r.checked, 0u);
    EXPECT_LT(r.max_rel_error, 1e-5) << r.worst_tensor;
  }
  // Contract to a scalar with fixed random weights so every output matters.
  static ad::NodeId contract(ad::Graph<double>& g, ad::NodeId y, std::uint64_t seed) {
    Rng rng(seed);
    return ad::sum(g, ad::mul(g, y, g.constant(random_tensor<double>(g.value(y).shape(), rng))));
  }
  Rng rng{11};
};

TEST_F(OpGradcheck, Conv2dVariants) {
  for (auto o : {ops::ConvOptions{1, 1, ops::Padding::Same}, ops::ConvOptions{2, 1, ops::Padding::Same},
                 ops::ConvOptions{1, 2, ops::Padding::Same}, ops::ConvOptions{1, 1, ops::Padding::Valid}}) {
    expect_ok(
        [o](ad::Graph<double>& g, const NamedTensors<double>& p) {
          return contract(g, ad::conv2d(g, g.parameter("x", p.at("x")), g.parameter("k", p.at("k")), g.parameter("b", p.at("b")), o), 1);
        },
        {{"x", random_tensor<double>({5, 6, 2}, rng)}, {"k", random_tensor<double>({3, 3, 2, 3}, rng)}, {"b", random_tensor<double>({3}, rng)}});
  }
}

TEST_F(OpGradcheck, Conv2dTranspose) {
  expect_ok(
      [](ad::Graph<double>& g, const NamedTensors<double>& p) {
        return contract(g, ad::conv2d_transpose(g, g.parameter("x", p.at("x")), g.parameter("k", p.at("k")), g.parameter("b", p.at("b")), 2), 2);
      },
      {{"x", random_tensor<double>({3, 4, 3}, rng)}, {"k", random_tensor<double>({2, 2, 2, 3}, rng)}, {"b", random_tensor<double>({2}, rng)}});
}

TEST_F(OpGradcheck, PoolingAttentionAndBroadcast) {
  expect_ok(
      [](ad::Graph<double>& g, const NamedTensors<double>& p) {
        const auto x = g.parameter("x", p.at("x"));
        const auto m = ad::sigmoid(g, ad::add(g, ad::global_avg_pool(g, x), ad::global_max_pool(g, x)));
        const auto y = ad::scale_channels(g, x, m);
        const auto z = ad::add(g, y, ad::broadcast_spatial(g, m, 4, 3));
        return contract(g, ad::relu(g, z), 3);
      },
      {{"x", random_tensor<double>({4, 3, 3}, rng)}});
}

TEST_F(OpGradcheck, ConcatAndReshape) {
  expect_ok(
      [](ad::Graph<double>& g, const NamedTensors<double>& p) {
        const auto a = g.parameter("a", p.at("a"));
        const auto b = g.parameter("b", p.at("b"));
        const auto c = ad::concat_channels(g, {a, b, a});
        return contract(g, ad::reshape(g, c, {30}), 4);
      },
      {{"a", random_tensor<double>({3, 2, 2}, rng)}, {"b", random_tensor<double>({3, 2, 1}, rng)}});
}

TEST_F(OpGradcheck, Losses) {
  Tensor64 target({3, 3, 3});
  for (std::size_t i = 0; i < target.size(); i += 2) target[i] = 1.0;
  expect_ok(
      [target](ad::Graph<double>& g, const NamedTensors<double>& p) {
        const auto pred = ad::sigmoid(g, g.parameter("z", p.at("z")));
        return ad::add(g, ad::bce_loss(g, pred, target), ad::soft_dice_loss(g, pred, target));
      },
      {{"z", random_tensor<double>({3, 3, 3}, rng, -2.0, 2.0)}});
}

// --- adam ---------------------------------------------------------------------

TEST(Adam, FirstStepClosedForm) {
  NamedTensors<double> p{{"w", Tensor64({1}, 0.0)}};
  AdamState<double> s;
  adam_step(p, {{"w", Tensor64({1}, 1.0)}}, s);
  EXPECT_EQ(s.step, 1u);
  EXPECT_NEAR(p.at("w")[0], -1e-3 * (1.0 / (1.0 + 1e-8)), 1e-15);

  NamedTensors<double> q{{"w", Tensor64({1}, 0.0)}};
  AdamState<double> t;
  adam_step(q, {{"w", Tensor64({1}, -1.0)}}, t);
  EXPECT_NEAR(q.at("w")[0], 1e-3, 1e-10);
}

TEST(Adam, ZeroGradientStillCounts) {
  NamedTensors<float> p{{"w", Tensor({2, 2}, 0.5f)}};
  AdamState<float> s;
  adam_step(p, {{"w", Tensor({2, 2})}}, s);
  adam_step(p, {{"w", Tensor({2, 2})}}, s);
  EXPECT_EQ(s.step, 2u);
  EXPECT_TRUE(p.at("w") == Tensor({2, 2}, 0.5f));
}

TEST(Adam, ShapeMismatchAndBadHyper) {
  NamedTensors<float> p{{"w", Tensor({2})}};
  AdamState<float> s;
  EXPECT_THROW(adam_step(p, {{"w", Tensor({3})}}, s), ShapeError);
  s.hyper.lr = -1.0;
  EXPECT_THROW(adam_step(p, {{"w", Tensor({2})}}, s), ShapeError);
}

TEST(Adam, BitwiseDeterministic) {
  Rng rng(12);
  const NamedTensors<float> p0{{"a", random_tensor<float>({5, 3}, rng)}, {"b", random_tensor<float>({7}, rng)}};
  const NamedTensors<float> g{{"a", random_tensor<float>({5, 3}, rng)}, {"b", random_tensor<float>({7}, rng)}};
  auto run = [&] {
    auto p = p0;
    AdamState<float> s;
    for (int i = 0; i < 5; ++i) adam_step(p, g, s);
    return std::pair{p, s.m};
  };
  const auto [p1, m1] = run();
  const auto [p2, m2] = run();
  for (const auto& [name, t] : p1) {
    EXPECT_TRUE(bitwise_equal(t, p2.at(name)));
    EXPECT_TRUE(bitwise_equal(m1.at(name), m2.at(name)));
  }
}

}  // namespace
}  // namespace segnet

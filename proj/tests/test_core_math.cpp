#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace dde;
using testutil::fd_max_rel_error;
using testutil::random_tensor;

// ---- tensor ----

TEST(Tensor, ShapeAndFill) {
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_DOUBLE_EQ(t.at(1, 2), 1.5);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>(3)), DimensionError);
}

TEST(Tensor, ReshapeKeepsData) {
  Tensor t({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  Tensor r = t.reshaped({3, 2});
  EXPECT_EQ(r.shape(), (Shape{3, 2}));
  EXPECT_EQ(r.vec(), t.vec());
  EXPECT_THROW(t.reshaped({4, 2}), DimensionError);
}

TEST(Tensor, RowsAndConcat) {
  Tensor a({2, 2}, std::vector<double>{1, 2, 3, 4}), b({1, 2}, std::vector<double>{5, 6});
  Tensor c = concat_rows({&a, &b});
  EXPECT_EQ(c.shape(), (Shape{3, 2}));
  EXPECT_EQ(c.rows(1, 3).vec(), (std::vector<double>{3, 4, 5, 6}));
  Tensor bad({1, 3});
  EXPECT_THROW(concat_rows({&a, &bad}), DimensionError);
}

// ---- rng ----

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    auto x = a.next();
    EXPECT_EQ(x, b.next());
    differs = differs || x != c.next();
  }
  EXPECT_TRUE(differs);
}

TEST(Rng, NormalMoments) {
  Rng r(7);
  const int n = 100000;
  double s = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    double x = r.normal();
    s += x;
    s2 += x * x;
  }
  double mean = s / n, var = s2 / n - mean * mean;
  EXPECT_NEAR(mean, 0.0, 0.02);
  EXPECT_NEAR(var, 1.0, 0.05);
}

TEST(Rng, UniformAndBelow) {
  Rng r(3);
  std::vector<int> hist(5, 0);
  for (int i = 0; i < 50000; ++i) {
    double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    ++hist[r.below(5)];
  }
  for (int h : hist) EXPECT_NEAR(h, 10000, 400);
}

TEST(Rng, PermutationIsBijection) {
  Rng r(11);
  auto p = r.permutation(257);
  std::sort(p.begin(), p.end());
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_EQ(p[i], i);
}

TEST(Rng, DerivedStreamsDiffer) {
  Rng a = Rng::derive(5, 0), b = Rng::derive(5, 1), c = Rng::derive(5, 0);
  EXPECT_NE(a.next(), b.next());
  Rng a2 = Rng::derive(5, 0);
  a2.next();
  EXPECT_EQ(c.next(), Rng::derive(5, 0).next());
}

// ---- autodiff ----

TEST(Autodiff, SquareAtThree) {
  Tape t;
  Var w = t.variable(Tensor::scalar(3.0));
  auto g = t.gradients(ad::square(w), {w});
  EXPECT_DOUBLE_EQ(g[0].item(), 6.0);
}

TEST(Autodiff, ConstantHasZeroGradient) {
  Tape t;
  Var w = t.variable(Tensor::scalar(3.0));
  Var c = t.constant(Tensor::scalar(5.0));
  auto g = t.gradients(ad::add(ad::scale(w, 0.0), c), {w});
  EXPECT_DOUBLE_EQ(g[0].item(), 0.0);
}

TEST(Autodiff, NonFiniteValueThrows) {
  Tape t;
  Var w = t.variable(Tensor::scalar(-1.0));
  EXPECT_THROW(ad::log(w), NumericError);
  Var big = t.variable(Tensor::scalar(1000.0));
  EXPECT_THROW(ad::exp(big), NumericError);
}

TEST(Autodiff, RootMustBeSingleValue) {
  Tape t;
  Var w = t.variable(Tensor({3}, 1.0));
  EXPECT_THROW(t.gradients(w, {w}), DimensionError);
}

TEST(Autodiff, ElementwisePrimitivesMatchFiniteDifferences) {
  Rng rng(101);
  using testutil::Fn;
  std::vector<std::pair<const char*, Fn>> unary = {
      {"exp", [](Tape&, const std::vector<Var>& v) { return ad::exp(v[0]); }},
      {"square", [](Tape&, const std::vector<Var>& v) { return ad::square(v[0]); }},
      {"abs", [](Tape&, const std::vector<Var>& v) { return ad::abs(v[0]); }},
      {"relu", [](Tape&, const std::vector<Var>& v) { return ad::relu(v[0]); }},
      {"leaky_relu", [](Tape&, const std::vector<Var>& v) { return ad::leaky_relu(v[0], 0.2); }},
      {"logistic", [](Tape&, const std::vector<Var>& v) { return ad::logistic(v[0]); }},
      {"atan", [](Tape&, const std::vector<Var>& v) { return ad::atan(v[0]); }},
      {"clamp", [](Tape&, const std::vector<Var>& v) { return ad::clamp(v[0], -0.5, 0.5); }},
      {"scale", [](Tape&, const std::vector<Var>& v) { return ad::scale(v[0], -2.5); }},
      {"add_scalar", [](Tape&, const std::vector<Var>& v) { return ad::add_scalar(v[0], 0.7); }},
      {"sum", [](Tape&, const std::vector<Var>& v) { return ad::sum(v[0]); }},
      {"mean", [](Tape&, const std::vector<Var>& v) { return ad::mean(v[0]); }},
      {"sum_last", [](Tape&, const std::vector<Var>& v) { return ad::sum_last(v[0]); }},
      {"mean_last", [](Tape&, const std::vector<Var>& v) { return ad::mean_last(v[0]); }},
      {"sum_rows", [](Tape&, const std::vector<Var>& v) { return ad::sum_rows(v[0]); }},
      {"select_last", [](Tape&, const std::vector<Var>& v) { return ad::select_last(v[0], {0, 3, 2}); }},
      {"slice_rows", [](Tape&, const std::vector<Var>& v) { return ad::slice_rows(v[0], 1, 3); }},
      {"reshape", [](Tape&, const std::vector<Var>& v) { return ad::reshape(v[0], {4, 3}); }},
  };
  for (int trial = 0; trial < 5; ++trial)
    for (auto& [name, f] : unary) {
      Tensor x = random_tensor({3, 4}, rng, -2, 2);
      EXPECT_LE(fd_max_rel_error(f, {x}, rng), 1e-4) << name;
    }
  // log needs positive inputs
  for (int trial = 0; trial < 5; ++trial) {
    Tensor x = random_tensor({3, 4}, rng, 0.2, 3);
    EXPECT_LE(fd_max_rel_error([](Tape&, const std::vector<Var>& v) { return ad::log(v[0]); }, {x}, rng), 1e-4);
  }
}

TEST(Autodiff, BinaryPrimitivesMatchFiniteDifferences) {
  Rng rng(102);
  using testutil::Fn;
  std::vector<std::pair<const char*, Fn>> binary = {
      {"add", [](Tape&, const std::vector<Var>& v) { return ad::add(v[0], v[1]); }},
      {"sub", [](Tape&, const std::vector<Var>& v) { return ad::sub(v[0], v[1]); }},
      {"mul", [](Tape&, const std::vector<Var>& v) { return ad::mul(v[0], v[1]); }},
      {"div", [](Tape&, const std::vector<Var>& v) { return ad::div(v[0], v[1]); }},
  };
  for (int trial = 0; trial < 5; ++trial)
    for (auto& [name, f] : binary) {
      Tensor a = random_tensor({2, 5}, rng, -2, 2), b = random_tensor({2, 5}, rng, 0.5, 2);
      EXPECT_LE(fd_max_rel_error(f, {a, b}, rng), 1e-4) << name;
      Tensor s = random_tensor({}, rng, 0.5, 2);
      EXPECT_LE(fd_max_rel_error(f, {a, s}, rng), 1e-4) << name << " scalar broadcast";
    }
}

TEST(Autodiff, LayerPrimitivesMatchFiniteDifferences) {
  Rng rng(103);
  for (int trial = 0; trial < 3; ++trial) {
    Tensor x = random_tensor({3, 5}, rng), w = random_tensor({4, 5}, rng), b = random_tensor({4}, rng);
    auto lin = [](Tape&, const std::vector<Var>& v) { return ad::add_bias_rows(ad::linear(v[0], v[1]), v[2]); };
    EXPECT_LE(fd_max_rel_error(lin, {x, w, b}, rng), 1e-4);

    Tensor img = random_tensor({2, 2, 5, 5}, rng), k = random_tensor({3, 2, 3, 3}, rng), kb = random_tensor({3}, rng);
    for (auto [stride, pad] : {std::pair<std::size_t, std::size_t>{1, 0}, {1, 1}, {2, 1}}) {
      auto conv = [s = stride, p = pad](Tape&, const std::vector<Var>& v) {
        return ad::add_bias_channels(ad::conv2d(v[0], v[1], s, p), v[2]);
      };
      EXPECT_LE(fd_max_rel_error(conv, {img, k, kb}, rng), 1e-4) << "stride " << stride << " pad " << pad;
    }

    Tensor sw = random_tensor({3, 2, 3, 3}, rng);
    auto std_fn = [](Tape&, const std::vector<Var>& v) { return ad::standardize(v[0], 1.7); };
    EXPECT_LE(fd_max_rel_error(std_fn, {sw}, rng), 1e-4);
  }
}

namespace {

Tensor naive_conv(const Tensor& x, const Tensor& k, std::size_t s, std::size_t p) {
  std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), O = k.dim(0), K = k.dim(2);
  std::size_t Ho = (H + 2 * p - K) / s + 1, Wo = (W + 2 * p - K) / s + 1;
  Tensor y({B, O, Ho, Wo});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double acc = 0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t a = 0; a < K; ++a)
              for (std::size_t bb = 0; bb < K; ++bb) {
                long r = static_cast<long>(i * s + a) - static_cast<long>(p);
                long q = static_cast<long>(j * s + bb) - static_cast<long>(p);
                if (r < 0 || q < 0 || r >= static_cast<long>(H) || q >= static_cast<long>(W)) continue;
                acc += k[((o * C + c) * K + a) * K + bb] * x[((b * C + c) * H + r) * W + q];
              }
          y[((b * O + o) * Ho + i) * Wo + j] = acc;
        }
  return y;
}

Tensor conv_value(const Tensor& x, const Tensor& k, std::size_t s, std::size_t p) {
  Tape t;
  return ad::conv2d(t.constant(x), t.constant(k), s, p).value();
}

}  // namespace

TEST(Conv2d, OutputSizeFormula) {
  EXPECT_EQ(ad::conv_out_size(32, 3, 2, 1), 16u);
  EXPECT_EQ(ad::conv_out_size(5, 3, 1, 0), 3u);
  EXPECT_EQ(ad::conv_out_size(2, 3, 2, 1), 1u);
  EXPECT_THROW(ad::conv_out_size(1, 5, 1, 0), DimensionError);
}

TEST(Conv2d, IdentityKernel) {
  Rng rng(4);
  Tensor x = random_tensor({1, 1, 4, 4}, rng);
  Tensor y = conv_value(x, Tensor({1, 1, 1, 1}, 1.0), 1, 0);
  EXPECT_EQ(y.vec(), x.vec());
}

TEST(Conv2d, ZeroKernel) {
  Rng rng(5);
  Tensor x = random_tensor({2, 3, 5, 5}, rng);
  Tensor y = conv_value(x, Tensor({2, 3, 3, 3}, 0.0), 1, 1);
  for (double v : y.vec()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, MatchesNaiveOracle) {
  Rng rng(6);
  Tensor x = random_tensor({1, 1, 4, 4}, rng), k = random_tensor({1, 1, 3, 3}, rng);
  Tensor y = conv_value(x, k, 1, 0), ref = naive_conv(x, k, 1, 0);
  ASSERT_EQ(y.shape(), ref.shape());
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
}

TEST(Conv2d, MatchesNaiveOracleAllSmallShapes) {
  Rng rng(7);
  std::size_t cases = 0;
  for (std::size_t C = 1; C <= 3; ++C)
    for (std::size_t O = 1; O <= 3; ++O)
      for (std::size_t H = 1; H <= 6; ++H)
        for (std::size_t K = 1; K <= 3; ++K)
          for (std::size_t s = 1; s <= 2; ++s)
            for (std::size_t p = 0; p <= 1; ++p) {
              if (H + 2 * p < K) continue;
              std::size_t W = 7 - H;  // mix aspect ratios
              if (W + 2 * p < K) continue;
              Tensor x = random_tensor({2, C, H, W}, rng), k = random_tensor({O, C, K, K}, rng);
              Tensor y = conv_value(x, k, s, p), ref = naive_conv(x, k, s, p);
              ASSERT_EQ(y.shape(), ref.shape());
              for (std::size_t i = 0; i < y.size(); ++i) ASSERT_NEAR(y[i], ref[i], 1e-12);
              ++cases;
            }
  EXPECT_GT(cases, 300u);
}

TEST(Conv2d, ChannelMismatchThrows) {
  Tape t;
  Var x = t.constant(Tensor({1, 2, 4, 4})), k = t.constant(Tensor({1, 3, 3, 3}));
  EXPECT_THROW(ad::conv2d(x, k, 1, 1), DimensionError);
}

TEST(Autodiff, DeterministicGradients) {
  Rng r1(9), r2(9);
  auto run = [](Rng& rng) {
    Tape t;
    Var x = t.constant(random_tensor({2, 2, 6, 6}, rng));
    Var k = t.variable(random_tensor({3, 2, 3, 3}, rng));
    Var y = ad::sum(ad::square(ad::leaky_relu(ad::conv2d(x, ad::standardize(k, 1.7), 2, 1), 0.2)));
    return t.gradients(y, {k})[0];
  };
  EXPECT_EQ(run(r1), run(r2));
}

// ---- standardization ----

TEST(Standardize, ConstantRowIsZero) {
  Tensor w({2, 3}, std::vector<double>{4, 4, 4, 1, 2, 3});
  Tensor s = ad::standardize_value(w, 1.0);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(s[j], 0.0);
}

TEST(Standardize, HandEvaluatedRow) {
  Tensor w({1, 3}, std::vector<double>{1, 2, 3});
  Tensor s = ad::standardize_value(w, 1.0);
  double sd = std::sqrt(2.0 / 3.0), denom = sd * std::sqrt(3.0);
  EXPECT_NEAR(s[0], -1.0 / denom, 1e-15);
  EXPECT_NEAR(s[1], 0.0, 1e-15);
  EXPECT_NEAR(s[2], 1.0 / denom, 1e-15);
}

TEST(Standardize, FanInMomentsProperty) {
  Rng rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    std::size_t O = 1 + rng.below(4), A = 2 + rng.below(30);
    Tensor w = random_tensor({O, A}, rng, -3, 3);
    Tensor s = ad::standardize_value(w, 1.0);
    for (std::size_t o = 0; o < O; ++o) {
      double m = 0, v = 0;
      for (std::size_t a = 0; a < A; ++a) m += s[o * A + a];
      m /= static_cast<double>(A);
      for (std::size_t a = 0; a < A; ++a) v += (s[o * A + a] - m) * (s[o * A + a] - m);
      v /= static_cast<double>(A);
      EXPECT_NEAR(m, 0.0, 1e-10);
      EXPECT_NEAR(v, 1.0 / static_cast<double>(A), 1e-8);
    }
  }
}

TEST(Standardize, GainScalesOutput) {
  Rng rng(13);
  Tensor w = random_tensor({2, 3, 3, 3}, rng);
  Tensor a = ad::standardize_value(w, 1.0), b = ad::standardize_value(w, 1.7);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(b[i], 1.7 * a[i], 1e-14);
}

// ---- adam ----

TEST(Adam, ZeroGradientKeepsParams) {
  Tensor p({3}, std::vector<double>{1, -2, 3});
  Tensor before = p;
  AdamState st;
  adam_step({&p}, {Tensor({3}, 0.0)}, st, 1e-3);
  EXPECT_EQ(p, before);
}

TEST(Adam, OneStepHandTrace) {
  Tensor p = Tensor::scalar(0.5);
  AdamState st;
  adam_step({&p}, {Tensor::scalar(1.0)}, st, 1e-3);
  double m = 0.1, v = 0.001;
  double mh = m / (1 - 0.9), vh = v / (1 - 0.999);
  EXPECT_NEAR(p.item(), 0.5 - 1e-3 * mh / (std::sqrt(vh) + 1e-8), 1e-12);
}

TEST(Adam, TwoStepHandTrace) {
  Tensor p = Tensor::scalar(0.5);
  AdamState st;
  const double g = 0.3, lr = 0.01;
  adam_step({&p}, {Tensor::scalar(g)}, st, lr);
  adam_step({&p}, {Tensor::scalar(g)}, st, lr);
  double expect = 0.5;
  double m = 0, v = 0;
  for (int t = 1; t <= 2; ++t) {
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    expect -= lr * mh / (std::sqrt(vh) + 1e-8);
  }
  EXPECT_NEAR(p.item(), expect, 1e-12);
}

TEST(Adam, NonFiniteGradientLeavesParamsUntouched) {
  Tensor a({2}, 1.0), b({2}, 2.0);
  AdamState st;
  Tensor bad({2}, std::vector<double>{0.0, std::nan("")});
  EXPECT_THROW(adam_step({&a, &b}, {Tensor({2}, 1.0), bad}, st, 0.1), NumericError);
  EXPECT_EQ(a, Tensor({2}, 1.0));
  EXPECT_EQ(st.t, 0);
}

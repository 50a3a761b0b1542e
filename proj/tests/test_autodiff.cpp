#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <tuple>

#include "tpn/autodiff.hpp"
#include "tpn/rng.hpp"

using namespace tpn;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Contract an op's output against fixed random weights so any op becomes a
// scalar function suitable for grad_check.
double check_unary(const std::function<Var(const Var&)>& op, const Tensor& x, std::uint64_t seed) {
  Tape probe;
  const Shape out_shape = op(probe.constant(x)).shape();
  Rng rng(seed);
  const Tensor w = random_tensor(out_shape, rng);
  return grad_check(
      [&](Tape& tape, Var v) { return reduce_sum(mul(op(v), tape.constant(w))); }, x, 1e-5);
}

}  // namespace

TEST(ForwardOps, ReluClampsNegatives) {
  Tape tape;
  auto y = relu(tape.constant(Tensor::vector({-1.0, 2.0})));
  EXPECT_EQ(y.value(), Tensor::vector({0.0, 2.0}));
}

TEST(ForwardOps, NanPropagatesThroughReluPoolAndLog) {
  Tape tape;
  const double nan = std::nan("");
  EXPECT_TRUE(std::isnan(relu(tape.constant(Tensor::vector({nan}))).value()[0]));
  EXPECT_TRUE(std::isnan(log(tape.constant(Tensor::vector({nan}))).value()[0]));
  Tensor x(Shape{1, 4}, std::vector<double>{1, nan, 2, 0});
  EXPECT_TRUE(std::isnan(maxpool2x2(tape.constant(x), 1, 2, 2).value()[0]));
}

TEST(ForwardOps, SoftmaxOfEqualLogitsIsUniform) {
  Tape tape;
  auto y = softmax(tape.constant(Tensor::vector({0.0, 0.0})));
  EXPECT_DOUBLE_EQ(y.value()[0], 0.5);
  EXPECT_DOUBLE_EQ(y.value()[1], 0.5);
}

TEST(ForwardOps, SquaredDistanceOfVectors) {
  Tape tape;
  auto d = squared_euclidean_distance(tape.constant(Tensor::vector({0.0, 0.0})), tape.constant(Tensor::vector({3.0, 4.0})));
  EXPECT_TRUE(d.value().is_scalar());
  EXPECT_DOUBLE_EQ(d.value().item(), 25.0);
}

TEST(ForwardOps, PairwiseSquaredDistances) {
  Tape tape;
  auto a = tape.constant(Tensor::matrix({{0, 0}, {1, 1}}));
  auto b = tape.constant(Tensor::matrix({{0, 0}, {3, 4}, {1, 0}}));
  auto d = squared_euclidean_distance(a, b).value();
  ASSERT_EQ(d.shape(), (Shape{2, 3}));
  EXPECT_EQ(d, Tensor::matrix({{0, 25, 1}, {2, 13, 1}}));
}

TEST(ForwardOps, MatmulAndBias) {
  Tape tape;
  auto x = tape.constant(Tensor::matrix({{1, 2}, {3, 4}}));
  auto w = tape.constant(Tensor::matrix({{1, 0, 1}, {0, 1, 1}}));
  auto b = tape.constant(Tensor::vector({0.5, -0.5, 0.0}));
  EXPECT_EQ(add_bias(matmul(x, w), b).value(), Tensor::matrix({{1.5, 1.5, 3}, {3.5, 3.5, 7}}));
}

TEST(ForwardOps, MatmulMatchesNaiveProductOnLargeShapes) {
  Rng rng(21);
  for (auto [n, k, p] : {std::tuple<std::size_t, std::size_t, std::size_t>{3, 700, 300}, {37, 9, 513}, {5, 1, 1}}) {
    Tensor a = random_tensor(Shape{n, k}, rng), b = random_tensor(Shape{k, p}, rng);
    for (std::size_t i = 0; i < a.size(); i += 3) a[i] = 0.0;
    Tape tape;
    const Tensor c = matmul(tape.constant(a), tape.constant(b)).value();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < p; ++j) {
        double want = 0.0;
        for (std::size_t l = 0; l < k; ++l) want += a(i, l) * b(l, j);
        EXPECT_NEAR(c(i, j), want, 1e-12 * static_cast<double>(k));
      }
  }
}

TEST(Backward, ZeroGradientRowsLeaveWeightGradientBitwiseUnchanged) {
  Rng rng(22);
  const Tensor w = random_tensor(Shape{6, 5}, rng);
  const Tensor xs = random_tensor(Shape{7, 6}, rng), xt = random_tensor(Shape{9, 6}, rng);
  const Tensor proj = random_tensor(Shape{7, 5}, rng);
  auto grad_w = [&](bool with_extra_rows) {
    Tape tape;
    auto wv = tape.variable(w, "w");
    Var x = tape.constant(xs);
    if (with_extra_rows) x = concat_rows(x, tape.constant(xt));
    auto y = slice_rows(matmul(x, wv), 0, 7);
    return *tape.backward(reduce_sum(mul(y, tape.constant(proj)))).find("w");
  };
  EXPECT_EQ(grad_w(false), grad_w(true));
}

TEST(ForwardOps, GatherPickConcat) {
  Tape tape;
  auto x = tape.constant(Tensor::matrix({{1, 2}, {3, 4}, {5, 6}}));
  EXPECT_EQ(gather_rows(x, {2, 0, 2}).value(), Tensor::matrix({{5, 6}, {1, 2}, {5, 6}}));
  EXPECT_EQ(pick(x, {1, 0, 1}).value(), Tensor::vector({2.0, 3.0, 6.0}));
  EXPECT_EQ(concat_rows(x, tape.constant(Tensor::matrix({{7, 8}}))).value().shape(), (Shape{4, 2}));
  EXPECT_EQ(reduce_mean(x).value().item(), 3.5);
  EXPECT_EQ(row_sum(x).value(), Tensor::vector({3.0, 7.0, 11.0}));
}

TEST(ForwardOps, ShapeMismatchNamesOpAndShapes) {
  Tape tape;
  auto a = tape.constant(Tensor(Shape{2, 3}));
  auto b = tape.constant(Tensor(Shape{2, 2}));
  try {
    (void)add(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos);
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[2x2]"), std::string::npos);
  }
  EXPECT_THROW((void)matmul(a, a), ShapeError);
  EXPECT_THROW((void)squared_euclidean_distance(a, b), ShapeError);
  EXPECT_THROW((void)gather_rows(a, {5}), ShapeError);
}

TEST(ForwardOps, LogOfNonPositiveIsDomainError) {
  Tape tape;
  EXPECT_THROW((void)log(tape.constant(Tensor::vector({1.0, 0.0}))), DomainError);
  EXPECT_THROW((void)log(tape.constant(Tensor::vector({-2.0}))), DomainError);
}

TEST(ForwardOps, ConstantsRecordNoBackward) {
  Tape tape;
  auto a = tape.constant(Tensor::vector({1.0, 2.0}));
  auto y = square(a);
  EXPECT_FALSE(y.requires_grad());
  auto x = tape.variable(Tensor::vector({1.0, 2.0}));
  EXPECT_TRUE(add(x, a).requires_grad());
}

TEST(Backward, SquareAtThree) {
  Tape tape;
  auto x = tape.variable(Tensor::scalar(3.0), "x");
  auto g = tape.backward(square(x));
  EXPECT_DOUBLE_EQ(g.at("x").item(), 6.0);
}

TEST(Backward, SumOfSoftmaxHasZeroGradient) {
  Rng rng(7);
  Tape tape;
  auto z = tape.variable(random_tensor(Shape{5}, rng, -3, 3));
  auto g = tape.backward(reduce_sum(softmax(z))).of(z);
  for (double v : g.data()) EXPECT_NEAR(v, 0.0, 1e-15);
}

TEST(Backward, SquaredDistanceGradient) {
  Tape tape;
  auto x = tape.variable(Tensor::vector({1.0, 1.0}));
  auto c = tape.constant(Tensor::vector({0.0, 0.0}));
  auto g = tape.backward(squared_euclidean_distance(x, c)).of(x);
  EXPECT_EQ(g, Tensor::vector({2.0, 2.0}));
}

TEST(Backward, NonScalarLossIsRejected) {
  Tape tape;
  auto x = tape.variable(Tensor::vector({1.0, 2.0}));
  EXPECT_THROW((void)tape.backward(square(x)), ShapeError);
}

TEST(Backward, ConsumesTapeAndReportsUnusedLeaves) {
  Tape tape;
  auto x = tape.variable(Tensor::vector({1.0, 2.0}), "x");
  auto unused = tape.variable(Tensor::vector({5.0}), "unused");
  auto g = tape.backward(reduce_sum(square(x)));
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_EQ(g.at("unused"), Tensor::vector({0.0}));
  EXPECT_EQ(g.at("x"), Tensor::vector({2.0, 4.0}));
  (void)unused;
}

TEST(Backward, SharedSubexpressionAccumulates) {
  Tape tape;
  auto x = tape.variable(Tensor::scalar(2.0));
  auto y = mul(x, x);  // x^2
  auto g = tape.backward(add(y, mul(y, x))).of(x);  // x^2 + x^3 -> 2x + 3x^2
  EXPECT_DOUBLE_EQ(g.item(), 4.0 + 12.0);
}

TEST(Backward, DeterministicBitwise) {
  auto run = [] {
    Rng rng(99);
    Tape tape;
    auto a = tape.variable(random_tensor(Shape{6, 4}, rng), "a");
    auto b = tape.variable(random_tensor(Shape{3, 4}, rng), "b");
    auto loss = reduce_mean(log(clamp(softmax(negate(squared_euclidean_distance(a, b))), 1e-12, 1.0)));
    return tape.backward(loss);
  };
  auto g1 = run(), g2 = run();
  EXPECT_EQ(g1.at("a"), g2.at("a"));
  EXPECT_EQ(g1.at("b"), g2.at("b"));
}

TEST(GradCheck, QuadraticIsExactUpToRounding) {
  const double err = grad_check([](Tape&, Var x) { return square(x); }, Tensor::scalar(3.0), 1e-5);
  EXPECT_LT(err, 1e-8);
}

TEST(GradCheck, NonFiniteFunctionIsDomainError) {
  EXPECT_THROW((void)grad_check([](Tape&, Var x) { return log(x); }, Tensor::scalar(1e-300), 1e-5), DomainError);
}

// Every differentiable op against central differences at 100 random points.
TEST(GradCheck, EveryOpAtRandomPoints) {
  struct Case {
    const char* name;
    Shape shape;
    std::function<Var(const Var&)> op;
    double lo = -2.0, hi = 2.0;
  };
  Rng rng(2024);
  const Tensor w34 = random_tensor(Shape{3, 4}, rng);
  const Tensor m43 = random_tensor(Shape{4, 3}, rng);
  const Tensor b4 = random_tensor(Shape{4}, rng);
  const Tensor p23 = random_tensor(Shape{2, 3}, rng);
  const Tensor o53 = random_tensor(Shape{5, 3}, rng);

  std::vector<Case> cases = {
      {"matmul_lhs", {5, 3}, [&](const Var& x) { return matmul(x, x.tape().constant(w34)); }},
      {"matmul_rhs", {4, 3}, [&](const Var& x) { return matmul(x.tape().constant(m43.reshaped({4, 3})), reshape(x, {3, 4})); }},
      {"add", {3, 4}, [&](const Var& x) { return add(x, x.tape().constant(w34)); }},
      {"sub", {3, 4}, [&](const Var& x) { return sub(x.tape().constant(w34), x); }},
      {"mul", {3, 4}, [&](const Var& x) { return mul(x, x); }},
      {"add_bias_x", {3, 4}, [&](const Var& x) { return add_bias(x, x.tape().constant(b4)); }},
      {"add_bias_b", {4}, [&](const Var& b) { return add_bias(b.tape().constant(w34), b); }},
      {"scale", {3, 4}, [](const Var& x) { return scale(x, -1.7); }},
      {"affine", {3, 4}, [](const Var& x) { return affine(x, 0.3, 2.0); }},
      {"negate", {3, 4}, [](const Var& x) { return negate(x); }},
      {"relu", {3, 4}, [](const Var& x) { return relu(x); }},
      {"exp", {3, 4}, [](const Var& x) { return exp(x); }},
      {"log", {3, 4}, [](const Var& x) { return log(x); }, 0.2, 3.0},
      {"square", {3, 4}, [](const Var& x) { return square(x); }},
      {"clamp", {3, 4}, [](const Var& x) { return clamp(x, -0.5, 0.5); }},
      {"reduce_sum", {3, 4}, [](const Var& x) { return reduce_sum(x); }},
      {"reduce_mean", {3, 4}, [](const Var& x) { return reduce_mean(x); }},
      {"row_sum", {3, 4}, [](const Var& x) { return row_sum(x); }},
      {"sqdist_lhs", {2, 3}, [&](const Var& x) { return squared_euclidean_distance(x, x.tape().constant(o53)); }},
      {"sqdist_rhs", {5, 3}, [&](const Var& x) { return squared_euclidean_distance(x.tape().constant(p23), x); }},
      {"sqdist_self", {4, 3}, [](const Var& x) { return squared_euclidean_distance(x, x); }},
      {"softmax", {3, 4}, [](const Var& x) { return softmax(x); }},
      {"normalize_rows", {3, 4}, [](const Var& x) { return normalize_rows(x); }, 0.1, 2.0},
      {"gather_rows", {3, 4}, [](const Var& x) { return gather_rows(x, {2, 0, 2, 1}); }},
      {"pick", {3, 4}, [](const Var& x) { return pick(x, {3, 0, 1}); }},
      {"concat_rows", {3, 4}, [&](const Var& x) { return concat_rows(x.tape().constant(w34), x); }},
  };

  for (const auto& c : cases) {
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      Tensor x = random_tensor(c.shape, rng, c.lo, c.hi);
      // Keep non-smooth ops away from their kinks.
      if (std::string(c.name) == "relu" || std::string(c.name) == "clamp") {
        for (auto& v : x.data()) {
          for (double kink : {0.0, -0.5, 0.5})
            if (std::abs(v - kink) < 1e-3) v = kink + 2e-3;
        }
      }
      worst = std::max(worst, check_unary(c.op, x, 1000 + trial));
    }
    EXPECT_LE(worst, 1e-4) << c.name;
  }
}

namespace {

// Direct nested-loop convolution, independent of the im2col path.
Tensor conv_oracle(const Tensor& x, const Tensor& w, const Tensor& b, const Conv2dGeometry& g) {
  const std::size_t n = x.shape()[0], oh = g.out_height(), ow = g.out_width();
  Tensor out(Shape{n, g.out_features()});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t o = 0; o < g.out_channels; ++o)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          double acc = b[o];
          for (std::size_t c = 0; c < g.in_channels; ++c)
            for (std::size_t ky = 0; ky < g.kernel; ++ky)
              for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                const double xv = x(s, c * g.height * g.width + (y + ky) * g.width + xx + kx);
                acc += xv * w((c * g.kernel + ky) * g.kernel + kx, o);
              }
          out(s, o * oh * ow + y * ow + xx) = acc;
        }
  return out;
}

}  // namespace

TEST(Conv, MatchesDirectConvolution) {
  Rng rng(5);
  Conv2dGeometry g{2, 6, 5, 3, 3};
  const Tensor x = random_tensor(Shape{2, g.in_features()}, rng);
  const Tensor w = random_tensor(Shape{g.patch(), g.out_channels}, rng);
  const Tensor b = random_tensor(Shape{g.out_channels}, rng);
  Tape tape;
  auto y = conv2d(tape.constant(x), tape.constant(w), tape.constant(b), g).value();
  const Tensor want = conv_oracle(x, w, b, g);
  ASSERT_EQ(y.shape(), want.shape());
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], want[i], 1e-12);
}

TEST(Conv, GradientsMatchFiniteDifferences) {
  Rng rng(6);
  Conv2dGeometry g{2, 6, 6, 3, 3};
  const Tensor x = random_tensor(Shape{2, g.in_features()}, rng);
  const Tensor w = random_tensor(Shape{g.patch(), g.out_channels}, rng);
  const Tensor b = random_tensor(Shape{g.out_channels}, rng);
  const Tensor proj = random_tensor(Shape{2, g.out_features()}, rng);
  auto contract = [&](Tape& t, const Var& y) { return reduce_sum(mul(y, t.constant(proj))); };
  EXPECT_LE(grad_check([&](Tape& t, Var v) { return contract(t, conv2d(v, t.constant(w), t.constant(b), g)); }, x, 1e-5), 1e-6);
  EXPECT_LE(grad_check([&](Tape& t, Var v) { return contract(t, conv2d(t.constant(x), v, t.constant(b), g)); }, w, 1e-5), 1e-6);
  EXPECT_LE(grad_check([&](Tape& t, Var v) { return contract(t, conv2d(t.constant(x), t.constant(w), v, g)); }, b, 1e-5), 1e-6);
}

TEST(MaxPool, ForwardAndGradient) {
  Tape tape;
  Tensor x(Shape{1, 8}, std::vector<double>{1, 5, 2, 0, 3, 4, 7, 6});  // 1 channel, 2x4
  auto y = maxpool2x2(tape.variable(x), 1, 2, 4);
  EXPECT_EQ(y.value(), Tensor::matrix({{5, 7}}));
  Rng rng(8);
  const Tensor proj = random_tensor(Shape{1, 2}, rng);
  EXPECT_LE(grad_check([&](Tape& t, Var v) { return reduce_sum(mul(maxpool2x2(v, 1, 2, 4), t.constant(proj))); }, x, 1e-5), 1e-8);
  EXPECT_THROW((void)maxpool2x2(tape.constant(Tensor(Shape{1, 9})), 1, 3, 3), ShapeError);
}

TEST(SoftmaxProperty, RowsAreDistributions) {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    Tape tape;
    auto y = softmax(tape.constant(random_tensor(Shape{4, 7}, rng, -40, 40))).value();
    for (std::size_t i = 0; i < 4; ++i) {
      double s = 0.0;
      for (double v : y.row(i)) {
        EXPECT_GE(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(SinglePrecision, OpsInstantiateForFloat) {
  BasicTape<float> tape;
  auto x = tape.variable(TensorF::vector({1.0f, -2.0f, 0.5f}), "x");
  auto loss = reduce_sum(square(relu(x)));
  auto g = tape.backward(loss);
  EXPECT_FLOAT_EQ(g.at("x")[0], 2.0f);
  EXPECT_FLOAT_EQ(g.at("x")[1], 0.0f);
  EXPECT_FLOAT_EQ(g.at("x")[2], 1.0f);
}

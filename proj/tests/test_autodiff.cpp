#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "echwr/autodiff.hpp"
#include "test_util.hpp"

using namespace echwr;
using testutil::TD;

TEST(Autodiff, SoftmaxOfUniformLogitsIsUniform) {
  const auto y = softmax(TD::from({3}, {0, 0, 0}), 0);
  for (double v : y.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Autodiff, L2NormalizeThreeFourFive) {
  const auto y = l2_normalize(TD::from({1, 2}, {3, 4}), 1);
  EXPECT_NEAR(y[0], 0.6, 1e-15);
  EXPECT_NEAR(y[1], 0.8, 1e-15);
}

TEST(Autodiff, MatmulShapeMismatchNamesShapes) {
  try {
    matmul(TD::zeros({2, 3}), TD::zeros({4, 2}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    EXPECT_NE(msg.find("[4,2]"), std::string::npos);
  }
}

TEST(Autodiff, ShapeValueCountMismatchRejected) {
  EXPECT_THROW(TD::from({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_THROW(add(TD::zeros({2, 3}), TD::zeros({4})), ShapeError);
}

TEST(Autodiff, SumGradientIsOnes) {
  TD x = TD::from({3}, {1, 2, 3}, true);
  backward(sum_all(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Autodiff, SquareGradient) {
  TD x = TD::from({1}, {2}, true);
  backward(mul(x, x));
  EXPECT_EQ(x.grad()[0], 4.0);
}

TEST(Autodiff, LogSoftmaxPickGradientMatchesFiniteDifferences) {
  auto pick = [](const TD& x) { return slice(log_softmax(x, 0), 0, 2, 3); };
  TD x = TD::from({3}, {1, 2, 3}, true);
  backward(pick(x));
  const std::vector<double> x0{1, 2, 3};
  const auto numeric =
      oracle::finite_diff([&](const std::vector<double>& p) { return pick(TD::from({3}, p)).item(); }, x0);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  const std::vector<double> expected{std::exp(1.0) / z, std::exp(2.0) / z, std::exp(3.0) / z - 1.0};
  for (int i = 0; i < 3; ++i) {
    EXPECT_NEAR(x.grad()[i], numeric[i], 1e-8);
    EXPECT_NEAR(x.grad()[i], -expected[i], 1e-12);
  }
}

TEST(Autodiff, BackwardRejectsNonScalar) {
  TD x = TD::from({2}, {1, 2}, true);
  EXPECT_THROW(backward(mul(x, x)), Error);
}

TEST(Autodiff, NonFiniteForwardIsAnError) {
  EXPECT_THROW(log(TD::from({1}, {-1.0})), NumericError);
  EXPECT_THROW(divide(TD::from({1}, {1.0}), TD::from({1}, {0.0})), NumericError);
}

TEST(Autodiff, RepeatedBackwardAccumulatesAndZeroingReproduces) {
  std::mt19937_64 gen(3);
  TD x = testutil::random_tensor({2, 3}, gen);
  x.set_requires_grad(true);
  TD w = testutil::random_tensor({3, 2}, gen);
  auto loss = [&] { return sum_all(tanh(matmul(x, w))); };
  backward(loss());
  const auto first = std::vector<double>(x.grad().begin(), x.grad().end());
  backward(loss());
  for (std::size_t i = 0; i < first.size(); ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2.0 * first[i]);
  x.zero_grad();
  backward(loss());
  for (std::size_t i = 0; i < first.size(); ++i) EXPECT_EQ(x.grad()[i], first[i]);
}

TEST(Autodiff, BackwardIsDeterministic) {
  auto run = [] {
    std::mt19937_64 gen(9);
    TD x = testutil::random_tensor({3, 4}, gen);
    x.set_requires_grad(true);
    TD y = softmax(matmul(x, transpose(x, 0, 1)), 1);
    backward(sum_all(mul(y, y)));
    return std::vector<double>(x.grad().begin(), x.grad().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(Autodiff, SharedSubgraphVisitedOnce) {
  TD x = TD::from({1}, {3.0}, true);
  TD y = mul(x, x);            // 9
  TD z = add(y, mul(y, x));    // y + y*x = 9 + 27
  backward(z);                 // dz/dx = 2x + 3x^2 = 6 + 27
  EXPECT_DOUBLE_EQ(x.grad()[0], 33.0);
}

TEST(Autodiff, NoGradGuardRecordsNothing) {
  TD x = TD::from({2}, {1, 2}, true);
  NoGradGuard ng;
  TD y = mul(x, x);
  EXPECT_TRUE(y.is_leaf());
  EXPECT_FALSE(y.requires_grad());
}

TEST(Autodiff, BroadcastingTrailingAlignment) {
  const auto y = add(TD::from({2, 3}, {0, 0, 0, 1, 1, 1}), TD::from({3}, {1, 2, 3}));
  EXPECT_EQ(y.shape(), (Shape{2, 3}));
  EXPECT_EQ(testutil::values(y), (std::vector<double>{1, 2, 3, 2, 3, 4}));
  const auto z = mul(TD::from({2, 1}, {2, 3}), TD::from({1, 3}, {1, 2, 3}));
  EXPECT_EQ(testutil::values(z), (std::vector<double>{2, 4, 6, 3, 6, 9}));
}

TEST(Autodiff, MaskedFillAndGather) {
  const auto y = masked_fill(TD::from({2, 2}, {1, 2, 3, 4}), Mask{{1, 2}, {0, 1}}, -5.0);
  EXPECT_EQ(testutil::values(y), (std::vector<double>{1, -5, 3, -5}));
  const auto g = gather_rows(TD::from({3, 2}, {1, 2, 3, 4, 5, 6}), {2, 0, 2});
  EXPECT_EQ(testutil::values(g), (std::vector<double>{5, 6, 1, 2, 5, 6}));
}

TEST(Autodiff, L2NormalizeDegenerateRaises) {
  EXPECT_THROW(l2_normalize(TD::zeros({1, 4}), 1), DegenerateEmbeddingError);
}

TEST(Autodiff, UnfoldKernelLargerThanPaddedInput) {
  EXPECT_THROW(unfold_1d(TD::zeros({1, 2, 1}), 5, 1, 1), ShapeError);
}

TEST(Autodiff, GradcheckSumOfSquaresPasses) {
  std::mt19937_64 gen(1);
  const auto r = gradcheck([](const TD& x) { return sum_all(mul(x, x)); }, testutil::random_tensor({4, 3}, gen, -3, 3),
                           1e-6);
  EXPECT_TRUE(r.passed) << r.max_rel_error;
}

TEST(Autodiff, GradcheckReportsWrongGradient) {
  // relu at a kink: the one-sided analytic value disagrees with the symmetric difference.
  const auto r = gradcheck([](const TD& x) { return sum_all(relu(x)); }, TD::from({1}, {0.0}), 1e-4);
  EXPECT_FALSE(r.passed);
  EXPECT_EQ(r.worst_index, 0u);
  EXPECT_NEAR(r.numeric_at_worst, 0.5, 1e-9);
}

TEST(Autodiff, GradcheckNonFiniteRaises) {
  EXPECT_THROW(gradcheck([](const TD& x) { return sum_all(log(x)); }, TD::from({1}, {1e-300}), 1e-4), NumericError);
}

// ---------------------------------------------------------------------------
// Every primitive against central differences, 100 random instances each.

namespace {

struct PrimitiveCase {
  const char* name;
  Shape shape;
  std::function<TD(const TD&, std::mt19937_64&)> build;  // returns a scalar
  double lo = -1.0, hi = 1.0;
};

// A fixed random projection turns any output into a scalar with a generic gradient.
TD project(const TD& y, std::mt19937_64& gen) {
  return sum_all(mul(y, testutil::random_tensor(y.shape(), gen)));
}

}  // namespace

TEST(Autodiff, EveryPrimitiveMatchesFiniteDifferences) {
  const std::vector<PrimitiveCase> cases = {
      {"add", {2, 3}, [](const TD& x, auto& g) { return project(add(x, testutil::random_tensor({3}, g)), g); }},
      {"sub", {2, 3}, [](const TD& x, auto& g) { return project(sub(testutil::random_tensor({2, 1}, g), x), g); }},
      {"mul", {2, 3}, [](const TD& x, auto& g) { return project(mul(x, x), g); }},
      {"divide", {2, 3}, [](const TD& x, auto& g) { return project(divide(testutil::random_tensor({2, 3}, g), x), g); }, 0.5, 2.0},
      {"exp", {4}, [](const TD& x, auto& g) { return project(exp(x), g); }},
      {"log", {4}, [](const TD& x, auto& g) { return project(log(x), g); }, 0.2, 3.0},
      {"sqrt", {4}, [](const TD& x, auto& g) { return project(sqrt(x), g); }, 0.2, 3.0},
      {"tanh", {4}, [](const TD& x, auto& g) { return project(tanh(x), g); }, -3, 3},
      {"sigmoid", {4}, [](const TD& x, auto& g) { return project(sigmoid(x), g); }, -3, 3},
      {"relu", {4}, [](const TD& x, auto& g) { return project(relu(add_scalar(x, 0.0)), g); }, 0.05, 1.0},
      {"softmax", {2, 4}, [](const TD& x, auto& g) { return project(softmax(x, 1), g); }, -2, 2},
      {"log_softmax", {2, 4}, [](const TD& x, auto& g) { return project(log_softmax(x, 0), g); }, -2, 2},
      {"sum", {2, 3}, [](const TD& x, auto& g) { return project(sum(x, 1, true), g); }},
      {"mean", {2, 3}, [](const TD& x, auto& g) { return project(mean(x, 0), g); }},
      {"max", {3, 4}, [](const TD& x, auto& g) { return project(max(x, 1), g); }},
      {"concat", {2, 2}, [](const TD& x, auto& g) { return project(concat(std::vector<TD>{x, mul(x, x)}, 1), g); }},
      {"slice", {3, 4}, [](const TD& x, auto& g) { return project(slice(x, 1, 1, 3), g); }},
      {"transpose", {2, 3, 2}, [](const TD& x, auto& g) { return project(transpose(x, 0, 2), g); }},
      {"reshape", {2, 3}, [](const TD& x, auto& g) { return project(reshape(mul(x, x), {3, 2}), g); }},
      {"broadcast", {1, 3}, [](const TD& x, auto& g) { return project(broadcast_to(x, {4, 3}), g); }},
      {"l2_normalize", {3, 4}, [](const TD& x, auto& g) { return project(l2_normalize(x, 1), g); }, 0.1, 1.0},
      {"gather_rows", {3, 2}, [](const TD& x, auto& g) { return project(gather_rows(x, {2, 0, 2, 1}), g); }},
      {"masked_fill", {2, 3}, [](const TD& x, auto& g) { return project(masked_fill(x, Mask{{2, 3}, {1, 0, 0, 0, 1, 0}}, -1.0), g); }},
      {"matmul", {2, 3}, [](const TD& x, auto& g) { return project(matmul(x, testutil::random_tensor({3, 4}, g)), g); }},
      {"matmul_batched", {2, 2, 3}, [](const TD& x, auto& g) { return project(matmul(x, transpose(x, 1, 2)), g); }},
      {"unfold_1d", {1, 5, 2}, [](const TD& x, auto& g) { return project(unfold_1d(x, 3, 2, 1), g); }},
  };
  std::mt19937_64 gen(2024);
  for (const auto& c : cases) {
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      const auto x0 = testutil::random_values(numel_of(c.shape), gen, c.lo, c.hi);
      const std::uint64_t s = gen();
      worst = std::max(worst, testutil::grad_error(
                                  [&](const TD& x) {
                                    std::mt19937_64 local(s);
                                    return c.build(x, local);
                                  },
                                  c.shape, x0));
    }
    EXPECT_LE(worst, 1e-4) << c.name;
  }
}

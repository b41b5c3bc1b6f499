#include <cmath>
#include <functional>

#include <gtest/gtest.h>

#include "datta/ops.hpp"
#include "../support/oracles.hpp"

using namespace datta;
using namespace datta::testing;

namespace {

TensorD make(Shape shape, std::vector<double> v) { return TensorD(std::move(shape), std::move(v)); }

// Central differences of sum(w * f(x)) w.r.t. x, with w a fixed random weighting.
double op_gradient_error(const std::function<Var<double>(Var<double>)>& f, const TensorD& x0, double h = 1e-3) {
  TensorD w;
  auto loss_of = [&](const TensorD& x, TensorD* grad) {
    Tape<double> tape;
    auto x_var = tape.leaf(x, grad != nullptr);
    auto y = f(x_var);
    if (w.empty()) w = random_tensor<double>(y.shape(), 99, 0.5, 1.5);
    auto loss = sum(mul(y, tape.constant(w)));
    if (grad) *grad = tape.gradients(loss, std::span(&x_var, 1))[0];
    return loss.value()[0];
  };
  TensorD analytic;
  loss_of(x0, &analytic);
  double diff = 0.0, scale = 1e-12;
  TensorD x = x0;
  for (Index i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = loss_of(x, nullptr);
    x[i] = saved - h;
    const double down = loss_of(x, nullptr);
    x[i] = saved;
    const double numeric = (up - down) / (2 * h);
    diff = std::max(diff, std::abs(analytic[i] - numeric));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric)});
  }
  return diff / scale;
}

// Values bounded away from zero so kinked ops stay on one side within h.
TensorD away_from_zero(const Shape& shape, std::uint64_t seed) {
  TensorD t = random_tensor<double>(shape, seed, 0.2, 1.5);
  std::mt19937_64 rng(seed);
  for (auto& v : t.storage())
    if (rng() & 1) v = -v;
  return t;
}

}  // namespace

TEST(Matmul, IdentityLeavesOperand) {
  Tape<double> t;
  auto out = matmul(t.constant(make({2, 2}, {1, 0, 0, 1})), t.constant(make({2, 2}, {3, 4, 5, 6})));
  EXPECT_EQ(out.value(), make({2, 2}, {3, 4, 5, 6}));
}

TEST(Matmul, RowTimesColumn) {
  Tape<double> t;
  auto out = matmul(t.constant(make({1, 2}, {1, 2})), t.constant(make({2, 1}, {3, 4})));
  EXPECT_EQ(out.value().shape(), (Shape{1, 1}));
  EXPECT_DOUBLE_EQ(out.value()[0], 11.0);
}

TEST(Matmul, MatchesTripleLoop) {
  const auto a = random_tensor({5, 7}, 1), b = random_tensor({7, 3}, 2);
  Tape<float> t;
  const auto out = matmul(t.constant(a), t.constant(b)).value();
  const auto ref = naive_matmul(a, b);
  for (Index i = 0; i < ref.size(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-6);
}

TEST(Matmul, RejectsInnerMismatch) {
  Tape<float> t;
  EXPECT_THROW(matmul(t.constant(TensorF({2, 3})), t.constant(TensorF({2, 3}))), ShapeError);
}

TEST(Conv2d, UnitKernelIsIdentity) {
  const auto x = random_tensor({2, 1, 5, 4}, 3);
  Tape<float> t;
  EXPECT_EQ(conv2d(t.constant(x), t.constant(TensorF({1, 1, 1, 1}, 1.0f)), 1, 0).value(), x);
}

TEST(Conv2d, OnesKernelOnConstantInput) {
  Tape<double> t;
  const auto out = conv2d(t.constant(TensorD({1, 1, 5, 5}, 0.7)), t.constant(TensorD({1, 1, 3, 3}, 1.0)), 1, 0).value();
  ASSERT_EQ(out.shape(), (Shape{1, 1, 3, 3}));
  for (double v : out.data()) EXPECT_NEAR(v, 9 * 0.7, 1e-12);
}

TEST(Conv2d, MatchesNestedLoops) {
  const auto x = random_tensor({2, 3, 8, 8}, 4), w = random_tensor({4, 3, 3, 3}, 5);
  for (auto [stride, pad] : {std::pair<Index, Index>{1, 0}, {1, 1}, {2, 1}}) {
    Tape<float> t;
    const auto out = conv2d(t.constant(x), t.constant(w), stride, pad).value();
    const auto ref = naive_conv2d(x, w, stride, pad);
    ASSERT_EQ(out.shape(), ref.shape());
    for (Index i = 0; i < ref.size(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-5);
  }
}

TEST(Conv2d, KernelLargerThanPaddedInput) {
  Tape<float> t;
  EXPECT_THROW(conv2d(t.constant(TensorF({1, 1, 2, 2})), t.constant(TensorF({1, 1, 5, 5})), 1, 1), ShapeError);
}

TEST(Elementwise, Relu) {
  Tape<double> t;
  EXPECT_EQ(relu(t.constant(make({2}, {-1, 2}))).value(), make({2}, {0, 2}));
}

TEST(Elementwise, SoftmaxOfEqualLogits) {
  Tape<double> t;
  const auto p = softmax(t.constant(TensorD({3, 7}, 2.5))).value();
  for (double v : p.data()) EXPECT_NEAR(v, 1.0 / 7, 1e-12);
}

TEST(Elementwise, SoftmaxRowsSumToOne) {
  Tape<float> t;
  const auto p = softmax(t.constant(random_tensor({6, 10}, 6, -20, 20))).value();
  for (Index i = 0; i < 6; ++i) {
    double s = 0;
    for (Index j = 0; j < 10; ++j) s += p.at(i, j);
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Elementwise, AvgPool) {
  Tape<double> t;
  const auto out = avgpool2d(t.constant(make({1, 1, 2, 2}, {1, 2, 3, 4})), 2).value();
  EXPECT_EQ(out.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(out[0], 2.5);
}

TEST(Elementwise, NonFiniteInputRejected) {
  Tape<double> t;
  auto bad = t.constant(make({2}, {1.0, std::nan("")}));
  EXPECT_THROW(relu(bad), NonFiniteError);
  EXPECT_THROW(log(t.constant(make({1}, {-1.0}))), NonFiniteError);
}

TEST(ChannelStats, ConstantMap) {
  Tape<double> t;
  auto s = channel_stats(t.constant(TensorD({2, 3, 4, 4}, 1.25)));
  for (double v : s.mean.value().data()) EXPECT_DOUBLE_EQ(v, 1.25);
  for (double v : s.variance.value().data()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(ChannelStats, TwoPositions) {
  Tape<double> t;
  auto s = channel_stats(t.constant(make({1, 1, 1, 2}, {1, 3})));
  EXPECT_DOUBLE_EQ(s.mean.value()[0], 2.0);
  EXPECT_DOUBLE_EQ(s.variance.value()[0], 1.0);
}

TEST(ChannelStats, MatchesPositionLoop) {
  const auto x = random_tensor({3, 4, 5, 5}, 7, -2, 2);
  Tape<float> t;
  auto s = channel_stats(t.constant(x));
  const auto ref = naive_channel_stats(x);
  for (Index i = 0; i < ref.mean.size(); ++i) {
    EXPECT_NEAR(s.mean.value()[i], ref.mean[i], 1e-6);
    EXPECT_NEAR(s.variance.value()[i], ref.var[i], 1e-6);
  }
}

TEST(ChannelStats, AffineCovariance) {
  const auto x = random_tensor({2, 3, 4, 4}, 8);
  const float a = -1.7f, b = 0.4f;
  TensorF y = x;
  for (auto& v : y.storage()) v = a * v + b;
  Tape<float> t;
  auto sx = channel_stats(t.constant(x));
  auto sy = channel_stats(t.constant(y));
  for (Index i = 0; i < sx.mean.value().size(); ++i) {
    EXPECT_NEAR(sy.mean.value()[i], a * sx.mean.value()[i] + b, 1e-5);
    EXPECT_NEAR(sy.variance.value()[i], a * a * sx.variance.value()[i], 1e-5);
  }
}

TEST(ChannelStats, DeterministicReduction) {
  const auto x = random_tensor({4, 8, 6, 6}, 9);
  Tape<float> t1, t2;
  EXPECT_EQ(channel_stats(t1.constant(x)).variance.value(), channel_stats(t2.constant(x)).variance.value());
}

TEST(Backward, SumGivesOnes) {
  Tape<double> t;
  auto x = t.leaf(random_tensor<double>({3, 4}, 10), true);
  const auto g = t.gradients(sum(x), std::span(&x, 1))[0];
  for (double v : g.data()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, SumOfSquares) {
  Tape<double> t;
  auto x = t.leaf(make({2}, {1, 2}), true);
  const auto g = t.gradients(sum(mul(x, x)), std::span(&x, 1))[0];
  EXPECT_EQ(g, make({2}, {2, 4}));
}

TEST(Backward, NonScalarLoss) {
  Tape<double> t;
  auto x = t.leaf(make({2}, {1, 2}), true);
  EXPECT_THROW(t.gradients(x, std::span(&x, 1)), GraphError);
}

TEST(Backward, ForeignVariable) {
  Tape<double> t, other;
  auto x = t.leaf(make({2}, {1, 2}), true);
  auto y = other.leaf(make({2}, {1, 2}), true);
  EXPECT_THROW(t.gradients(sum(x), std::span(&y, 1)), GraphError);
}

TEST(Backward, UnreachedLeafGetsZeros) {
  Tape<double> t;
  auto x = t.leaf(make({2}, {1, 2}), true);
  auto y = t.leaf(make({3}, {1, 2, 3}), true);
  const auto g = t.gradients(sum(x), std::span(&y, 1))[0];
  EXPECT_EQ(g, TensorD({3}, 0.0));
}

TEST(OpGradients, MatchCentralDifferences) {
  const auto w = random_tensor<double>({4, 3, 3, 3}, 20);
  const auto bias = random_tensor<double>({5}, 21);
  const auto other = random_tensor<double>({3, 5}, 22);
  const auto gamma = random_tensor<double>({4}, 23, 0.5, 1.5), beta = random_tensor<double>({4}, 24);
  struct Case {
    const char* name;
    Shape shape;
    std::function<Var<double>(Var<double>)> f;
  };
  const std::vector<Case> cases = {
      {"matmul", {3, 3}, [&](Var<double> x) { return matmul(x, x.tape->constant(other)); }},
      {"add_bias", {3, 5}, [&](Var<double> x) { return add_bias(x, x.tape->constant(bias)); }},
      {"conv2d", {2, 3, 5, 5}, [&](Var<double> x) { return conv2d(x, x.tape->constant(w), 2, 1); }},
      {"relu", {2, 3}, [](Var<double> x) { return relu(x); }},
      {"abs", {2, 3}, [](Var<double> x) { return abs(x); }},
      {"log", {2, 3}, [](Var<double> x) { return log(abs(x)); }},
      {"scale", {4}, [](Var<double> x) { return scale(x, -2.5); }},
      {"mean", {2, 3}, [](Var<double> x) { return mean(x); }},
      {"row_sum", {3, 4}, [](Var<double> x) { return row_sum(x); }},
      {"mean_rows", {3, 4}, [](Var<double> x) { return mean_rows(x); }},
      {"gather_rows", {3, 4}, [](Var<double> x) { return gather_rows(x, {2, 0, 3}); }},
      {"avgpool2d", {2, 2, 4, 4}, [](Var<double> x) { return avgpool2d(x, 2); }},
      {"flatten", {2, 2, 2, 2}, [](Var<double> x) { return flatten(x); }},
      {"softmax", {3, 5}, [](Var<double> x) { return softmax(x); }},
      {"log_softmax", {3, 5}, [](Var<double> x) { return log_softmax(x); }},
      {"channel_mean", {2, 3, 3, 3}, [](Var<double> x) { return channel_mean(x); }},
      {"channel_variance", {2, 3, 3, 3}, [](Var<double> x) { return channel_variance(x); }},
      {"batch_norm_batch", {3, 4, 2, 2},
       [&](Var<double> x) { return batch_norm(x, x.tape->constant(gamma), x.tape->constant(beta), nullptr, 1e-5); }},
  };
  for (const auto& c : cases) {
    EXPECT_LT(op_gradient_error(c.f, away_from_zero(c.shape, 30)), 1e-3) << c.name;
  }
}

TEST(OpGradients, BatchNormAffineParameters) {
  const auto x = random_tensor<double>({3, 4, 3, 3}, 40);
  const Moments<double> fixed{random_tensor<double>({4}, 41), random_tensor<double>({4}, 42, 0.5, 2.0)};
  for (const Moments<double>* m : {static_cast<const Moments<double>*>(nullptr), &fixed}) {
    auto f_gamma = [&](Var<double> g) {
      return batch_norm(g.tape->constant(x), g, g.tape->constant(TensorD({4}, 0.3)), m, 1e-5);
    };
    auto f_beta = [&](Var<double> b) {
      return batch_norm(b.tape->constant(x), b.tape->constant(TensorD({4}, 1.2)), b, m, 1e-5);
    };
    EXPECT_LT(op_gradient_error(f_gamma, away_from_zero({4}, 43)), 1e-3);
    EXPECT_LT(op_gradient_error(f_beta, away_from_zero({4}, 44)), 1e-3);
  }
}

#include <gtest/gtest.h>

#include <cmath>

#include "bcva/grad.hpp"
#include "oracles.hpp"

using namespace bcva;
using namespace bcva::grad;

namespace {

Tensor vec(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor({n}, std::move(v));
}

double scalar_op(Var (*op)(Var), double x) {
  Tape t;
  return op(t.constant(Tensor::scalar(x))).item();
}

}  // namespace

TEST(Huber, PiecewiseValues) {
  EXPECT_EQ(huber_value(0.0, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(huber_value(0.5, 1.0), 0.125);
  EXPECT_DOUBLE_EQ(huber_value(2.0, 1.0), 1.5);
  EXPECT_DOUBLE_EQ(huber_value(-2.0, 1.0), 1.5);
  Tape t;
  const Var h = huber(t.constant(vec({0.0, 0.5, 2.0})), 1.0);
  EXPECT_EQ(h.value(), vec({0.0, 0.125, 1.5}));
}

TEST(Reparam, UnitScaleIsIdentity) {
  Tape t;
  const Var z = gaussian_reparam_sample(t.constant(vec({0.0})), t.constant(vec({0.0})), vec({0.7}));
  EXPECT_DOUBLE_EQ(z.value()[0], 0.7);
  const Var w = gaussian_reparam_sample(t.constant(vec({1.0})), t.constant(vec({std::log(2.0)})), vec({0.7}));
  EXPECT_DOUBLE_EQ(w.value()[0], 2.4);
}

TEST(Backward, SumGivesOnes) {
  oracle::Rng rng(1);
  Tape t;
  const Var x = t.variable(oracle::random_tensor(rng, {3, 5}));
  t.backward(sum(x));
  EXPECT_EQ(t.grad(x), Tensor({3, 5}, 1.0));
}

TEST(Backward, TanhDerivative) {
  Tape t;
  const Var x = t.variable(Tensor::scalar(0.3));
  t.backward(tanh(x));
  const double h = 1e-5;
  const double fd = (std::tanh(0.3 + h) - std::tanh(0.3 - h)) / (2 * h);
  EXPECT_NEAR(t.grad(x).item(), 0.91513, 1e-5);
  EXPECT_NEAR(t.grad(x).item(), fd, 1e-9);
}

TEST(Backward, FiniteDifferencesOnComposite) {
  oracle::Rng rng(2);
  const auto report = oracle::check_gradients(
      {oracle::random_tensor(rng, {2, 3}), oracle::random_tensor(rng, {3, 4}), oracle::random_tensor(rng, {4})},
      [](Tape&, const std::vector<Var>& v) {
        const Var h = tanh(add(matmul(v[0], v[1]), v[2]));
        return add(mean(softplus(h)), sum(log_sum_exp(sigmoid(h))));
      });
  EXPECT_LE(report.max_rel_error, 1e-5) << report.worst;
  EXPECT_EQ(report.checked, 6u + 12u + 4u);
}

TEST(Backward, NonScalarLossRejected) {
  Tape t;
  const Var x = t.variable(vec({1.0, 2.0}));
  EXPECT_THROW(t.backward(x), ShapeError);
}

TEST(Ops, ShapeErrorsNameTheOp) {
  Tape t;
  const Var a = t.constant(Tensor({2, 3}));
  const Var b = t.constant(Tensor({2, 3}));
  try {
    matmul(a, b);
    FAIL() << "matmul accepted mismatched shapes";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos) << e.what();
  }
  EXPECT_THROW(add(a, t.constant(Tensor({5}))), ShapeError);
  EXPECT_THROW(mul(a, t.constant(Tensor({3, 2}))), ShapeError);
}

TEST(Ops, NonFiniteOutputRejected) {
  EXPECT_THROW(scalar_op(grad::log, 0.0), NumericError);
  EXPECT_THROW(scalar_op(grad::exp, 1000.0), NumericError);
  EXPECT_DOUBLE_EQ(scalar_op(grad::softplus, 0.0), std::log(2.0));
  EXPECT_DOUBLE_EQ(scalar_op(grad::sigmoid, 0.0), 0.5);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  ParamStore store;
  store.add("w", vec({0.5, -1.0}));
  store.zero_grad();
  adam_step(store, 0.1, 0.9, 0.999, 1e-8);
  EXPECT_EQ(store.at("w").value, vec({0.5, -1.0}));
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ParamStore store;
  store.add("w", Tensor::scalar(0.0));
  store.zero_grad();
  store.at("w").grad[0] = 1.0;
  adam_step(store, 0.1, 0.9, 0.999, 1e-8);
  EXPECT_NEAR(store.at("w").value.item(), -0.1, 1e-6);
}

TEST(Adam, MissingGradientRejected) {
  ParamStore store;
  store.add("w", Tensor::scalar(0.0));
  EXPECT_THROW(adam_step(store, 0.1, 0.9, 0.999, 1e-8), DomainError);
  store.zero_grad();
  adam_step(store, 0.1, 0.9, 0.999, 1e-8);
  EXPECT_THROW(adam_step(store, 0.1, 0.9, 0.999, 1e-8), DomainError);
}

TEST(Adam, RunsAreBitIdentical) {
  auto run = [] {
    oracle::Rng rng(11);
    ParamStore store;
    store.add("a", oracle::random_tensor(rng, {3, 2}));
    store.add("b", oracle::random_tensor(rng, {2}));
    const Tensor x = oracle::random_tensor(rng, {4, 3});
    for (int i = 0; i < 50; ++i) {
      Tape t;
      const Var y = add(matmul(t.constant(x), t.param(store, "a")), t.param(store, "b"));
      backward(t, mean(huber(y, 1.0)), store);
      adam_step(store, 0.01, 0.9, 0.999, 1e-8);
    }
    return std::pair{store.at("a").value, store.at("b").value};
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, DescendsQuadratic) {
  ParamStore store;
  store.add("w", vec({3.0, -2.0}));
  for (int i = 0; i < 2000; ++i) {
    Tape t;
    const Var w = t.param(store, "w");
    backward(t, sum(mul(w, w)), store);
    adam_step(store, 0.01, 0.9, 0.999, 1e-8);
  }
  EXPECT_LT(std::abs(store.at("w").value[0]), 1e-2);
  EXPECT_LT(std::abs(store.at("w").value[1]), 1e-2);
}

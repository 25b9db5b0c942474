// Copyright 2026 The pcldcg Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "pcldcg/adam.hpp"
#include "pcldcg/gradcheck.hpp"
#include "pcldcg/tape.hpp"
#include "support/random.hpp"

namespace pcldcg {
namespace {

using T64 = Tensor<double>;
using testing::random_tensor;

TEST(Matmul, IdentityAndZero) {
  Tape<float> tape;
  Var a = tape.constant(Tensor<float>::matrix({{1, 0}, {0, 1}}));
  Var b = tape.constant(Tensor<float>::matrix({{3, 4}, {5, 6}}));
  auto c = tape.value(tape.matmul(a, b));
  EXPECT_EQ(std::vector<float>(c.begin(), c.end()), (std::vector<float>{3, 4, 5, 6}));

  Var z = tape.matmul(tape.constant(Tensor<float>::matrix({{1, 2}})),
                      tape.constant(Tensor<float>::matrix({{0}, {0}})));
  EXPECT_EQ(tape.shape(z), (Shape{1, 1}));
  EXPECT_EQ(tape.item(z), 0.0f);
}

TEST(Matmul, RowTimesColumnAndGradcheck) {
  Tape<double> tape;
  Var c = tape.matmul(tape.constant(T64::matrix({{1, 2}})), tape.constant(T64::matrix({{3}, {4}})));
  EXPECT_DOUBLE_EQ(tape.item(c), 11.0);

  T64 b = T64::matrix({{3}, {4}});
  double err = finite_difference_gradcheck<double>(
      [&](Tape<double>& t, Var a) { return t.sum(t.matmul(a, t.constant(b))); },
      T64::matrix({{1, 2}}), 1e-3);
  EXPECT_LT(err, 1e-4);
  err = finite_difference_gradcheck<double>(
      [&](Tape<double>& t, Var x) {
        return t.sum(t.matmul(t.constant(T64::matrix({{1, 2}})), x));
      },
      b, 1e-3);
  EXPECT_LT(err, 1e-4);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape<float> tape;
  Var a = tape.constant(Tensor<float>({2, 3}));
  Var b = tape.constant(Tensor<float>({2, 2}));
  try {
    tape.matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2x2]"), std::string::npos) << msg;
  }
}

TEST(Softmax, Examples) {
  Tape<double> tape;
  auto u = tape.value(tape.softmax_rows(tape.constant(T64({5}, 0.0)), 1.0));
  for (double v : u) EXPECT_NEAR(v, 0.2, 1e-12);

  auto p = tape.value(tape.softmax_rows(tape.constant(T64::vector({0, std::log(3.0)})), 1.0));
  EXPECT_NEAR(p[0], 0.25, 1e-12);
  EXPECT_NEAR(p[1], 0.75, 1e-12);

  auto flat = tape.value(tape.softmax_rows(tape.constant(T64::vector({1, 2})), 1e6));
  EXPECT_NEAR(flat[0], 0.5, 1e-6);
  EXPECT_NEAR(flat[1], 0.5, 1e-6);
}

TEST(Softmax, RejectsNonPositiveTemperature) {
  Tape<float> tape;
  Var x = tape.constant(Tensor<float>::vector({1, 2}));
  EXPECT_THROW(tape.softmax_rows(x, 0.0f), ParameterError);
  EXPECT_THROW(tape.softmax_rows(x, -1.0f), ParameterError);
}

TEST(Softmax, SumsToOneAndStaysInsideOpenInterval) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    Tape<float> tape;
    std::uniform_int_distribution<int> len(1, 12);
    std::uniform_real_distribution<double> temp(0.05, 5.0);
    auto x = random_tensor<float>({std::size_t(len(rng))}, rng, -10, 10);
    auto y = tape.value(tape.softmax_rows(tape.constant(x), float(temp(rng))));
    double s = 0;
    for (float v : y) {
      s += v;
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Sigmoid, Examples) {
  Tape<double> tape;
  EXPECT_DOUBLE_EQ(tape.item(tape.sigmoid(tape.constant(T64::scalar(0)))), 0.5);
  EXPECT_NEAR(tape.item(tape.sigmoid(tape.constant(T64::scalar(100)))), 1.0, 1e-12);
  EXPECT_NEAR(tape.item(tape.sigmoid(tape.constant(T64::scalar(std::log(3.0))))), 0.75, 1e-12);
  EXPECT_NEAR(tape.item(tape.sigmoid(tape.constant(T64::scalar(-800)))), 0.0, 1e-300);
}

TEST(Cosine, Examples) {
  Tape<double> tape;
  auto cos = [&](T64 a, T64 b) {
    return tape.item(tape.cosine_similarity(tape.constant(a), tape.constant(b)));
  };
  EXPECT_NEAR(cos(T64::vector({1, 2, 3}), T64::vector({1, 2, 3})), 1.0, 1e-12);
  EXPECT_NEAR(cos(T64::vector({1, 0}), T64::vector({0, 1})), 0.0, 1e-12);
  EXPECT_NEAR(cos(T64::vector({1, 1}), T64::vector({1, 0})), 0.70711, 1e-5);
}

TEST(Cosine, ZeroNormIsClampedToZero) {
  Tape<double> tape;
  T64 z({3}, 0.0);
  z.set_requires_grad(true);
  Var c = tape.cosine_similarity(tape.param(z), tape.constant(T64::vector({1, 2, 3})));
  EXPECT_NEAR(tape.item(c), 0.0, 1e-12);
  tape.backward(c);
  for (double g : z.grad()) EXPECT_TRUE(std::isfinite(g));
}

TEST(StopGradient, Examples) {
  T64 x = T64::vector({1, 2, 3});
  x.set_requires_grad(true);
  Tape<double> tape;
  Var s = tape.stop_gradient(tape.param(x));
  auto v = tape.value(s);
  EXPECT_EQ(std::vector<double>(v.begin(), v.end()), (std::vector<double>{1, 2, 3}));
  tape.backward(tape.add(tape.sum(s), tape.scale(tape.sum(tape.param(x)), 0.0)));
  for (double g : x.grad()) EXPECT_EQ(g, 0.0);

  // y = x + sg(x^2 - x) has value x^2 and derivative 1.
  T64 x3 = T64::scalar(3);
  x3.set_requires_grad(true);
  Tape<double> t2;
  Var xv = t2.param(x3);
  Var y = t2.add(xv, t2.stop_gradient(t2.sub(t2.mul(xv, xv), xv)));
  EXPECT_DOUBLE_EQ(t2.item(y), 9.0);
  t2.backward(y);
  EXPECT_DOUBLE_EQ(x3.grad()[0], 1.0);
}

TEST(Backward, Examples) {
  T64 x = T64::vector({1, 2});
  x.set_requires_grad(true);
  {
    Tape<double> tape;
    tape.backward(tape.sum(tape.param(x)));
    EXPECT_EQ(x.grad()[0], 1.0);
    EXPECT_EQ(x.grad()[1], 1.0);
  }
  T64 s = T64::scalar(3);
  s.set_requires_grad(true);
  {
    Tape<double> tape;
    Var v = tape.param(s);
    tape.backward(tape.mul(v, v));
    EXPECT_DOUBLE_EQ(s.grad()[0], 6.0);
  }
  T64 one = T64::scalar(1);
  one.set_requires_grad(true);
  {
    Tape<double> tape;
    Var v = tape.param(one);
    tape.backward(tape.add(v, v));
    EXPECT_DOUBLE_EQ(one.grad()[0], 2.0);
  }
}

TEST(Backward, RejectsNonScalarLoss) {
  T64 x = T64::vector({1, 2});
  x.set_requires_grad(true);
  Tape<double> tape;
  EXPECT_THROW(tape.backward(tape.param(x)), ContractError);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  Tensor<float> w = Tensor<float>::vector({0.5f, -1.25f, 3.0f});
  w.set_requires_grad(true);
  std::vector<Parameter<float>> ps{{"w", &w}};
  AdamState<float> st;
  for (int i = 0; i < 5; ++i) adam_step<float>(ps, st);
  EXPECT_EQ(w[0], 0.5f);
  EXPECT_EQ(w[1], -1.25f);
  EXPECT_EQ(w[2], 3.0f);
  EXPECT_EQ(st.step, 5u);
}

TEST(Adam, FirstStepClosedForm) {
  Tensor<float> w = Tensor<float>::scalar(0.0f);
  w.set_requires_grad(true);
  w.grad()[0] = 1.0f;
  std::vector<Parameter<float>> ps{{"w", &w}};
  AdamState<float> st;
  st.lr = 0.001;
  adam_step<float>(ps, st);
  // m_hat = v_hat = 1, so the step is lr / (1 + eps).
  EXPECT_NEAR(w[0], -0.001, 1e-8);
}

TEST(Adam, StepSizeBoundedByLearningRate) {
  Tensor<double> w = Tensor<double>::scalar(0.0);
  w.set_requires_grad(true);
  std::vector<Parameter<double>> ps{{"w", &w}};
  AdamState<double> st;
  double prev = 0;
  for (int i = 0; i < 2; ++i) {
    w.grad()[0] = 1.0;
    adam_step<double>(ps, st);
    EXPECT_LE(std::abs(w[0] - prev), st.lr * (1 + 1e-6));
    prev = w[0];
  }
}

TEST(Adam, MissingGradientNamesParameter) {
  Tensor<float> w = Tensor<float>::scalar(1.0f);
  std::vector<Parameter<float>> ps{{"tower.w1", &w}};
  AdamState<float> st;
  try {
    adam_step<float>(ps, st);
    FAIL();
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("tower.w1"), std::string::npos);
  }
}

TEST(Gradcheck, SumOfSquaresAndConstant) {
  std::mt19937_64 rng(11);
  auto x = random_tensor({6}, rng);
  double err = finite_difference_gradcheck<double>(
      [](Tape<double>& t, Var v) { return t.sum(t.mul(v, v)); }, x, 1e-3);
  EXPECT_LT(err, 1e-4);

  double zero = finite_difference_gradcheck<double>(
      [](Tape<double>& t, Var v) { return t.add(t.scale(t.sum(v), 0.0), t.constant(T64::scalar(4))); },
      x, 1e-3);
  EXPECT_EQ(zero, 0.0);
}

TEST(Gradcheck, ReportsInjectedError) {
  T64 x = T64::vector({0.3, -0.7});
  x.set_requires_grad(true);
  std::vector<Parameter<double>> ps{{"x", &x}};
  GradcheckOptions opt;
  opt.inject_error = 0.5;
  auto r = gradcheck_parameters<double>(
      [&](Tape<double>& t) { Var v = t.param(x); return t.sum(t.mul(v, v)); }, ps, opt);
  EXPECT_FALSE(r.passed(1e-3));
  EXPECT_EQ(r.worst_parameter, "x");
  EXPECT_EQ(r.worst_index, 0u);
}

// Every primitive against central differences on random small instances.
class PrimitiveGradients : public ::testing::Test {
 protected:
  std::mt19937_64 rng{2024};

  // Random weights keep sum-of-output losses from collapsing to constants.
  Var weighted(Tape<double>& t, Var y, std::mt19937_64& wrng) {
    auto w = random_tensor(t.shape(y).empty() ? Shape{1} : t.shape(y), wrng);
    return t.sum(t.mul(y, t.constant(t.shape(y), std::vector<double>(w.values().begin(), w.values().end()))));
  }

  void check(const std::string& name, Shape shape,
             const std::function<Var(Tape<double>&, Var)>& f) {
    for (int trial = 0; trial < 100; ++trial) {
      auto x = random_tensor(shape, rng);
      const auto wseed = rng();
      double err = finite_difference_gradcheck<double>(
          [&](Tape<double>& t, Var v) {
            std::mt19937_64 wrng(wseed);
            return weighted(t, f(t, v), wrng);
          },
          x, 1e-5);
      ASSERT_LT(err, 1e-3) << name << " trial " << trial;
    }
  }
};

TEST_F(PrimitiveGradients, AllPrimitives) {
  auto other = random_tensor({3, 4}, rng);
  auto col = random_tensor({4, 2}, rng);
  check("matmul", {3, 4}, [&](Tape<double>& t, Var x) { return t.matmul(x, t.constant(col)); });
  check("matmul_t", {2, 4}, [&](Tape<double>& t, Var x) { return t.matmul(t.constant(other), x, true); });
  check("add", {3, 4}, [&](Tape<double>& t, Var x) { return t.add(x, t.constant(other)); });
  check("sub", {3, 4}, [&](Tape<double>& t, Var x) { return t.sub(t.constant(other), x); });
  check("mul", {3, 4}, [&](Tape<double>& t, Var x) { return t.mul(x, x); });
  check("add_row", {4}, [&](Tape<double>& t, Var x) { return t.add_row(t.constant(other), x); });
  check("scale", {5}, [&](Tape<double>& t, Var x) { return t.scale(x, -2.5); });
  check("mul_scalar", {1}, [&](Tape<double>& t, Var x) { return t.mul_scalar(t.constant(other), x); });
  check("relu", {3, 4}, [&](Tape<double>& t, Var x) { return t.relu(x); });
  check("sigmoid", {3, 4}, [&](Tape<double>& t, Var x) { return t.sigmoid(x); });
  check("softmax", {3, 4}, [&](Tape<double>& t, Var x) { return t.softmax_rows(x, 0.7); });
  check("suffix_sum", {2, 5}, [&](Tape<double>& t, Var x) { return t.suffix_sum_rows(x); });
  check("l2_normalize", {3, 4}, [&](Tape<double>& t, Var x) { return t.l2_normalize_rows(x); });
  check("cosine", {4}, [&](Tape<double>& t, Var x) {
    return t.cosine_similarity(x, t.constant(T64::vector({1, -2, 0.5, 3})));
  });
  check("gather_rows", {5, 3}, [&](Tape<double>& t, Var x) { return t.gather_rows(x, {4, 0, 4, 2}); });
  check("slice_rows", {5, 3}, [&](Tape<double>& t, Var x) { return t.slice_rows(x, 1, 3); });
  check("concat_cols", {3, 2}, [&](Tape<double>& t, Var x) { return t.concat_cols(x, t.constant(other)); });
  check("concat_rows", {2, 4}, [&](Tape<double>& t, Var x) { return t.concat_rows({x, t.constant(other), x}); });
  check("select_per_row", {2, 5}, [&](Tape<double>& t, Var x) {
    return t.select_per_row(x, {0, 3, 3, 4, 1, 0}, 3);
  });
  check("mean", {7}, [&](Tape<double>& t, Var x) { return t.mean(x); });
  check("masked_combine_telescoped", {3, 4}, [&](Tape<double>& t, Var x) {
    return t.masked_combine(x, t.constant(T64::vector({1.0, 0.6, 0.2})), CombineMode::kTelescoped);
  });
  check("masked_combine_penalty", {3, 4}, [&](Tape<double>& t, Var x) {
    return t.masked_combine(x, t.constant(T64::vector({1.0, 1.0, 0.0})), CombineMode::kPenalty);
  });
  check("masked_combine_mask", {3}, [&](Tape<double>& t, Var x) {
    return t.masked_combine(t.constant(other), x, CombineMode::kTelescoped);
  });
  check("bce", {6}, [&](Tape<double>& t, Var x) {
    return t.bce_with_logits(t.scale(x, 3.0), {1, 0, 0, 1, 1, 0});
  });
  check("softmax_xent", {3, 4}, [&](Tape<double>& t, Var x) {
    return t.softmax_cross_entropy(t.scale(x, 4.0), {0, 3, 1});
  });
}

}  // namespace
}  // namespace pcldcg

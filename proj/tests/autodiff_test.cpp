#include "attnmi/autodiff.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "attnmi/adam.hpp"
#include "attnmi/serialize.hpp"
#include "test_helpers.hpp"

using namespace attnmi;
using attnmi::testing::check_gradients;
using attnmi::testing::random_tensor;

namespace {

// Reduce a tensor to a scalar through fixed pseudo-random weights so the
// finite-difference oracle sees every output coordinate. Pure in `seed`.
Var weighted_total(Graph& g, const Var& v, std::uint64_t seed) {
  Rng rng(seed);
  Tensor w(v.t->shape);
  for (auto& x : w.values) x = rng.uniform(-1.0, 1.0);
  return sum(g, mul(g, v, g.constant(std::move(w))));
}

}  // namespace

TEST(Elementwise, ForwardExamples) {
  Graph g;
  Var x = g.constant(Tensor({3}, {-1.0, 0.0, 2.0}));
  Var r = relu(g, x);
  EXPECT_EQ(r.t->values, (std::vector<double>{0.0, 0.0, 2.0}));

  Var z = g.constant(Tensor({1}, {0.0}));
  EXPECT_DOUBLE_EQ(tanh_op(g, z).t->values[0], 0.0);

  Var a = g.constant(Tensor({2}, {1.0, 2.0}));
  Var b = g.constant(Tensor({2}, {10.0, 20.0}));
  EXPECT_EQ(add(g, a, b).t->values, (std::vector<double>{11.0, 22.0}));
  EXPECT_EQ(sub(g, b, a).t->values, (std::vector<double>{9.0, 18.0}));
  EXPECT_EQ(mul(g, a, b).t->values, (std::vector<double>{10.0, 40.0}));

  // Scalar broadcast.
  Var s = g.constant_scalar(3.0);
  EXPECT_EQ(add(g, a, s).t->values, (std::vector<double>{4.0, 5.0}));
  EXPECT_EQ(mul(g, s, a).t->values, (std::vector<double>{3.0, 6.0}));
}

TEST(Elementwise, ShapeMismatchNamesBothShapes) {
  Graph g;
  Var a = g.constant(Tensor({2}, {1.0, 2.0}));
  Var b = g.constant(Tensor({3}, {1.0, 2.0, 3.0}));
  try {
    add(g, a, b);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[3]"), std::string::npos) << msg;
  }
}

TEST(Elementwise, SquareGradientMatchesHandValue) {
  // d/dx (x*x) at x=3 is 6; checked against the finite-difference oracle.
  auto x = make_tensor({1}, {3.0});
  x->requires_grad = true;
  auto res = check_gradients({x}, [&](Graph& g) {
    Var v = g.var(x);
    return sum(g, mul(g, v, v));
  });
  EXPECT_LT(res.max_rel_err, 1e-6);
  EXPECT_NEAR(x->grad[0], 6.0, 1e-9);
}

TEST(Elementwise, GradientsMatchFiniteDifferences) {
  Rng rng(7);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({3, 4}, rng);
  struct Case {
    const char* name;
    std::function<Var(Graph&, Var, Var)> fn;
  };
  std::vector<Case> cases = {
      {"add", [](Graph& g, Var x, Var y) { return add(g, x, y); }},
      {"sub", [](Graph& g, Var x, Var y) { return sub(g, x, y); }},
      {"mul", [](Graph& g, Var x, Var y) { return mul(g, x, y); }},
      {"tanh", [](Graph& g, Var x, Var) { return tanh_op(g, x); }},
      {"sigmoid", [](Graph& g, Var x, Var) { return sigmoid(g, x); }},
      {"exp", [](Graph& g, Var x, Var) { return exp_op(g, x); }},
      {"scale", [](Graph& g, Var x, Var) { return scale(g, x, -1.7); }},
  };
  for (const auto& c : cases) {
    auto res = check_gradients({a, b}, [&](Graph& g) {
      Var out = c.fn(g, g.var(a), g.var(b));
      return weighted_total(g, out, 11);
    });
    EXPECT_LT(res.max_rel_err, 1e-4) << c.name;
  }
}

TEST(Elementwise, ReluAndAbsGradientsAwayFromKink) {
  Rng rng(13);
  auto a = make_tensor({10});
  a->requires_grad = true;
  for (auto& v : a->values) {
    v = rng.uniform(0.1, 2.0);
    if (rng.uniform() < 0.5) v = -v;
  }
  for (auto fn : {relu, abs_op}) {
    auto res = check_gradients({a}, [&](Graph& g) {
      return weighted_total(g, fn(g, g.var(a)), 3);
    });
    EXPECT_LT(res.max_rel_err, 1e-4);
  }
}

TEST(Elementwise, LogGradient) {
  Rng rng(17);
  auto a = random_tensor({6}, rng, 0.2, 2.0);
  auto res = check_gradients({a}, [&](Graph& g) {
    return weighted_total(g, log_op(g, g.var(a)), 5);
  });
  EXPECT_LT(res.max_rel_err, 1e-4);
}

TEST(Matmul, ForwardExamples) {
  Graph g;
  Var eye = g.constant(Tensor({2, 2}, {1.0, 0.0, 0.0, 1.0}));
  Var m = g.constant(Tensor({2, 2}, {1.0, 2.0, 3.0, 4.0}));
  EXPECT_EQ(matmul(g, eye, m).t->values, (std::vector<double>{1.0, 2.0, 3.0, 4.0}));

  Var sel = g.constant(Tensor({1, 2}, {1.0, 0.0}));
  Var col = g.constant(Tensor({2, 1}, {5.0, 7.0}));
  EXPECT_EQ(matmul(g, sel, col).t->values, (std::vector<double>{5.0}));

  EXPECT_THROW(matmul(g, m, g.constant(Tensor({3, 2}, std::vector<double>(6, 1.0)))),
               ConfigError);
}

TEST(Matmul, GradSumEqualsOnesTimesBTransposed) {
  Rng rng(23);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 2}, rng);
  auto res = check_gradients({a, b}, [&](Graph& g) {
    return sum(g, matmul(g, g.var(a), g.var(b)));
  });
  EXPECT_LT(res.max_rel_err, 1e-4);
  // dL/dA for L = sum(A*B) is ones * B^T: row-constant with entries sum_j B[p][j].
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t p = 0; p < 4; ++p) {
      double expect = 0.0;
      for (std::size_t j = 0; j < 2; ++j) expect += b->values[p * 2 + j];
      EXPECT_NEAR(a->grad[i * 4 + p], expect, 1e-9);
    }
}

TEST(MatvecVecmat, GradientsMatchFiniteDifferences) {
  Rng rng(29);
  auto a = random_tensor({4, 3}, rng);
  auto x = random_tensor({3}, rng);
  auto y = random_tensor({4}, rng);
  auto r1 = check_gradients({a, x}, [&](Graph& g) {
    return weighted_total(g, matvec(g, g.var(a), g.var(x)), 1);
  });
  EXPECT_LT(r1.max_rel_err, 1e-4);
  auto r2 = check_gradients({a, y}, [&](Graph& g) {
    return weighted_total(g, vecmat(g, g.var(y), g.var(a)), 2);
  });
  EXPECT_LT(r2.max_rel_err, 1e-4);
}

TEST(Structure, RowsGatherAndScatter) {
  Rng rng(31);
  auto table = random_tensor({4, 3}, rng);
  {
    Graph g;
    Var out = rows(g, g.var(table), {2, 0});
    for (std::size_t c = 0; c < 3; ++c) {
      EXPECT_DOUBLE_EQ(out.t->values[c], table->values[2 * 3 + c]);
      EXPECT_DOUBLE_EQ(out.t->values[3 + c], table->values[c]);
    }
    EXPECT_THROW(rows(g, g.var(table), {4}), InvalidInputError);
  }
  // Gradient flows only to looked-up rows.
  table->zero_grad();
  Graph g;
  Var out = rows(g, g.var(table), {2, 0});
  g.backward(sum(g, out));
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_DOUBLE_EQ(table->grad[0 * 3 + c], 1.0);
    EXPECT_DOUBLE_EQ(table->grad[1 * 3 + c], 0.0);
    EXPECT_DOUBLE_EQ(table->grad[2 * 3 + c], 1.0);
    EXPECT_DOUBLE_EQ(table->grad[3 * 3 + c], 0.0);
  }
}

TEST(Structure, SliceConcatStackShiftGradients) {
  Rng rng(37);
  auto a = random_tensor({6}, rng);
  auto b = random_tensor({4}, rng);
  auto m = random_tensor({5, 3}, rng);
  auto r1 = check_gradients({a}, [&](Graph& g) {
    return weighted_total(g, slice(g, g.var(a), 1, 3), 4);
  });
  EXPECT_LT(r1.max_rel_err, 1e-4);
  auto r2 = check_gradients({a, b}, [&](Graph& g) {
    return weighted_total(g, concat(g, {g.var(a), g.var(b)}), 5);
  });
  EXPECT_LT(r2.max_rel_err, 1e-4);
  auto r3 = check_gradients({a, b}, [&](Graph& g) {
    Var s1 = slice(g, g.var(a), 0, 4);
    return weighted_total(g, stack_rows(g, {s1, g.var(b)}), 6);
  });
  EXPECT_LT(r3.max_rel_err, 1e-4);
  auto r4 = check_gradients({m}, [&](Graph& g) {
    return weighted_total(g, shift_rows(g, g.var(m), -2), 7);
  });
  EXPECT_LT(r4.max_rel_err, 1e-4);
}

TEST(Structure, ConcatColsAndRowBlockAndAddRowvec) {
  Rng rng(41);
  auto m1 = random_tensor({4, 2}, rng);
  auto m2 = random_tensor({4, 3}, rng);
  auto bias = random_tensor({5}, rng);
  auto res = check_gradients({m1, m2, bias}, [&](Graph& g) {
    Var cc = concat_cols(g, {g.var(m1), g.var(m2)});
    Var blk = row_block(g, cc, 1, 2);
    return weighted_total(g, add_rowvec(g, blk, g.var(bias)), 8);
  });
  EXPECT_LT(res.max_rel_err, 1e-4);
}

TEST(Softmax, ClosedFormValues) {
  Graph g;
  Var even = softmax(g, g.constant(Tensor({2}, {0.0, 0.0})));
  EXPECT_NEAR(even.t->values[0], 0.5, 1e-12);
  EXPECT_NEAR(even.t->values[1], 0.5, 1e-12);

  Var skew = softmax(g, g.constant(Tensor({2}, {1.0, 0.0})));
  const double e = std::exp(1.0);
  EXPECT_NEAR(skew.t->values[0], e / (e + 1.0), 1e-9);
  EXPECT_NEAR(skew.t->values[1], 1.0 / (e + 1.0), 1e-9);

  // Stabilization: huge logits stay finite.
  Var big = softmax(g, g.constant(Tensor({2}, {1000.0, 0.0})));
  EXPECT_NEAR(big.t->values[0], 1.0, 1e-9);
  EXPECT_NEAR(big.t->values[1], 0.0, 1e-9);
  EXPECT_TRUE(std::isfinite(big.t->values[0]));
}

TEST(Softmax, MaskAndErrors) {
  Graph g;
  Mask mask{1, 0, 1};
  Var out = softmax(g, g.constant(Tensor({3}, {1.0, 50.0, 1.0})), &mask);
  EXPECT_DOUBLE_EQ(out.t->values[1], 0.0);
  EXPECT_NEAR(out.t->values[0] + out.t->values[2], 1.0, 1e-12);

  Mask all_masked{0, 0};
  EXPECT_THROW(softmax(g, g.constant(Tensor({2}, {1.0, 1.0})), &all_masked), InvalidInputError);
}

TEST(Softmax, ProbabilityVectorPropertyAndShiftInvariance) {
  Rng rng(43);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.index(8);
    Tensor logits({n});
    for (auto& v : logits.values) v = rng.uniform(-10.0, 10.0);
    Tensor shifted = logits;
    const double c = rng.uniform(-5.0, 5.0);
    for (auto& v : shifted.values) v += c;

    Graph g;
    Var p = softmax(g, g.constant(logits));
    Var q = softmax(g, g.constant(shifted));
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_GE(p.t->values[i], 0.0);
      total += p.t->values[i];
      EXPECT_NEAR(p.t->values[i], q.t->values[i], 1e-6);
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(Softmax, GradientsMatchFiniteDifferences) {
  Rng rng(47);
  auto logits = random_tensor({5}, rng);
  auto res = check_gradients({logits}, [&](Graph& g) {
    return weighted_total(g, softmax(g, g.var(logits)), 9);
  });
  EXPECT_LT(res.max_rel_err, 1e-4);

  auto res2 = check_gradients({logits}, [&](Graph& g) {
    Mask mask{1, 1, 0, 1, 0};
    return weighted_total(g, softmax(g, g.var(logits), &mask), 10);
  });
  EXPECT_LT(res2.max_rel_err, 1e-4);
}

TEST(LogSoftmaxBce, GradientsAndValues) {
  Rng rng(53);
  auto logits = random_tensor({4}, rng);
  auto res = check_gradients({logits}, [&](Graph& g) {
    return weighted_total(g, log_softmax(g, g.var(logits)), 11);
  });
  EXPECT_LT(res.max_rel_err, 1e-4);

  auto z = random_tensor({1}, rng);
  auto res2 = check_gradients({z}, [&](Graph& g) {
    return bce_with_logits(g, g.var(z), 1.0);
  });
  EXPECT_LT(res2.max_rel_err, 1e-4);

  Graph g;
  Var l0 = bce_with_logits(g, g.constant_scalar(0.0), 1.0);
  EXPECT_NEAR(l0.scalar(), std::log(2.0), 1e-12);
}

TEST(Graph, DoubleBackwardAccumulatesExactlyTwice) {
  Rng rng(59);
  auto a = random_tensor({3, 3}, rng);
  auto x = random_tensor({3}, rng);
  Graph g;
  Var loss = sum(g, tanh_op(g, matvec(g, g.var(a), g.var(x))));
  g.backward(loss);
  const std::vector<double> once = a->grad;
  g.backward(loss);
  for (std::size_t i = 0; i < once.size(); ++i)
    EXPECT_NEAR(a->grad[i], 2.0 * once[i], 1e-12) << i;
}

TEST(Graph, DeterministicForward) {
  Rng rng(61);
  auto a = random_tensor({4, 4}, rng);
  auto x = random_tensor({4}, rng);
  auto run = [&]() {
    Graph g;
    return sum(g, sigmoid(g, matvec(g, g.var(a), g.var(x)))).scalar();
  };
  EXPECT_DOUBLE_EQ(run(), run());
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  auto p = make_tensor({3}, {1.0, -2.0, 0.5});
  p->requires_grad = true;
  p->ensure_grad();
  ParamMap params{{"p", p}};
  AdamConfig cfg;
  cfg.weight_decay = 0.0;
  AdamState st(cfg);
  adam_step(params, st);
  EXPECT_EQ(p->values, (std::vector<double>{1.0, -2.0, 0.5}));
  EXPECT_EQ(st.step, 1);
}

TEST(Adam, FirstStepMovesByAboutLearningRate) {
  // With g=1 and fresh moments, bias correction gives a step of
  // lr * 1 / (1 + eps) regardless of beta values.
  auto p = make_tensor({1}, {0.0});
  p->requires_grad = true;
  p->ensure_grad();
  p->grad[0] = 1.0;
  ParamMap params{{"p", p}};
  AdamConfig cfg;
  cfg.weight_decay = 0.0;
  AdamState st(cfg);
  adam_step(params, st);
  EXPECT_NEAR(p->values[0], -cfg.learning_rate / (1.0 + cfg.epsilon), 1e-12);
}

TEST(Adam, TwoIdenticalStepsStayBounded) {
  auto p = make_tensor({1}, {0.0});
  p->requires_grad = true;
  ParamMap params{{"p", p}};
  AdamConfig cfg;
  cfg.weight_decay = 0.0;
  AdamState st(cfg);
  double prev = 0.0;
  for (int i = 0; i < 2; ++i) {
    p->ensure_grad();
    p->grad[0] = 1.0;
    adam_step(params, st);
    const double delta = std::fabs(p->values[0] - prev);
    EXPECT_LE(delta, cfg.learning_rate / (1.0 - cfg.beta1) + 1e-12);
    prev = p->values[0];
    p->zero_grad();
  }
}

TEST(Adam, NanGradientNamesParameter) {
  auto p = make_tensor({1}, {0.0});
  p->requires_grad = true;
  p->ensure_grad();
  p->grad[0] = std::nan("");
  ParamMap params{{"theta", p}};
  AdamState st;
  try {
    adam_step(params, st);
    FAIL() << "expected TrainError";
  } catch (const TrainError& e) {
    EXPECT_NE(std::string(e.what()).find("theta"), std::string::npos);
  }
}

TEST(Clip, GlobalNormClipping) {
  auto p = make_tensor({2}, {0.0, 0.0});
  p->requires_grad = true;
  p->ensure_grad();
  p->grad = {30.0, 40.0};  // norm 50
  ParamMap params{{"p", p}};
  const double pre = clip_grad_norm(params, 5.0);
  EXPECT_NEAR(pre, 50.0, 1e-12);
  EXPECT_NEAR(p->grad[0], 3.0, 1e-12);
  EXPECT_NEAR(p->grad[1], 4.0, 1e-12);
}

TEST(Checkpoint, ParameterRoundTrip) {
  Rng rng(67);
  auto a = random_tensor({2, 3}, rng);
  auto b = random_tensor({4}, rng);
  ParamMap params{{"layer.W", a}, {"layer.b", b}};
  const std::string path = ::testing::TempDir() + "/params.json";
  save_parameters(path, params);
  ParamMap loaded = load_parameters(path);
  ASSERT_EQ(loaded.size(), 2u);
  EXPECT_EQ(loaded.at("layer.W")->shape, a->shape);
  EXPECT_EQ(loaded.at("layer.W")->values, a->values);
  EXPECT_EQ(loaded.at("layer.b")->values, b->values);
}

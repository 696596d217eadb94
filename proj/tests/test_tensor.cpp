#include "end2reg/gradcheck.hpp"
#include "end2reg/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <unordered_map>

using namespace end2reg;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }
std::vector<double> grads(const Tensor& t) { return {t.grad().begin(), t.grad().end()}; }

}  // namespace

TEST(Elementwise, AddIsArithmetic) {
  auto a = Tensor::from({2}, {1, 2});
  auto b = Tensor::from({2}, {3, 4});
  EXPECT_EQ(values(ops::add(a, b)), (std::vector<double>{4, 6}));
}

TEST(Elementwise, MulByZerosAnnihilatesValueAndGradient) {
  auto x = Tensor::from({3}, {1.5, -2, 0.25}, true);
  auto zeros = Tensor::zeros({3});
  auto y = ops::mul(x, zeros);
  EXPECT_EQ(values(y), (std::vector<double>{0, 0, 0}));
  backward(ops::sum(y));
  EXPECT_EQ(grads(x), (std::vector<double>{0, 0, 0}));
}

TEST(Elementwise, ExpAtZero) {
  auto x = Tensor::from({1}, {0.0}, true);
  auto y = ops::exp(x);
  EXPECT_EQ(y.item(), 1.0);
  backward(ops::sum(y));
  EXPECT_EQ(x.grad()[0], 1.0);
}

TEST(Elementwise, ScalarBroadcastBothSides) {
  auto s = Tensor::scalar(2.0, true);
  auto x = Tensor::from({3}, {1, 2, 3}, true);
  auto y = ops::mul(s, x);
  EXPECT_EQ(values(y), (std::vector<double>{2, 4, 6}));
  backward(ops::sum(y));
  EXPECT_DOUBLE_EQ(s.grad()[0], 6.0);
  EXPECT_EQ(grads(x), (std::vector<double>{2, 2, 2}));
}

TEST(Elementwise, ShapeMismatchReportsBothShapes) {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({3, 2});
  try {
    ops::add(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    EXPECT_NE(msg.find("[3,2]"), std::string::npos);
  }
}

TEST(Elementwise, LogRejectsNonPositive) {
  EXPECT_THROW(ops::log(Tensor::from({2}, {1.0, 0.0})), std::domain_error);
  EXPECT_THROW(ops::log(Tensor::from({1}, {-3.0})), std::domain_error);
}

TEST(Matmul, IdentityAndArithmetic) {
  auto eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto m = random_tensor({3, 3}, 7, -2, 2, false);
  EXPECT_EQ(values(ops::matmul(eye, m)), values(m));
  auto row = Tensor::from({1, 2}, {1, 2});
  auto col = Tensor::from({2, 1}, {3, 4});
  EXPECT_EQ(ops::matmul(row, col).item(), 11.0);
}

TEST(Matmul, RejectsInnerDimensionMismatch) {
  EXPECT_THROW(ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  auto a = random_tensor({4, 5}, 1);
  auto b = random_tensor({5, 3}, 2);
  auto w = random_tensor({4, 3}, 3, -2, 2, false);
  auto r = check_gradient(
      "matmul", [&] { return ops::weighted_sum(ops::matmul(a, b), w.data()); }, {a, b}, 1e-6);
  EXPECT_TRUE(r.passed()) << r.max_rel_error;
}

TEST(Softmax, SymmetricAndStable) {
  auto s = ops::softmax(Tensor::from({2}, {0, 0}));
  EXPECT_EQ(values(s), (std::vector<double>{0.5, 0.5}));
  auto big = ops::softmax(Tensor::from({2}, {1000, 0}));
  EXPECT_NEAR(big.at(0), 1.0, 1e-300);
  EXPECT_GE(big.at(1), 0.0);
  EXPECT_LT(big.at(1), 1e-300);
  for (double v : big.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Softmax, RowsSumToOne) {
  auto x = random_tensor({7, 4}, 11, -5, 5, false);
  auto s = ops::softmax(x);
  for (std::size_t r = 0; r < 7; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < 4; ++c) {
      EXPECT_GT(s.at(r, c), 0.0);
      EXPECT_LT(s.at(r, c), 1.0);
      total += s.at(r, c);
    }
    EXPECT_NEAR(total, 1.0, 1e-15);
  }
}

TEST(Softmax, JacobianMatchesFiniteDifferences) {
  auto x = random_tensor({6}, 5);
  auto r = check_jacobian("softmax", [&] { return ops::softmax(x); }, {x}, 1e-6);
  EXPECT_TRUE(r.passed()) << r.max_rel_error;
}

TEST(GatherRows, DuplicatesAccumulateGradient) {
  auto src = Tensor::from({2, 2}, {1, 2, 3, 4}, true);
  const std::vector<std::size_t> idx{0, 0};
  auto g = ops::gather_rows(src, idx);
  EXPECT_EQ(values(g), (std::vector<double>{1, 2, 1, 2}));
  backward(ops::sum(g));
  EXPECT_EQ(grads(src), (std::vector<double>{2, 2, 0, 0}));
}

TEST(GatherRows, ShadowRowIsZeroWithoutGradient) {
  auto src = Tensor::from({2, 2}, {1, 2, 3, 4}, true);
  const std::vector<std::size_t> idx{2};
  auto g = ops::gather_rows(src, idx);
  EXPECT_EQ(values(g), (std::vector<double>{0, 0}));
  backward(ops::sum(ops::add_scalar(g, 1.0)));
  EXPECT_EQ(grads(src), (std::vector<double>{0, 0, 0, 0}));
}

TEST(GatherRows, RejectsIndexBeyondShadow) {
  auto src = Tensor::zeros({2, 2});
  const std::vector<std::size_t> idx{3};
  EXPECT_THROW(ops::gather_rows(src, idx), std::out_of_range);
}

TEST(GatherRows, GradientMatchesFiniteDifferences) {
  auto src = random_tensor({6, 3}, 21);
  const std::vector<std::size_t> idx{5, 0, 6, 2, 2, 4, 1};
  auto w = random_tensor({7, 3}, 22, -2, 2, false);
  auto r = check_gradient(
      "gather", [&] { return ops::weighted_sum(ops::gather_rows(src, idx), w.data()); }, {src},
      1e-6);
  EXPECT_TRUE(r.passed()) << r.max_rel_error;
}

TEST(StopGradient, ForwardIdentity) {
  auto x = random_tensor({5}, 3);
  auto y = ops::stop_gradient(x);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(x.at(i) - y.at(i), 0.0);
}

TEST(StopGradient, BlocksGradient) {
  auto x = random_tensor({4}, 4);
  backward(ops::add(ops::sum(ops::stop_gradient(x)), ops::scale(ops::sum(x), 0.0)));
  EXPECT_EQ(grads(x), (std::vector<double>(4, 0.0)));
}

TEST(StopGradient, OnlyBarePathsCount) {
  // Straight-through structure c - sg(x) + x: exactly one bare path.
  auto x = random_tensor({4}, 5);
  auto c = Tensor::from({4}, {1, 0, 0, 1});
  backward(ops::sum(ops::add(ops::sub(c, ops::stop_gradient(x)), x)));
  EXPECT_EQ(grads(x), (std::vector<double>(4, 1.0)));
  // x - sg(x) + x has two bare paths.
  x.zero_grad();
  backward(ops::sum(ops::add(ops::sub(x, ops::stop_gradient(x)), x)));
  EXPECT_EQ(grads(x), (std::vector<double>(4, 2.0)));
}

TEST(StraightThrough, MatchesComposedForm) {
  auto hard = Tensor::from({3}, {1, 0, 1});
  auto soft_in = random_tensor({3}, 8);
  auto soft = ops::softmax(soft_in);
  auto st = ops::straight_through(hard, soft);
  auto composed = ops::add(ops::sub(hard, ops::stop_gradient(soft)), soft);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(st.at(i), hard.at(i));
    EXPECT_NEAR(composed.at(i), hard.at(i), 1e-15);
  }
  auto w = std::vector<double>{0.3, -1.2, 2.0};
  backward(ops::weighted_sum(st, w));
  auto g1 = grads(soft_in);
  soft_in.zero_grad();
  backward(ops::weighted_sum(ops::add(ops::sub(hard, ops::stop_gradient(ops::softmax(soft_in))),
                                      ops::softmax(soft_in)),
                             w));
  auto g2 = grads(soft_in);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(g1[i], g2[i], 1e-15);
}

TEST(Backward, SumAndSquare) {
  auto x = Tensor::from({3}, {1, -2, 0.5}, true);
  backward(ops::sum(x));
  EXPECT_EQ(grads(x), (std::vector<double>{1, 1, 1}));
  x.zero_grad();
  backward(ops::sum(ops::mul(x, x)));
  EXPECT_EQ(grads(x), (std::vector<double>{2, -4, 1}));
}

TEST(Backward, RejectsNonScalarLoss) {
  auto x = random_tensor({3}, 1);
  EXPECT_THROW(backward(ops::scale(x, 2.0)), ShapeError);
}

TEST(Tape, TopologicalOrderAndSingleVisit) {
  auto x = random_tensor({2, 2}, 1);
  auto y = ops::matmul(x, x);
  auto z = ops::add(y, ops::exp(x));
  auto loss = ops::sum(ops::mul(z, y));
  auto tape = Tape::record(loss);
  std::unordered_map<const detail::Node*, std::size_t> position;
  for (std::size_t i = 0; i < tape.nodes().size(); ++i) {
    EXPECT_TRUE(position.emplace(tape.nodes()[i], i).second) << "node visited twice";
  }
  for (const auto* node : tape.nodes())
    for (const auto& parent : node->parents)
      if (parent->requires_grad) {
        ASSERT_TRUE(position.count(parent.get()));
        EXPECT_LT(position[parent.get()], position[node]);
      }
  EXPECT_EQ(tape.nodes().back(), loss.node().get());
  EXPECT_EQ(tape.size(), 6u);  // x, matmul, exp, add, mul, sum
}

TEST(Determinism, IdenticalInputsGiveBitIdenticalValues) {
  auto run = [] {
    auto a = random_tensor({5, 4}, 99);
    auto b = random_tensor({4, 3}, 98);
    return values(ops::softmax(ops::matmul(a, b)));
  };
  EXPECT_EQ(run(), run());
}

// Every differentiable op against central differences on inputs in [-2, 2].
class OpGradient : public ::testing::TestWithParam<int> {};

TEST_P(OpGradient, MatchesFiniteDifferences) {
  const auto seed = static_cast<unsigned long long>(GetParam());
  auto a = random_tensor({4, 3}, seed);
  auto b = random_tensor({4, 3}, seed + 100);
  auto pos = random_tensor({4, 3}, seed + 200, 0.5, 2.0);
  auto v = random_tensor({3}, seed + 300);
  auto w = random_tensor({4, 3}, seed + 400, -2, 2, false);
  auto ws = [&](const Tensor& t) {
    auto wt = random_tensor(t.shape(), seed + 500, -2, 2, false);
    return ops::weighted_sum(t, wt.data());
  };
  const double tol = 1e-5;
  std::vector<GradCheckResult> results{
      check_gradient("add", [&] { return ws(ops::add(a, b)); }, {a, b}, tol),
      check_gradient("sub", [&] { return ws(ops::sub(a, b)); }, {a, b}, tol),
      check_gradient("mul", [&] { return ws(ops::mul(a, b)); }, {a, b}, tol),
      check_gradient("exp", [&] { return ws(ops::exp(a)); }, {a}, tol),
      check_gradient("log", [&] { return ws(ops::log(pos)); }, {pos}, tol),
      check_gradient("square", [&] { return ws(ops::square(a)); }, {a}, tol),
      check_gradient("softmax", [&] { return ws(ops::softmax(a)); }, {a}, tol),
      check_gradient("log_softmax", [&] { return ws(ops::log_softmax(a)); }, {a}, tol),
      check_gradient("transpose", [&] { return ws(ops::transpose(a)); }, {a}, tol),
      check_gradient("concat_cols", [&] { return ws(ops::concat_cols(a, b)); }, {a, b}, tol),
      check_gradient("concat_rows", [&] { return ws(ops::concat_rows(a, b)); }, {a, b}, tol),
      check_gradient("slice_cols", [&] { return ws(ops::slice_cols(a, 1, 3)); }, {a}, tol),
      check_gradient("add_rowvec", [&] { return ws(ops::add_rowvec(a, v)); }, {a, v}, tol),
      check_gradient("mul_rowvec", [&] { return ws(ops::mul_rowvec(a, v)); }, {a, v}, tol),
      check_gradient("standardize", [&] { return ws(ops::standardize_cols(a)); }, {a}, tol),
      check_gradient("l2_normalize", [&] { return ws(ops::l2_normalize_rows(a)); }, {a}, tol),
      check_gradient("pairwise_distance", [&] { return ws(ops::pairwise_distance(a, b)); },
                     {a, b}, tol),
      check_gradient("mean", [&] { return ops::mean(ops::mul(a, w)); }, {a}, tol),
      check_gradient("leaky_relu", [&] { return ws(ops::leaky_relu(a, 0.1)); }, {a}, tol),
      check_gradient("relu", [&] { return ws(ops::relu(a)); }, {a}, tol),
  };
  const std::vector<double> targets{0.0, std::log(2.0), -1.0, 0.5};
  results.push_back(check_gradient(
      "log_normalize_rows", [&] { return ws(ops::log_normalize_rows(a, targets)); }, {a}, tol));
  for (const auto& r : results) EXPECT_TRUE(r.passed()) << r.name << " " << r.max_rel_error;
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGradient, ::testing::Values(1, 2, 3));

TEST(KernelAggregate, MatchesDirectSumAndGradient) {
  // 3 queries, 4 support points, up to 2 neighbors, 2 kernel points.
  auto feats = random_tensor({4, 3}, 31);
  const std::vector<std::size_t> nbr{0, 4, 1, 3, 2, 2};
  auto infl_t = random_tensor({3, 2, 2}, 32, 0, 1, false);
  std::vector<double> infl(infl_t.data().begin(), infl_t.data().end());
  auto out = ops::kernel_aggregate(feats, nbr, 2, infl, 2);
  ASSERT_EQ(out.shape(), (Shape{3, 6}));
  for (std::size_t q = 0; q < 3; ++q)
    for (std::size_t k = 0; k < 2; ++k)
      for (std::size_t c = 0; c < 3; ++c) {
        double expect = 0.0;
        for (std::size_t h = 0; h < 2; ++h) {
          const auto s = nbr[q * 2 + h];
          if (s == 4) continue;
          expect += infl[(q * 2 + h) * 2 + k] * feats.at(s, c);
        }
        EXPECT_NEAR(out.at(q, k * 3 + c), expect, 1e-15);
      }
  auto w = random_tensor({3, 6}, 33, -2, 2, false);
  auto r = check_gradient(
      "kernel_aggregate",
      [&] { return ops::weighted_sum(ops::kernel_aggregate(feats, nbr, 2, infl, 2), w.data()); },
      {feats}, 1e-6);
  EXPECT_TRUE(r.passed()) << r.max_rel_error;
}

TEST(GradCheck, DetectsWrongSignGradient) {
  // A deliberately broken op: forward x^2, backward claims -2x.
  auto x = random_tensor({3}, 77);
  auto broken = [&] {
    auto y = ops::square(x);
    auto wrong = ops::sub(ops::scale(ops::stop_gradient(y), 2.0), y);  // value y, grad -2x
    return ops::sum(wrong);
  };
  auto r = check_gradient("wrong_sign", broken, {x}, 1e-5);
  EXPECT_FALSE(r.passed());
}

#include "end2reg/evaluation.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

using namespace end2reg;

namespace {

std::vector<Vec3> random_points(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<Vec3> p;
  for (std::size_t i = 0; i < n; ++i) p.emplace_back(u(rng), u(rng), u(rng));
  return p;
}

}  // namespace

TEST(Tre, ZeroWhenPoseIsExact) {
  std::mt19937_64 rng(1);
  const auto t = random_rigid(0.1, 45.0, rng);
  for (double e : tre(random_points(15, 2), t, t)) EXPECT_EQ(e, 0.0);
}

TEST(Tre, PureTranslationOffset) {
  std::mt19937_64 rng(3);
  const auto t = random_rigid(0.1, 45.0, rng);
  RigidTransform shift;
  shift.translation = Vec3(0.037, 0, 0);
  for (double e : tre(random_points(15, 4), compose(shift, t), t)) EXPECT_NEAR(e, 0.037, 1e-14);
}

TEST(Tre, MatchesIndependentRecomputation) {
  std::mt19937_64 rng(5);
  const auto lm = random_points(15, 6);
  for (int k = 0; k < 10; ++k) {
    const auto gt = random_rigid(0.1, 45.0, rng);
    const auto pred = compose(random_rigid(0.02, 5.0, rng), gt);
    const auto e = tre(lm, pred, gt);
    for (std::size_t i = 0; i < lm.size(); ++i) {
      const Eigen::Vector4d h(lm[i].x(), lm[i].y(), lm[i].z(), 1.0);
      const Eigen::Vector4d d = (pred.matrix() - gt.matrix()) * h;
      EXPECT_NEAR(e[i], d.head<3>().norm(), 1e-12);
    }
  }
}

TEST(Tre, InvariantUnderCommonLeftComposition) {
  std::mt19937_64 rng(7);
  const auto lm = random_points(15, 8);
  const auto gt = random_rigid(0.1, 45.0, rng);
  const auto pred = random_rigid(0.1, 45.0, rng);
  const auto g = random_rigid(0.5, 180.0, rng);
  const auto a = tre(lm, pred, gt);
  const auto b = tre(lm, compose(g, pred), compose(g, gt));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-10);
}

TEST(Rmse, ZeroTranslationAndRotationOracles) {
  std::mt19937_64 rng(9);
  auto pts = random_points(500, 10);
  const auto gt = random_rigid(0.1, 45.0, rng);
  EXPECT_EQ(rmse(pts, gt, gt), 0.0);

  RigidTransform shift;
  shift.translation = Vec3(0.01, -0.02, 0.005);
  EXPECT_NEAR(rmse(pts, compose(shift, gt), gt), shift.translation.norm(), 1e-14);

  // rotation about the centroid of a centered cloud
  Vec3 c = Vec3::Zero();
  for (const auto& p : pts) c += p;
  c /= static_cast<double>(pts.size());
  for (auto& p : pts) p -= c;
  const auto rot = RigidTransform::from_axis_angle(Vec3(1, 2, 3).normalized(), 0.3, Vec3::Zero());
  double s = 0.0;
  for (const auto& p : pts) s += ((rot.rotation - Mat3::Identity()) * p).squaredNorm();
  EXPECT_NEAR(rmse(pts, rot, RigidTransform{}), std::sqrt(s / pts.size()), 1e-13);
  EXPECT_GT(rmse(pts, rot, RigidTransform{}), 0.0);
}

TEST(Summarize, TextbookQuartiles) {
  const auto s = summarize({5, 1, 4, 2, 3});
  EXPECT_DOUBLE_EQ(s.median, 3.0);
  EXPECT_DOUBLE_EQ(s.q1, 2.0);
  EXPECT_DOUBLE_EQ(s.q3, 4.0);
  EXPECT_DOUBLE_EQ(s.mean, 3.0);
  EXPECT_NEAR(s.sd, std::sqrt(2.5), 1e-15);
  EXPECT_EQ(s.outlier_rate, 0.0);
}

TEST(Summarize, ConstantListHasNoOutliers) {
  const auto s = summarize(std::vector<double>(17, 2.5));
  EXPECT_EQ(s.q3 - s.q1, 0.0);
  EXPECT_EQ(s.outlier_rate, 0.0);
  EXPECT_EQ(s.sd, 0.0);
  EXPECT_THROW(summarize({}), std::invalid_argument);
}

TEST(Summarize, MatchesSortBasedReference) {
  std::mt19937_64 rng(11);
  std::lognormal_distribution<double> d(0.0, 0.8);
  std::vector<double> v(1000);
  for (auto& x : v) x = d(rng);
  const auto s = summarize(v);
  auto sorted = v;
  std::sort(sorted.begin(), sorted.end());
  // n = 1000: positions 249.75, 499.5, 749.25
  auto at = [&](double pos) {
    const auto i = static_cast<std::size_t>(pos);
    return sorted[i] + (pos - i) * (sorted[i + 1] - sorted[i]);
  };
  EXPECT_DOUBLE_EQ(s.q1, at(249.75));
  EXPECT_DOUBLE_EQ(s.median, at(499.5));
  EXPECT_DOUBLE_EQ(s.q3, at(749.25));
  const double fence = s.q3 + 1.5 * (s.q3 - s.q1);
  std::size_t out = 0;
  for (double x : v) out += x > fence;
  EXPECT_DOUBLE_EQ(s.outlier_rate, out / 1000.0);
  EXPECT_GT(s.outlier_rate, 0.0);
}

TEST(Wilcoxon, ConstantShiftIsHighlySignificant) {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> d(2.0, 1.0);
  std::vector<double> a(20), b(20);
  for (std::size_t i = 0; i < 20; ++i) {
    a[i] = d(rng);
    b[i] = a[i] + 0.3;
  }
  const auto w = wilcoxon_signed_rank(a, b);
  EXPECT_EQ(w.n, 20u);
  EXPECT_DOUBLE_EQ(w.w_plus, 210.0);
  EXPECT_EQ(w.w_minus, 0.0);
  EXPECT_LT(w.p_value, 0.001);
  EXPECT_NEAR(w.effect_r, std::abs(w.z) / std::sqrt(20.0), 1e-15);
}

TEST(Wilcoxon, SymmetricNoiseIsNotSignificant) {
  std::mt19937_64 rng(13);
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> a(50), b(50);
  for (std::size_t i = 0; i < 50; ++i) {
    a[i] = 3.0 + d(rng);
    b[i] = a[i] + d(rng);
  }
  EXPECT_GT(wilcoxon_signed_rank(a, b).p_value, 0.01);
}

TEST(Wilcoxon, HandCasesAgreeWithExactEnumeration) {
  const std::vector<std::vector<double>> diffs = {
      {1.2, -0.4, 2.5, 0.8, 1.9, -0.3, 3.1, 0.6},
      {0.5, 1.5, 2.5, 3.5, -4.5, 5.5, 6.5, 7.5},
      {-1.0, 2.0, -3.0, 4.0, 5.0, 6.0, -7.0, 8.0},
      {0.1, 0.2, 0.3, -0.4, 0.5, 0.6, 0.7, 0.8},
  };
  for (const auto& d : diffs) {
    std::vector<double> a(8, 10.0), b(8);
    for (std::size_t i = 0; i < 8; ++i) b[i] = a[i] + d[i];
    const auto w = wilcoxon_signed_rank(a, b);
    // W+ from its definition
    std::vector<std::size_t> order(8);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto x, auto y) { return std::abs(d[x]) < std::abs(d[y]); });
    double wp = 0;
    for (std::size_t r = 0; r < 8; ++r)
      if (d[order[r]] > 0) wp += static_cast<double>(r + 1);
    EXPECT_DOUBLE_EQ(w.w_plus, wp);
    EXPECT_DOUBLE_EQ(w.w_plus + w.w_minus, 36.0);
    // brute force over all 2^8 sign assignments of ranks 1..8
    std::size_t extreme = 0;
    for (unsigned mask = 0; mask < 256; ++mask) {
      double s = 0;
      for (unsigned i = 0; i < 8; ++i)
        if (mask >> i & 1u) s += i + 1.0;
      extreme += std::abs(s - 18.0) >= std::abs(wp - 18.0);
    }
    const double exact = extreme / 256.0;
    EXPECT_NEAR(wilcoxon_exact_p(a, b), exact, 1e-15);
    EXPECT_NEAR(w.p_exact, exact, 1e-15);
    EXPECT_NEAR(w.p_reported(), exact, 0.005);
    // the continuity-corrected normal approximation is close but not within
    // 0.005 everywhere at n = 8; its worst case over all W+ is about 0.0201
    EXPECT_NEAR(w.p_value, exact, 0.021) << "W+ " << w.w_plus;
  }
}

TEST(Wilcoxon, ExactDistributionWithTiesSumsToOne) {
  std::vector<double> a(9, 0.0), b = {1, 1, -1, 2, 2, -2, 3, 4, -4};
  const double p = wilcoxon_exact_p(a, b);
  // average ranks 2,2,2,5,5,5,7,8.5,8.5; observed W+ = 2+2+5+5+7+8.5
  const double ranks[9] = {2, 2, 2, 5, 5, 5, 7, 8.5, 8.5};
  const double total = 45.0, observed = 29.5;
  std::size_t extreme = 0;
  for (unsigned mask = 0; mask < 512; ++mask) {
    double s = 0;
    for (unsigned i = 0; i < 9; ++i)
      if (mask >> i & 1u) s += ranks[i];
    extreme += std::abs(2 * s - total) >= std::abs(2 * observed - total);
  }
  EXPECT_NEAR(p, extreme / 512.0, 1e-15);
  const auto w = wilcoxon_signed_rank(a, b);
  EXPECT_NEAR(w.p_exact, p, 1e-15);
  std::vector<double> big_a(60, 0.0), big_b(60);
  for (std::size_t i = 0; i < 60; ++i) big_b[i] = (i % 3 ? 1.0 : -1.0) * (i + 1.0);
  EXPECT_LT(wilcoxon_signed_rank(big_a, big_b).p_exact, 0.0);
  EXPECT_THROW(wilcoxon_exact_p(big_a, big_b), std::invalid_argument);
}

TEST(Wilcoxon, TiesUseAverageRanks) {
  std::vector<double> a(7, 0.0), b = {1, 1, -1, 2, 2, 2, 3};
  const auto w = wilcoxon_signed_rank(a, b);
  // ranks: |1| x3 -> 2, |2| x3 -> 5, 3 -> 7
  EXPECT_DOUBLE_EQ(w.w_minus, 2.0);
  EXPECT_DOUBLE_EQ(w.w_plus, 26.0);
}

TEST(Wilcoxon, Guards) {
  std::vector<double> a = {1, 2, 3, 4, 5, 6, 7};
  EXPECT_THROW(wilcoxon_signed_rank(a, a), std::invalid_argument);
  std::vector<double> b = {1, 2, 3, 4, 5, 6};
  EXPECT_THROW(wilcoxon_signed_rank(a, b), std::invalid_argument);
  std::vector<double> c = {2, 3, 4, 5, 6, 6, 7};  // only 5 nonzero differences
  EXPECT_THROW(wilcoxon_signed_rank(a, c), std::invalid_argument);
}

#include "end2reg/gradcheck.hpp"
#include "end2reg/matcher.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

using namespace end2reg;

namespace {

std::vector<Vec3> blob(std::size_t n, unsigned seed, double extent = 0.5) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-extent, extent);
  std::vector<Vec3> pts;
  for (std::size_t i = 0; i < n; ++i) pts.emplace_back(u(rng), u(rng), u(rng));
  return pts;
}

MatchSet identity_matches(std::size_t n, double w = 1.0) {
  MatchSet m;
  for (std::size_t i = 0; i < n; ++i) m.add(i, i, w);
  return m;
}

std::vector<Vec3> transformed(const RigidTransform& t, const std::vector<Vec3>& pts) {
  std::vector<Vec3> out;
  for (const auto& p : pts) out.push_back(t(p));
  return out;
}

double weighted_sse(const RigidTransform& t, const MatchSet& m, const std::vector<Vec3>& p,
                    const std::vector<Vec3>& q) {
  double s = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i)
    s += m.weights[i] * (t(p[m.pairs[i].first]) - q[m.pairs[i].second]).squaredNorm();
  return s;
}

Superpoints make_superpoints(const std::vector<Vec3>& pts, std::size_t per_patch) {
  Superpoints sp;
  sp.points = pts;
  for (std::size_t s = 0; s * per_patch < pts.size(); ++s) {
    sp.patches.emplace_back();
    Vec3 c = Vec3::Zero();
    for (std::size_t i = s * per_patch; i < std::min(pts.size(), (s + 1) * per_patch); ++i) {
      sp.patches.back().push_back(i);
      c += pts[i];
    }
    sp.centers.push_back(c / static_cast<double>(sp.patches.back().size()));
  }
  return sp;
}

Tensor unit_rows(std::vector<std::vector<double>> rows) {
  std::vector<double> flat;
  for (auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  return Tensor::from({rows.size(), rows[0].size()}, flat);
}

}  // namespace

TEST(MatchSet, ValidateCatchesBadEntries) {
  MatchSet m;
  m.add(0, 1, 0.5);
  EXPECT_NO_THROW(m.validate(1, 2));
  EXPECT_THROW(m.validate(1, 1), GeometryError);
  m.add(0, 0, -0.1);
  EXPECT_THROW(m.validate(1, 2), GeometryError);
}

TEST(SuperpointPatches, ChainedProvenanceAndTruncation) {
  PointCloud c;
  c.positions = blob(1500, 1);
  auto pyr = build_pyramid(c, {3, 0.05, 2.5, 5, 8, 42});
  auto sp = superpoint_patches(pyr, 1000000);
  std::vector<int> seen(sp.points.size(), 0);
  for (std::size_t s = 0; s < sp.patches.size(); ++s)
    for (auto i : sp.patches[s]) {
      ++seen[i];
      EXPECT_EQ(pyr.levels[2].pool[pyr.levels[1].pool[i]], s);
    }
  for (int v : seen) EXPECT_EQ(v, 1);
  auto small = superpoint_patches(pyr, 3);
  for (std::size_t s = 0; s < small.patches.size(); ++s) {
    ASSERT_LE(small.patches[s].size(), 3u);
    for (std::size_t k = 0; k < small.patches[s].size(); ++k)
      EXPECT_EQ(small.patches[s][k], sp.patches[s][k]);
  }
}

TEST(OverlapLabels, IdenticalCloudsHaveUnitDiagonal) {
  auto sp = make_superpoints(blob(200, 2), 20);
  auto m = superpoint_overlap_labels(sp, sp, RigidTransform::identity(), 0.01);
  for (std::size_t a = 0; a < m.rows; ++a) EXPECT_EQ(m.at(a, a), 1.0);
}

TEST(OverlapLabels, DisjointCloudsAreZero) {
  auto a = make_superpoints(blob(100, 3), 10);
  auto pts = blob(100, 4);
  for (auto& p : pts) p += Vec3(10 * 0.05 + 1.0, 0, 0);
  auto b = make_superpoints(pts, 10);
  auto m = superpoint_overlap_labels(a, b, RigidTransform::identity(), 0.05);
  for (double v : m.values) EXPECT_EQ(v, 0.0);
}

TEST(OverlapLabels, MatchesBruteForceDoubleLoop) {
  Rng rng(5);
  auto t = random_rigid(0.1, 45.0, rng);
  auto pre = make_superpoints(blob(300, 6), 17);
  auto moved = transformed(t, blob(300, 6));
  std::normal_distribution<double> noise(0.0, 0.01);
  for (auto& p : moved) p += Vec3(noise(rng), noise(rng), noise(rng));
  auto intra = make_superpoints(std::vector<Vec3>(moved.begin() + 40, moved.end()), 13);
  const double r = 0.03;
  auto m = superpoint_overlap_labels(pre, intra, t, r);
  for (std::size_t a = 0; a < pre.patches.size(); ++a)
    for (std::size_t b = 0; b < intra.patches.size(); ++b) {
      std::size_t count = 0;
      for (auto i : pre.patches[a]) {
        bool hit = false;
        for (auto j : intra.patches[b]) hit |= (t(pre.points[i]) - intra.points[j]).norm() <= r;
        count += hit;
      }
      ASSERT_EQ(m.at(a, b), static_cast<double>(count) / pre.patches[a].size()) << a << "," << b;
    }
  EXPECT_GT(m.positives(), 0u);
}

TEST(RadialHistograms, BinsAndNormalization) {
  std::vector<Vec3> c{Vec3::Zero(), Vec3(10, 0, 0)};
  std::vector<Vec3> p{Vec3(0.05, 0, 0), Vec3(0, 0.17, 0), Vec3(0, 0, 0.16)};
  auto h = radial_histograms(c, p, {}, 0.2, 4);
  EXPECT_NEAR(h[1], 1.0 / std::sqrt(5.0), 1e-15);
  EXPECT_NEAR(h[3], 2.0 / std::sqrt(5.0), 1e-15);
  for (std::size_t b = 4; b < 8; ++b) EXPECT_EQ(h[b], 0.0);
}

TEST(CoarseMatch, IdenticalFeaturesRankDiagonalFirst) {
  auto f = ops::l2_normalize_rows(Tensor::from({4, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1, 1, 1, 0}));
  auto r = coarse_match(f, f, {4, 0.1, 0.2});
  ASSERT_EQ(r.pairs.size(), 4u);
  for (const auto& [a, b] : r.pairs) EXPECT_EQ(a, b);
}

TEST(CoarseMatch, UniformScoresFallBackToIndexOrder) {
  auto pre = unit_rows({{1, 0, 0, 0}, {0, 1, 0, 0}});
  auto intra = unit_rows({{0, 0, 1, 0}, {0, 0, 0, 1}});
  auto r = coarse_match(pre, intra, {10, 0.1, 0.2});
  ASSERT_EQ(r.pairs.size(), 4u);  // truncated to Mp * Mi
  const std::vector<IndexPair> expect{{0, 0}, {0, 1}, {1, 0}, {1, 1}};
  EXPECT_EQ(r.pairs, expect);
  for (double s : r.scores) EXPECT_DOUBLE_EQ(s, 0.25);
}

TEST(CoarseMatch, GeometricBonusBreaksFeatureTies) {
  auto pre = unit_rows({{1, 0}, {1, 0}});
  auto intra = unit_rows({{1, 0}, {1, 0}});
  std::vector<double> hp{1, 0, 0, 1}, hi{0, 1, 1, 0};
  auto r = coarse_match(pre, intra, {2, 0.1, 0.2}, hp, hi, 2);
  EXPECT_EQ(r.pairs, (std::vector<IndexPair>{{0, 1}, {1, 0}}));
}

TEST(SlackAssignment, MarginalsConverge) {
  auto a = random_tensor({6, 4}, 1, -1, 1, false);
  auto b = random_tensor({5, 4}, 2, -1, 1, false);
  auto x = slack_log_assignment(a, b, Tensor::scalar(0.3), 200);
  for (std::size_t j = 0; j <= 5; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i <= 6; ++i) s += std::exp(x.at(i, j));
    EXPECT_NEAR(s, j < 5 ? 1.0 : 6.0, 1e-12);
  }
  for (std::size_t i = 0; i <= 6; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j <= 5; ++j) s += std::exp(x.at(i, j));
    EXPECT_NEAR(s, i < 6 ? 1.0 : 5.0, 1e-8);
  }
}

TEST(SlackAssignment, GradientMatchesFiniteDifferences) {
  auto a = random_tensor({4, 3}, 3);
  auto b = random_tensor({5, 3}, 4);
  auto slack = Tensor::scalar(0.7, true);
  std::vector<double> w(30);
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(1.3 * i);
  auto r = check_gradient("slack", [&] { return ops::weighted_sum(slack_log_assignment(a, b, slack), w); },
                          {a, b, slack}, 1e-5);
  EXPECT_TRUE(r.passed()) << r.max_rel_error;
}

TEST(FineMatch, IdenticalDistinctivePatchesMatchIdentity) {
  const std::size_t n = 6;
  auto pts = blob(n, 7);
  Superpoints sp;
  sp.points = pts;
  sp.centers = {Vec3::Zero()};
  sp.patches = {{0, 1, 2, 3, 4, 5}};
  std::vector<double> f(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) f[i * n + i] = 10.0;
  auto feats = Tensor::from({n, n}, f);
  auto r = fine_match(feats, feats, sp, sp, {{0, 0}}, Tensor::scalar(0.0));
  ASSERT_EQ(r.matches.size(), n);
  for (std::size_t i = 0; i < n; ++i) {
    EXPECT_EQ(r.matches.pairs[i], (IndexPair{i, i}));
    // Five normalization rounds leave part of the slack mass unsettled, so the
    // weight sits below 1 but is the largest entry of its row.
    EXPECT_GT(r.matches.weights[i], 0.85);
    for (std::size_t j = 0; j <= n; ++j)
      EXPECT_LE(std::exp(r.assignments[0].at(i, j)), r.matches.weights[i] + 1e-15);
  }
}

TEST(FineMatch, NoiseDescriptorsGoToSlack) {
  const std::size_t n = 10;
  Superpoints sp;
  sp.points = blob(n, 8);
  sp.centers = {Vec3::Zero()};
  sp.patches = {{0, 1, 2, 3, 4, 5, 6, 7, 8, 9}};
  auto a = random_tensor({n, 8}, 9, -0.1, 0.1, false);
  auto b = random_tensor({n, 8}, 10, -0.1, 0.1, false);
  auto r = fine_match(a, b, sp, sp, {{0, 0}}, Tensor::scalar(2.0));
  const auto& x = r.assignments[0];
  double slack = 0.0, total = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= n; ++j) {
      total += std::exp(x.at(i, j));
      if (j == n) slack += std::exp(x.at(i, j));
    }
  EXPECT_GT(slack / total, 0.5);
  EXPECT_LE(r.matches.size(), 2u);
}

TEST(FineMatch, EmptyPatchIsSkipped) {
  Superpoints sp;
  sp.points = blob(3, 11);
  sp.centers = {Vec3::Zero(), Vec3::Ones()};
  sp.patches = {{0, 1, 2}, {}};
  auto f = random_tensor({3, 4}, 12, -1, 1, false);
  auto r = fine_match(f, f, sp, sp, {{0, 1}, {1, 0}, {0, 0}}, Tensor::scalar(0.0));
  EXPECT_EQ(r.processed, (std::vector<IndexPair>{{0, 0}}));
}

TEST(Procrustes, SelfMatchIsIdentity) {
  auto pts = blob(30, 13);
  auto t = weighted_procrustes(identity_matches(30), pts, pts);
  EXPECT_LT((t.rotation - Mat3::Identity()).norm(), 1e-10);
  EXPECT_LT(t.translation.norm(), 1e-10);
}

TEST(Procrustes, RecoversRandomTransformsExactly) {
  Rng rng(14);
  auto pts = blob(50, 15);
  std::uniform_real_distribution<double> u(0.1, 2.0);
  for (int trial = 0; trial < 100; ++trial) {
    auto t = random_rigid(0.5, 180.0, rng);
    auto m = identity_matches(50);
    for (auto& w : m.weights) w = u(rng);
    auto est = weighted_procrustes(m, pts, transformed(t, pts));
    ASSERT_LT(rotation_angle_between(est.rotation, t.rotation), 1e-8);
    ASSERT_LT((est.translation - t.translation).norm(), 1e-9);
  }
}

TEST(Procrustes, ReflectionTrapKeepsProperRotation) {
  std::vector<Vec3> p{Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(0, 0, 1), Vec3(-1, -1, -1)};
  std::vector<Vec3> q;
  for (const auto& x : p) q.emplace_back(-x.x(), x.y(), x.z());  // mirror image
  auto t = weighted_procrustes(identity_matches(4), p, q);
  EXPECT_NEAR(t.rotation.determinant(), 1.0, 1e-12);
  EXPECT_TRUE(t.is_valid(1e-9));
}

TEST(Procrustes, RejectsTooFewAndCollinear) {
  auto pts = blob(5, 16);
  EXPECT_THROW(weighted_procrustes(identity_matches(2), pts, pts), GeometryError);
  std::vector<Vec3> line;
  for (int i = 0; i < 5; ++i) line.emplace_back(0.1 * i, 0.2 * i, -0.1 * i);
  EXPECT_THROW(weighted_procrustes(identity_matches(5), line, line), GeometryError);
  EXPECT_THROW(weighted_procrustes(identity_matches(5, 0.0), pts, pts), GeometryError);
}

TEST(Procrustes, LocallyOptimalAgainstPerturbations) {
  Rng rng(17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.05);
  for (int inst = 0; inst < 10; ++inst) {
    const std::size_t n = 5 + inst;
    auto p = blob(n, 100 + inst);
    auto q = transformed(random_rigid(0.3, 90.0, rng), p);
    for (auto& x : q) x += Vec3(noise(rng), noise(rng), noise(rng));
    auto m = identity_matches(n);
    for (auto& w : m.weights) w = u(rng) + 0.05;
    auto best = weighted_procrustes(m, p, q);
    const double sse = weighted_sse(best, m, p, q);
    for (int k = 0; k < 1000; ++k) {
      auto d = random_rigid(0.02, 3.0, rng);
      ASSERT_LE(sse, weighted_sse(compose(d, best), m, p, q) + 1e-12);
    }
  }
}

TEST(Procrustes, EquivariantUnderCommonMotion) {
  Rng rng(18);
  std::normal_distribution<double> noise(0.0, 0.02);
  auto p = blob(25, 19);
  auto q = transformed(random_rigid(0.2, 60.0, rng), p);
  for (auto& x : q) x += Vec3(noise(rng), noise(rng), noise(rng));
  auto m = identity_matches(25);
  auto g = random_rigid(1.0, 180.0, rng);
  auto base = weighted_procrustes(m, p, q);
  auto moved = weighted_procrustes(m, transformed(g, p), transformed(g, q));
  auto expect = compose(g, compose(base, invert(g)));
  EXPECT_LT((moved.rotation - expect.rotation).norm(), 1e-8);
  EXPECT_LT((moved.translation - expect.translation).norm(), 1e-8);
}

TEST(Refine, AllInliersIsFixedPoint) {
  Rng rng(20);
  auto p = blob(40, 21);
  auto q = transformed(random_rigid(0.1, 30.0, rng), p);
  auto m = identity_matches(40);
  auto t0 = weighted_procrustes(m, p, q);
  auto r = refine_transform(t0, m, p, q, 0.0625);
  EXPECT_FALSE(r.degenerate);
  EXPECT_EQ(r.inliers, 40u);
  EXPECT_LT((r.transform.rotation - t0.rotation).norm(), 1e-12);
  EXPECT_LT((r.transform.translation - t0.translation).norm(), 1e-12);
}

TEST(Refine, RecoversPoseWithThirtyPercentOutliers) {
  Rng rng(22);
  auto p = blob(200, 23, 0.6);
  auto t = random_rigid(0.1, 45.0, rng);
  auto q = transformed(t, p);
  std::uniform_real_distribution<double> u(-0.6, 0.6);
  for (std::size_t i = 0; i < 60; ++i) q[i] = Vec3(u(rng), u(rng), u(rng));
  auto m = identity_matches(200);
  auto t0 = weighted_procrustes(m, p, q);
  auto r = refine_transform(t0, m, p, q, 0.0625, 20);
  EXPECT_FALSE(r.degenerate);
  EXPECT_LT(rotation_angle_between(r.transform.rotation, t.rotation) * 180.0 / std::numbers::pi, 0.5);
}

TEST(Refine, ZeroRadiusIsFlagged) {
  auto p = blob(10, 24);
  auto r = refine_transform(RigidTransform::identity(), identity_matches(10), p, p, 0.0);
  EXPECT_TRUE(r.degenerate);
  EXPECT_EQ(r.transform.rotation, Mat3::Identity());
}

TEST(CoarseLoss, SatisfiedMarginsAreNearZero) {
  auto pre = unit_rows({{1, 0, 0}, {0, 1, 0}});
  auto intra = unit_rows({{1, 0, 0}, {0, -1, 0}, {-1, 0, 0}});
  OverlapMatrix o{2, 3, {0.8, 0.0, 0.0, 0.0, 0.0, 0.0}};
  // positive (0,0) at distance 0; negatives at sqrt(2) > 1.4 or 2
  EXPECT_LT(coarse_loss(pre, intra, o).item(), 0.01);
}

TEST(CoarseLoss, EqualDistancesArePenalized) {
  auto pre = unit_rows({{1, 0}});
  auto intra = unit_rows({{0, 1}, {0, 1}});
  OverlapMatrix o{1, 2, {0.5, 0.0}};
  EXPECT_GT(coarse_loss(pre, intra, o).item(), 0.0);
}

TEST(CoarseLoss, RequiresAPositive) {
  auto f = unit_rows({{1, 0}});
  EXPECT_THROW(coarse_loss(f, f, OverlapMatrix{1, 1, {0.05}}), std::domain_error);
}

TEST(CoarseLoss, GradientMatchesFiniteDifferences) {
  auto a = random_tensor({5, 4}, 25, -0.6, 0.6);
  auto b = random_tensor({6, 4}, 26, -0.6, 0.6);
  OverlapMatrix o{5, 6, std::vector<double>(30, 0.0)};
  for (std::size_t i = 0; i < 30; i += 4) o.values[i] = 0.3 + 0.02 * i;
  o.values[1] = 0.05;  // ignored band
  auto r = check_gradient("coarse_loss", [&] { return coarse_loss(a, b, o); }, {a, b}, 1e-5);
  EXPECT_TRUE(r.passed()) << r.max_rel_error;
}

TEST(FineGroundTruth, NearestWithinRadiusElseSlack) {
  std::vector<Vec3> pre{Vec3(0, 0, 0), Vec3(1, 0, 0)};
  std::vector<Vec3> intra{Vec3(0.01, 0, 0), Vec3(0.0, 0.5, 0), Vec3(0.005, 0, 0)};
  auto gt = fine_ground_truth(pre, intra, RigidTransform::identity(), 0.025);
  const std::vector<IndexPair> expect{{0, 2}, {1, 3}, {2, 0}, {2, 1}};
  EXPECT_EQ(gt, expect);
}

TEST(FineLoss, ConcentratedAssignmentIsNearZero) {
  // log P = 0 on every gt entry
  std::vector<double> v(9, -50.0);
  v[0] = 0.0;  // (0,0)
  v[4] = 0.0;  // (1,1)
  auto x = Tensor::from({3, 3}, v);
  EXPECT_LT(fine_loss({x}, {{{0, 0}, {1, 1}}}).item(), 0.01);
}

TEST(FineLoss, UniformAssignmentGivesLogOfColumns) {
  const std::size_t s = 7;
  auto x = Tensor::full({5, s + 1}, -std::log(static_cast<double>(s + 1)));
  auto l = fine_loss({x}, {{{0, 1}, {1, 2}, {2, s}, {3, 0}}});
  EXPECT_NEAR(l.item(), std::log(s + 1.0), 1e-15);
}

TEST(FineLoss, SlackOnlyPatchesExcluded) {
  auto a = Tensor::full({3, 3}, -1.0);
  auto b = Tensor::full({3, 3}, -2.0);
  EXPECT_NEAR(fine_loss({a, b}, {{{0, 2}, {2, 1}}, {{0, 0}}}).item(), 2.0, 1e-15);
  EXPECT_THROW(fine_loss({a}, {{{0, 2}}}), std::domain_error);
}

TEST(FineLoss, GradientThroughAssignmentMatchesFiniteDifferences) {
  auto a = random_tensor({4, 3}, 27);
  auto b = random_tensor({3, 3}, 28);
  auto slack = Tensor::scalar(0.2, true);
  std::vector<std::vector<IndexPair>> gt{{{0, 1}, {1, 0}, {2, 3}, {3, 2}, {4, 1}}};
  auto r = check_gradient("fine_loss",
                          [&] { return fine_loss({slack_log_assignment(a, b, slack)}, gt); },
                          {a, b, slack}, 1e-5);
  EXPECT_TRUE(r.passed()) << r.max_rel_error;
}

TEST(DualLoss, TotalIsSumOfParts) {
  auto c = Tensor::scalar(0.123456789);
  auto f = Tensor::scalar(2.718281828);
  auto d = dual_loss(c, f);
  EXPECT_EQ(d.total.item(), c.item() + f.item());
}

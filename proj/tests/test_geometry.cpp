#include "end2reg/geometry.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <numbers>
#include <tuple>

using namespace end2reg;

namespace {

PointCloud random_cloud(std::size_t n, unsigned seed, double extent = 1.0) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-extent, extent);
  PointCloud c;
  for (std::size_t i = 0; i < n; ++i) c.positions.emplace_back(u(rng), u(rng), u(rng));
  return c;
}

// Brute-force radius query: (distance^2, index) sorted.
std::vector<std::size_t> brute_within(const std::vector<Vec3>& support, const Vec3& q, double r,
                                      std::size_t cap) {
  std::vector<std::pair<double, std::size_t>> hits;
  for (std::size_t i = 0; i < support.size(); ++i) {
    const double d2 = (support[i] - q).squaredNorm();
    if (d2 <= r * r) hits.emplace_back(d2, i);
  }
  std::sort(hits.begin(), hits.end());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < std::min(cap, hits.size()); ++i) out.push_back(hits[i].second);
  out.resize(cap, support.size());
  return out;
}

}  // namespace

TEST(PointCloud, ValidateRejectsEmptyAndMismatchedChannels) {
  PointCloud empty;
  EXPECT_THROW(empty.validate(), GeometryError);
  PointCloud c = random_cloud(3, 1);
  c.labels = std::vector<int>{1, 0};
  EXPECT_THROW(c.validate(), GeometryError);
  c.labels = std::vector<int>{1, 0, 1};
  EXPECT_NO_THROW(c.validate());
  c.positions[1].x() = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(c.validate(), GeometryError);
}

TEST(Normalize, TwoPointSymmetry) {
  PointCloud c;
  c.positions = {Vec3(0, 0, 0), Vec3(2, 0, 0)};
  auto [out, n] = normalize_unit_sphere(c);
  EXPECT_EQ(n.center, Vec3(1, 0, 0));
  EXPECT_EQ(n.scale, 1.0);
  EXPECT_EQ(out.positions[0], Vec3(-1, 0, 0));
  EXPECT_EQ(out.positions[1], Vec3(1, 0, 0));
}

TEST(Normalize, IdempotentOnNormalizedCloud) {
  auto [once, n1] = normalize_unit_sphere(random_cloud(50, 3));
  auto [twice, n2] = normalize_unit_sphere(once);
  EXPECT_NEAR(n2.scale, 1.0, 1e-12);
  for (std::size_t i = 0; i < once.size(); ++i)
    EXPECT_LT((once.positions[i] - twice.positions[i]).norm(), 1e-12);
}

TEST(Normalize, RoundTripAndUnitMaxNorm) {
  auto cloud = random_cloud(100, 4, 5.0);
  auto [out, n] = normalize_unit_sphere(cloud);
  double max_norm = 0.0;
  for (const auto& p : out.positions) max_norm = std::max(max_norm, p.norm());
  EXPECT_NEAR(max_norm, 1.0, 1e-15);
  auto back = denormalize(n, out);
  for (std::size_t i = 0; i < cloud.size(); ++i)
    EXPECT_LT((back.positions[i] - cloud.positions[i]).norm(), 1e-12);
}

TEST(Normalize, RejectsDegenerateCloud) {
  PointCloud c;
  c.positions = {Vec3(1, 2, 3), Vec3(1, 2, 3)};
  EXPECT_THROW(normalize_unit_sphere(c), GeometryError);
}

TEST(Transform, ApplyIdentityAndTranslation) {
  auto cloud = random_cloud(10, 5);
  cloud.labels = std::vector<int>(10, 1);
  auto same = apply(RigidTransform::identity(), cloud);
  EXPECT_EQ(same.positions, cloud.positions);
  EXPECT_EQ(same.labels, cloud.labels);
  PointCloud origin;
  origin.positions = {Vec3::Zero()};
  RigidTransform t;
  t.translation = Vec3(0, 0, 1);
  EXPECT_EQ(apply(t, origin).positions[0], Vec3(0, 0, 1));
}

TEST(Transform, InverseRoundTrip) {
  Rng rng(6);
  auto cloud = random_cloud(40, 6);
  for (int trial = 0; trial < 20; ++trial) {
    auto t = random_rigid(0.5, 180.0, rng);
    auto back = apply(invert(t), apply(t, cloud));
    for (std::size_t i = 0; i < cloud.size(); ++i)
      EXPECT_LT((back.positions[i] - cloud.positions[i]).norm(), 1e-10);
  }
}

TEST(Transform, ComposeAndInvert) {
  Rng rng(7);
  auto t = random_rigid(0.3, 90.0, rng);
  auto same = compose(RigidTransform::identity(), t);
  EXPECT_EQ(same.rotation, t.rotation);
  EXPECT_EQ(same.translation, t.translation);
  auto inv_id = invert(RigidTransform::identity());
  EXPECT_EQ(inv_id.rotation, Mat3::Identity());
  EXPECT_EQ(inv_id.translation, Vec3::Zero());
  for (int trial = 0; trial < 50; ++trial) {
    auto a = random_rigid(1.0, 180.0, rng);
    auto e = compose(invert(a), a);
    EXPECT_LT(rotation_angle(e.rotation), 1e-9);
    EXPECT_LT(e.translation.norm(), 1e-10);
    auto b = random_rigid(1.0, 180.0, rng);
    EXPECT_TRUE(compose(a, b).is_valid(1e-9));
    EXPECT_TRUE(invert(compose(a, b)).is_valid(1e-9));
  }
}

TEST(Transform, ComposeAppliesRightOperandFirst) {
  RigidTransform a = RigidTransform::from_axis_angle(Vec3::UnitZ(), std::numbers::pi / 2, Vec3::Zero());
  RigidTransform b;
  b.translation = Vec3(1, 0, 0);
  // b then a: (0,0,0) -> (1,0,0) -> (0,1,0)
  EXPECT_LT((compose(a, b)(Vec3::Zero()) - Vec3(0, 1, 0)).norm(), 1e-15);
}

TEST(RandomRigid, ZeroBoundsGiveIdentity) {
  Rng rng(1);
  auto t = random_rigid(0.0, 0.0, rng);
  EXPECT_EQ(t.rotation, Mat3::Identity());
  EXPECT_EQ(t.translation, Vec3::Zero());
}

TEST(RandomRigid, DefaultBoundsHoldOverTenThousandSamples) {
  Rng rng(2024);
  const double max_angle = 45.0 * std::numbers::pi / 180.0;
  for (int i = 0; i < 10000; ++i) {
    auto t = random_rigid(0.1, 45.0, rng);
    ASSERT_LE(rotation_angle(t.rotation), max_angle + 1e-12);
    ASSERT_LE(t.translation.norm(), 0.1 + 1e-15);
    ASSERT_TRUE(t.is_valid(1e-9));
  }
}

TEST(RandomRigid, DeterministicPerSeed) {
  Rng a(42), b(42);
  auto ta = random_rigid(0.1, 45.0, a);
  auto tb = random_rigid(0.1, 45.0, b);
  EXPECT_EQ(ta.rotation, tb.rotation);
  EXPECT_EQ(ta.translation, tb.translation);
}

TEST(VoxelGrid, SinglePointAndMidpoint) {
  PointCloud one;
  one.positions = {Vec3(0.3, 0.2, 0.1)};
  auto s = voxel_grid_subsample(one, 0.04);
  ASSERT_EQ(s.cloud.size(), 1u);
  EXPECT_EQ(s.cloud.positions[0], one.positions[0]);
  PointCloud two;
  two.positions = {Vec3(0.01, 0.01, 0.01), Vec3(0.03, 0.02, 0.01)};
  two.labels = std::vector<int>{0, 1};
  auto m = voxel_grid_subsample(two, 0.04);
  ASSERT_EQ(m.cloud.size(), 1u);
  EXPECT_LT((m.cloud.positions[0] - Vec3(0.02, 0.015, 0.01)).norm(), 1e-15);
  EXPECT_EQ((*m.cloud.labels)[0], 1);  // tie resolves to 1
}

TEST(VoxelGrid, MatchesBruteForceGrouping) {
  auto cloud = random_cloud(1000, 9, 0.3);
  Rng rng(10);
  std::uniform_real_distribution<double> u(0, 1);
  cloud.colors.emplace();
  cloud.labels.emplace();
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    cloud.colors->emplace_back(u(rng), u(rng), u(rng));
    cloud.labels->push_back(u(rng) < 0.4 ? 1 : 0);
  }
  const double voxel = 0.04;
  auto s = voxel_grid_subsample(cloud, voxel);

  using Key = std::tuple<long, long, long>;
  std::map<Key, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud.positions[i];
    groups[{static_cast<long>(std::floor(p.x() / voxel)), static_cast<long>(std::floor(p.y() / voxel)),
            static_cast<long>(std::floor(p.z() / voxel))}]
        .push_back(i);
  }
  ASSERT_EQ(s.cloud.size(), groups.size());
  std::vector<bool> seen(s.cloud.size(), false);
  for (const auto& [key, members] : groups) {
    const std::size_t out = s.provenance[members.front()];
    ASSERT_FALSE(seen[out]);
    seen[out] = true;
    Vec3 sum = Vec3::Zero(), csum = Vec3::Zero();
    std::size_t ones = 0;
    for (auto i : members) {
      EXPECT_EQ(s.provenance[i], out);
      sum += cloud.positions[i];
      csum += (*cloud.colors)[i];
      ones += (*cloud.labels)[i];
    }
    EXPECT_EQ(s.cloud.positions[out], sum / static_cast<double>(members.size()));
    EXPECT_EQ((*s.cloud.colors)[out], csum / static_cast<double>(members.size()));
    EXPECT_EQ((*s.cloud.labels)[out], 2 * ones >= members.size() ? 1 : 0);
  }
}

TEST(RadiusNeighbors, SinglePointIsItsOwnNeighbor) {
  std::vector<Vec3> p{Vec3(0.5, 0.5, 0.5)};
  auto t = radius_neighbors(p, p, 0.01, 4);
  EXPECT_EQ(t.row(0)[0], 0u);
  EXPECT_EQ(t.row(0)[1], 1u);  // shadow
}

TEST(RadiusNeighbors, IsolatedQueryGetsAllShadowRow) {
  std::vector<Vec3> q{Vec3(5, 5, 5)};
  std::vector<Vec3> s{Vec3(0, 0, 0), Vec3(0.1, 0, 0)};
  auto t = radius_neighbors(q, s, 0.5, 3);
  for (auto i : t.row(0)) EXPECT_EQ(i, 2u);
}

class NeighborOracle : public ::testing::TestWithParam<std::tuple<std::size_t, double, std::size_t>> {};

TEST_P(NeighborOracle, RadiusMatchesBruteForce) {
  const auto [n, radius, cap] = GetParam();
  auto q = random_cloud(n, 11);
  auto s = random_cloud(n, 12);
  auto t = radius_neighbors(q.positions, s.positions, radius, cap);
  for (std::size_t i = 0; i < n; ++i) {
    auto expect = brute_within(s.positions, q.positions[i], radius, cap);
    auto got = t.row(i);
    ASSERT_TRUE(std::equal(got.begin(), got.end(), expect.begin())) << "query " << i;
  }
}

TEST_P(NeighborOracle, KnnMatchesBruteForceSort) {
  const auto [n, radius, cap] = GetParam();
  (void)radius;
  auto q = random_cloud(n, 13, 1.2);
  auto s = random_cloud(n, 14);
  const std::size_t k = std::min<std::size_t>(cap, 7);
  auto table = knn(q.positions, s.positions, k);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::pair<double, std::size_t>> all;
    for (std::size_t j = 0; j < n; ++j) all.emplace_back((s.positions[j] - q.positions[i]).squaredNorm(), j);
    std::sort(all.begin(), all.end());
    for (std::size_t r = 0; r < k; ++r) ASSERT_EQ(table[i * k + r], all[r].second);
  }
}

INSTANTIATE_TEST_SUITE_P(Sizes, NeighborOracle,
                         ::testing::Values(std::make_tuple(500, 0.2, 16),
                                           std::make_tuple(2000, 0.1, 64),
                                           std::make_tuple(300, 0.5, 8)));

TEST(Knn, CoincidentPointAndTieRule) {
  std::vector<Vec3> s{Vec3(1, 0, 0), Vec3(0, 0, 0), Vec3(-1, 0, 0)};
  std::vector<Vec3> q{Vec3(0, 0, 0)};
  EXPECT_EQ(knn(q, s, 1)[0], 1u);
  auto two = knn(q, s, 3);
  EXPECT_EQ(two[1], 0u);  // equidistant (1,0,0) and (-1,0,0): lower index first
  EXPECT_EQ(two[2], 2u);
}

TEST(Knn, RejectsKLargerThanSupport) {
  std::vector<Vec3> s{Vec3::Zero()};
  EXPECT_THROW(knn(s, s, 2), GeometryError);
}

TEST(SubsetCarriesChannels, Labels) {
  auto c = random_cloud(5, 1);
  c.labels = std::vector<int>{0, 1, 0, 1, 1};
  const std::vector<std::size_t> idx{4, 0};
  auto s = c.subset(idx);
  EXPECT_EQ(*s.labels, (std::vector<int>{1, 0}));
}

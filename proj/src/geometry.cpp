#include "end2reg/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace end2reg {

void PointCloud::validate() const {
  if (positions.empty()) throw GeometryError("point cloud is empty");
  for (std::size_t i = 0; i < positions.size(); ++i)
    if (!positions[i].allFinite())
      throw GeometryError("non-finite coordinate at point " + std::to_string(i));
  if (colors && colors->size() != positions.size())
    throw GeometryError("color channel has " + std::to_string(colors->size()) + " entries for " +
                        std::to_string(positions.size()) + " points");
  if (labels && labels->size() != positions.size())
    throw GeometryError("label channel has " + std::to_string(labels->size()) + " entries for " +
                        std::to_string(positions.size()) + " points");
}

PointCloud PointCloud::subset(std::span<const std::size_t> indices) const {
  PointCloud out;
  out.positions.reserve(indices.size());
  for (auto i : indices) out.positions.push_back(positions.at(i));
  if (colors) {
    out.colors.emplace();
    for (auto i : indices) out.colors->push_back((*colors)[i]);
  }
  if (labels) {
    out.labels.emplace();
    for (auto i : indices) out.labels->push_back((*labels)[i]);
  }
  return out;
}

RigidTransform RigidTransform::from_axis_angle(const Vec3& axis, double angle_rad, const Vec3& t) {
  RigidTransform out;
  out.rotation = Eigen::AngleAxisd(angle_rad, axis.normalized()).toRotationMatrix();
  out.translation = t;
  return out;
}

bool RigidTransform::is_valid(double tol) const {
  if (!rotation.allFinite() || !translation.allFinite()) return false;
  const Mat3 gram = rotation.transpose() * rotation;
  if ((gram - Mat3::Identity()).cwiseAbs().maxCoeff() > tol) return false;
  return std::abs(rotation.determinant() - 1.0) <= tol;
}

Eigen::Matrix4d RigidTransform::matrix() const {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = rotation;
  m.topRightCorner<3, 1>() = translation;
  return m;
}

RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
  RigidTransform out;
  out.rotation = a.rotation * b.rotation;
  out.translation = a.rotation * b.translation + a.translation;
  return out;
}

RigidTransform invert(const RigidTransform& t) {
  RigidTransform out;
  out.rotation = t.rotation.transpose();
  out.translation = -(out.rotation * t.translation);
  return out;
}

PointCloud apply(const RigidTransform& t, const PointCloud& cloud) {
  PointCloud out = cloud;
  for (auto& p : out.positions) p = t(p);
  return out;
}

double rotation_angle(const Mat3& r) {
  const double c = (r.trace() - 1.0) * 0.5;
  const Vec3 axis(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
  const double s = 0.5 * axis.norm();
  return std::atan2(s, c);
}

double rotation_angle_between(const Mat3& a, const Mat3& b) {
  return rotation_angle(a.transpose() * b);
}

std::pair<PointCloud, Normalization> normalize_unit_sphere(const PointCloud& cloud) {
  cloud.validate();
  Vec3 center = Vec3::Zero();
  for (const auto& p : cloud.positions) center += p;
  center /= static_cast<double>(cloud.size());
  double scale = 0.0;
  for (const auto& p : cloud.positions) scale = std::max(scale, (p - center).norm());
  if (!(scale > 0.0)) throw GeometryError("cannot normalize a degenerate cloud (all points coincide)");
  Normalization n{center, scale};
  return {apply_normalization(n, cloud), n};
}

PointCloud apply_normalization(const Normalization& n, const PointCloud& cloud) {
  PointCloud out = cloud;
  for (auto& p : out.positions) p = n.forward(p);
  return out;
}

PointCloud denormalize(const Normalization& n, const PointCloud& cloud) {
  PointCloud out = cloud;
  for (auto& p : out.positions) p = n.inverse(p);
  return out;
}

RigidTransform random_rigid(double max_translation, double max_rotation_deg, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Vec3 axis;
  do {
    axis = Vec3(normal(rng), normal(rng), normal(rng));
  } while (axis.norm() < 1e-12);
  const double angle = unit(rng) * max_rotation_deg * std::numbers::pi / 180.0;
  Vec3 dir;
  do {
    dir = Vec3(normal(rng), normal(rng), normal(rng));
  } while (dir.norm() < 1e-12);
  const double radius = max_translation * std::cbrt(unit(rng));
  return RigidTransform::from_axis_angle(axis, angle, dir.normalized() * radius);
}

std::size_t GridKeyHash::operator()(const GridKey& k) const noexcept {
  std::uint64_t h = static_cast<std::uint64_t>(k.x) * 73856093ULL;
  h ^= static_cast<std::uint64_t>(k.y) * 19349663ULL;
  h ^= static_cast<std::uint64_t>(k.z) * 83492791ULL;
  return static_cast<std::size_t>(h);
}

namespace {

GridKey floor_key(const Vec3& p, double cell) {
  return {static_cast<std::int64_t>(std::floor(p.x() / cell)),
          static_cast<std::int64_t>(std::floor(p.y() / cell)),
          static_cast<std::int64_t>(std::floor(p.z() / cell))};
}

}  // namespace

Subsampled voxel_grid_subsample(const PointCloud& cloud, double voxel_size) {
  if (!(voxel_size > 0.0)) throw GeometryError("voxel size must be positive");
  cloud.validate();
  std::unordered_map<GridKey, std::size_t, GridKeyHash> slot;
  Subsampled out;
  out.provenance.resize(cloud.size());
  std::vector<Vec3> pos_sum, col_sum;
  std::vector<std::size_t> count, ones;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto [it, inserted] = slot.try_emplace(floor_key(cloud.positions[i], voxel_size), count.size());
    if (inserted) {
      pos_sum.push_back(Vec3::Zero());
      col_sum.push_back(Vec3::Zero());
      count.push_back(0);
      ones.push_back(0);
    }
    const std::size_t v = it->second;
    out.provenance[i] = v;
    pos_sum[v] += cloud.positions[i];
    if (cloud.colors) col_sum[v] += (*cloud.colors)[i];
    if (cloud.labels && (*cloud.labels)[i] == 1) ++ones[v];
    ++count[v];
  }
  const std::size_t m = count.size();
  out.cloud.positions.resize(m);
  for (std::size_t v = 0; v < m; ++v) out.cloud.positions[v] = pos_sum[v] / static_cast<double>(count[v]);
  if (cloud.colors) {
    out.cloud.colors.emplace(m);
    for (std::size_t v = 0; v < m; ++v) (*out.cloud.colors)[v] = col_sum[v] / static_cast<double>(count[v]);
  }
  if (cloud.labels) {
    out.cloud.labels.emplace(m);
    for (std::size_t v = 0; v < m; ++v) (*out.cloud.labels)[v] = 2 * ones[v] >= count[v] ? 1 : 0;
  }
  return out;
}

SpatialGrid::SpatialGrid(std::span<const Vec3> points, double cell_size)
    : points_(points.begin(), points.end()), cell_(cell_size) {
  if (!(cell_size > 0.0)) throw GeometryError("grid cell size must be positive");
  constexpr auto big = std::numeric_limits<std::int64_t>::max();
  lo_ = {big, big, big};
  hi_ = {-big, -big, -big};
  for (std::size_t i = 0; i < points_.size(); ++i) {
    const GridKey k = key_of(points_[i]);
    cells_[k].push_back(i);
    lo_ = {std::min(lo_.x, k.x), std::min(lo_.y, k.y), std::min(lo_.z, k.z)};
    hi_ = {std::max(hi_.x, k.x), std::max(hi_.y, k.y), std::max(hi_.z, k.z)};
  }
}

GridKey SpatialGrid::key_of(const Vec3& p) const { return floor_key(p, cell_); }

template <class Fn>
void SpatialGrid::visit_shell(const GridKey& c, std::int64_t ring, Fn&& fn) const {
  const std::int64_t x0 = std::max(c.x - ring, lo_.x), x1 = std::min(c.x + ring, hi_.x);
  const std::int64_t y0 = std::max(c.y - ring, lo_.y), y1 = std::min(c.y + ring, hi_.y);
  const std::int64_t z0 = std::max(c.z - ring, lo_.z), z1 = std::min(c.z + ring, hi_.z);
  auto visit = [&](std::int64_t x, std::int64_t y, std::int64_t z) {
    auto it = cells_.find({x, y, z});
    if (it != cells_.end()) fn(it->second);
  };
  for (std::int64_t x = x0; x <= x1; ++x)
    for (std::int64_t y = y0; y <= y1; ++y) {
      if (std::abs(x - c.x) == ring || std::abs(y - c.y) == ring) {
        for (std::int64_t z = z0; z <= z1; ++z) visit(x, y, z);
        continue;
      }
      // Interior column of the shell: only the two caps belong to it.
      if (c.z - ring >= z0 && c.z - ring <= z1) visit(x, y, c.z - ring);
      if (c.z + ring >= z0 && c.z + ring <= z1) visit(x, y, c.z + ring);
    }
}

std::vector<std::size_t> SpatialGrid::within(const Vec3& q, double radius) const {
  std::vector<std::pair<double, std::size_t>> hits;
  const GridKey c = key_of(q);
  const auto rings = static_cast<std::int64_t>(std::ceil(radius / cell_));
  const double r2 = radius * radius;
  for (std::int64_t ring = 0; ring <= rings; ++ring)
    visit_shell(c, ring, [&](const std::vector<std::size_t>& members) {
      for (auto i : members) {
        const double d2 = (points_[i] - q).squaredNorm();
        if (d2 <= r2) hits.emplace_back(d2, i);
      }
    });
  std::sort(hits.begin(), hits.end());
  std::vector<std::size_t> out(hits.size());
  for (std::size_t i = 0; i < hits.size(); ++i) out[i] = hits[i].second;
  return out;
}

std::vector<std::size_t> SpatialGrid::nearest(const Vec3& q, std::size_t k) const {
  if (k > points_.size())
    throw GeometryError("knn: k=" + std::to_string(k) + " exceeds support size " +
                        std::to_string(points_.size()));
  std::vector<std::pair<double, std::size_t>> best;
  if (k == 0) return {};
  const GridKey c = key_of(q);
  // Rings needed to cover the whole occupied grid from the query cell.
  const std::int64_t max_ring = std::max({std::abs(c.x - lo_.x), std::abs(c.x - hi_.x),
                                          std::abs(c.y - lo_.y), std::abs(c.y - hi_.y),
                                          std::abs(c.z - lo_.z), std::abs(c.z - hi_.z)});
  for (std::int64_t ring = 0; ring <= max_ring; ++ring) {
    visit_shell(c, ring, [&](const std::vector<std::size_t>& members) {
      for (auto i : members) best.emplace_back((points_[i] - q).squaredNorm(), i);
    });
    if (best.size() >= k) {
      std::nth_element(best.begin(), best.begin() + static_cast<std::ptrdiff_t>(k - 1), best.end());
      const double dk = best[k - 1].first;
      const double reach = static_cast<double>(ring) * cell_;
      // Anything in a farther shell is at least `reach` away; equality must
      // still be examined for the index tie rule.
      if (dk < reach * reach) break;
    }
  }
  std::sort(best.begin(), best.end());
  std::vector<std::size_t> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = best[i].second;
  return out;
}

NeighborTable radius_neighbors(std::span<const Vec3> query, std::span<const Vec3> support,
                               double radius, std::size_t max_neighbors) {
  if (!(radius > 0.0)) throw GeometryError("radius must be positive");
  if (max_neighbors == 0) throw GeometryError("max_neighbors must be at least 1");
  NeighborTable table;
  table.width = max_neighbors;
  table.shadow = support.size();
  table.indices.assign(query.size() * max_neighbors, support.size());
  if (support.empty()) return table;
  const SpatialGrid grid(support, radius);
  for (std::size_t q = 0; q < query.size(); ++q) {
    const auto hits = grid.within(query[q], radius);
    const std::size_t n = std::min(hits.size(), max_neighbors);
    std::copy_n(hits.begin(), n, table.indices.begin() + static_cast<std::ptrdiff_t>(q * max_neighbors));
  }
  return table;
}

double suggest_cell_size(std::span<const Vec3> points) {
  if (points.empty()) return 1.0;
  Vec3 lo = points[0], hi = points[0];
  for (const auto& p : points) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  const double extent = std::max((hi - lo).maxCoeff(), 1e-9);
  const double per_axis = std::sqrt(static_cast<double>(points.size()));
  return std::max(extent / std::max(per_axis, 1.0), 1e-9);
}

std::vector<std::size_t> knn(std::span<const Vec3> query, std::span<const Vec3> support,
                             std::size_t k) {
  if (k > support.size())
    throw GeometryError("knn: k=" + std::to_string(k) + " exceeds support size " +
                        std::to_string(support.size()));
  std::vector<std::size_t> out;
  out.reserve(query.size() * k);
  if (k == 0) return out;
  const SpatialGrid grid(support, suggest_cell_size(support));
  for (const auto& q : query) {
    const auto nn = grid.nearest(q, k);
    out.insert(out.end(), nn.begin(), nn.end());
  }
  return out;
}

}  // namespace end2reg

#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <vector>

namespace end2reg {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Rng = std::mt19937_64;

class GeometryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PointCloud {
  std::vector<Vec3> positions;
  std::optional<std::vector<Vec3>> colors;  // RGB in [0,1]
  std::optional<std::vector<int>> labels;   // {0,1}

  std::size_t size() const { return positions.size(); }
  bool has_colors() const { return colors.has_value(); }
  bool has_labels() const { return labels.has_value(); }

  // Throws GeometryError if N == 0, a coordinate is non-finite, or a channel
  // has the wrong length.
  void validate() const;

  PointCloud subset(std::span<const std::size_t> indices) const;
};

struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static RigidTransform identity() { return {}; }
  static RigidTransform from_axis_angle(const Vec3& axis, double angle_rad, const Vec3& t);

  Vec3 operator()(const Vec3& p) const { return rotation * p + translation; }

  // True when R^T R = I and det R = +1 within tol.
  bool is_valid(double tol = 1e-9) const;
  Eigen::Matrix4d matrix() const;
};

// Applies b first, then a.
RigidTransform compose(const RigidTransform& a, const RigidTransform& b);
RigidTransform invert(const RigidTransform& t);
PointCloud apply(const RigidTransform& t, const PointCloud& cloud);

// Geodesic angle of R_a^T R_b, in radians.
double rotation_angle_between(const Mat3& a, const Mat3& b);
double rotation_angle(const Mat3& r);

struct Normalization {
  Vec3 center = Vec3::Zero();
  double scale = 1.0;

  Vec3 forward(const Vec3& p) const { return (p - center) / scale; }
  Vec3 inverse(const Vec3& p) const { return p * scale + center; }
};

// Centroid-centered, scaled so that the farthest point has norm 1.
std::pair<PointCloud, Normalization> normalize_unit_sphere(const PointCloud& cloud);
PointCloud apply_normalization(const Normalization& n, const PointCloud& cloud);
PointCloud denormalize(const Normalization& n, const PointCloud& cloud);

// Axis uniform on the sphere, angle uniform in [0, max_rotation_deg],
// translation uniform in the ball of radius max_translation.
RigidTransform random_rigid(double max_translation, double max_rotation_deg, Rng& rng);

struct Subsampled {
  PointCloud cloud;
  std::vector<std::size_t> provenance;  // input index -> output index
};

// One centroid per occupied voxel floor(p / voxel_size). Voxels are emitted in
// order of first occurrence; colors are averaged, labels by majority (ties -> 1).
Subsampled voxel_grid_subsample(const PointCloud& cloud, double voxel_size);

struct NeighborTable {
  std::size_t width = 0;                // max neighbors per query
  std::size_t shadow = 0;               // padding index (= support size)
  std::vector<std::size_t> indices;     // rows of `width`, nearest first

  std::size_t rows() const { return width ? indices.size() / width : 0; }
  std::span<const std::size_t> row(std::size_t q) const {
    return {indices.data() + q * width, width};
  }
};

struct GridKey {
  std::int64_t x, y, z;
  bool operator==(const GridKey&) const = default;
};

struct GridKeyHash {
  std::size_t operator()(const GridKey& k) const noexcept;
};

// Uniform hash grid over a fixed point set.
class SpatialGrid {
 public:
  SpatialGrid(std::span<const Vec3> points, double cell_size);

  double cell_size() const { return cell_; }
  std::size_t size() const { return points_.size(); }

  // Indices with |p - q| <= radius, sorted by (distance, index).
  std::vector<std::size_t> within(const Vec3& q, double radius) const;

  // k nearest by (distance, index). Requires k <= size().
  std::vector<std::size_t> nearest(const Vec3& q, std::size_t k) const;

 private:
  GridKey key_of(const Vec3& p) const;
  template <class Fn>
  void visit_shell(const GridKey& center, std::int64_t ring, Fn&& fn) const;

  std::vector<Vec3> points_;
  double cell_;
  std::unordered_map<GridKey, std::vector<std::size_t>, GridKeyHash> cells_;
  GridKey lo_{0, 0, 0}, hi_{0, 0, 0};
};

// Support points within radius of each query, nearest first, truncated to
// max_neighbors and padded with the shadow index support.size().
NeighborTable radius_neighbors(std::span<const Vec3> query, std::span<const Vec3> support,
                               double radius, std::size_t max_neighbors);

// Exact k nearest support indices per query, row-major Nq x k.
std::vector<std::size_t> knn(std::span<const Vec3> query, std::span<const Vec3> support,
                             std::size_t k);

// Heuristic cell size for k-NN grids: about one support point per occupied cell
// layer on surface-like data.
double suggest_cell_size(std::span<const Vec3> points);

}  // namespace end2reg

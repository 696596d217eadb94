#pragma once

// Kernel point convolution and multi-resolution point pyramids.

#include "end2reg/geometry.hpp"
#include "end2reg/tensor.hpp"

#include <cstdint>
#include <vector>

namespace end2reg {

struct KernelDisposition {
  std::vector<Vec3> points;  // inside the unit ball, points[0] at the origin
  std::size_t size() const { return points.size(); }
};

// One point pinned at the origin, the other K-1 spread by seeded repulsion
// (1000 projected descent steps on sum 1/d_ij). Results are cached per (K, seed).
const KernelDisposition& kernel_disposition(std::size_t k, std::uint64_t seed = 42);

// Neighborhoods for one convolution layer. Kernel influences are recomputed
// from the stored points on each use; a dense table costs ~30 MB per level.
struct ConvGeometry {
  NeighborTable neighbors;
  std::vector<Vec3> query, support;
  const KernelDisposition* kernel = nullptr;
  std::size_t kernel_size = 0;
  double radius = 0.0;

  std::size_t queries() const { return neighbors.rows(); }
};

// Dense Nq x width x K influence table (zero for shadow neighbors).
std::vector<double> dense_influence(const ConvGeometry& g);

// Neighbor selection when more than max_neighbors fall inside the radius.
enum class NeighborSelection {
  nearest,  // the max_neighbors closest
  strided,  // evenly spaced picks from the distance-sorted list, always keeping the closest
};

// Influence of support point s on kernel point k for query q:
// max(0, 1 - |(s - q) - radius * p_k| / sigma) with sigma = radius / 1.5.
ConvGeometry conv_geometry(std::span<const Vec3> query, std::span<const Vec3> support,
                           double radius, std::size_t max_neighbors,
                           const KernelDisposition& kernel,
                           NeighborSelection selection = NeighborSelection::strided);

// out = sum_h sum_k influence[q,h,k] * feats[nbr[q,h]] * W_k, with weights K x Cin x Cout.
Tensor kpconv(const Tensor& feats, const ConvGeometry& geometry, const Tensor& weights);

// Convenience form that builds the geometry from an existing neighbor table.
Tensor kpconv(std::span<const Vec3> query, std::span<const Vec3> support, const Tensor& feats,
              const NeighborTable& neighbors, const KernelDisposition& kernel, double radius,
              const Tensor& weights);

struct PyramidLevel {
  std::vector<Vec3> points;
  std::vector<Vec3> colors;  // averaged, empty when the input has none
  double voxel = 0.0;
  double radius = 0.0;
  ConvGeometry conv;     // queries and support at this level
  // Queries here, support at the previous level (the input for level 0), using
  // the previous level's radius (this level's radius for level 0).
  ConvGeometry strided;
  std::vector<std::size_t> pool;      // previous-level index -> index here
  std::vector<std::size_t> upsample;  // previous-level index -> nearest point here
};

struct PyramidConfig {
  std::size_t stages = 5;
  double initial_voxel = 0.04;
  double radius_mult = 2.5;
  std::size_t kernel_size = 15;
  std::size_t max_neighbors = 24;
  std::uint64_t kernel_seed = 42;
};

struct PointPyramid {
  std::vector<Vec3> input;
  std::vector<PyramidLevel> levels;

  std::size_t stages() const { return levels.size(); }
};

// Level l uses voxel initial_voxel * 2^l and radius radius_mult * voxel(l).
// Level 0 is the voxel subsampling of the input. Throws GeometryError when any
// level has fewer than 4 points.
PointPyramid build_pyramid(const PointCloud& cloud, const PyramidConfig& config);

}  // namespace end2reg

#pragma once

// Classical registration baselines: trimmed point-to-point ICP and
// descriptor-based RANSAC followed by ICP.

#include "end2reg/geometry.hpp"

#include <vector>

namespace end2reg {

struct ICPConfig {
  std::size_t max_iter = 100;
  double tol = 1e-6;
  double trim_fraction = 0.1;
};

struct ICPReport {
  RigidTransform transform;  // maps source onto target
  std::size_t iterations_used = 0;
  double final_rms = 0.0;
  bool converged = false;
  std::vector<double> rms_history;  // trimmed RMS at each correspondence step
};

ICPReport icp(const PointCloud& source, const PointCloud& target,
              const RigidTransform& init = RigidTransform::identity(), const ICPConfig& config = {});

struct RansacConfig {
  std::size_t n_iter = 5000;
  double inlier_radius = 0.05;
  double voxel = 0.03;           // descriptor computation runs on this subsampling
  double normal_radius = 0.08;
  double feature_radius = 0.2;
  // Score hypotheses by the share of subsampled source points that land within
  // inlier_radius of the target, instead of by agreeing descriptor matches.
  bool overlap_scoring = true;
  // Refine with trim = 1 - estimated overlap (never below refine.trim_fraction).
  bool overlap_trim = true;
  double max_trim = 0.8;
  ICPConfig refine{};
};

// Per-point normals (PCA of the radius neighborhood, sign-free) and the
// 4x4x2 joint histogram of |n_p.n_q|, |n_p.d| and |d| / radius, L1-normalized.
std::vector<double> pair_histogram_descriptors(std::span<const Vec3> points, double normal_radius,
                                               double feature_radius);
inline constexpr std::size_t kDescriptorBins = 32;

struct RansacReport {
  ICPReport icp;
  RigidTransform hypothesis;  // best RANSAC transform before ICP
  std::size_t correspondences = 0;
  std::size_t inliers = 0;
  double overlap = 0.0;  // share of subsampled source points within inlier_radius under the hypothesis
};

// Throws GeometryError when either cloud has fewer than 10 points or no mutual
// descriptor matches exist.
RansacReport ransac_icp(const PointCloud& source, const PointCloud& target, Rng& rng,
                        const RansacConfig& config = {});

}  // namespace end2reg

#pragma once

// Synthetic lumbar-spine phantoms: a preoperative bone model and an
// intraoperative scan with partial exposure, soft-tissue clutter, noise and
// occlusions, related by a known rigid pose.

#include "end2reg/geometry.hpp"

#include <cstdint>
#include <vector>

namespace end2reg {

struct PhantomConfig {
  std::size_t n_vertebrae = 5;
  std::size_t points_pre = 8192;
  std::size_t points_intra = 4096;   // upper bound on the intraoperative cloud size
  double exposure_fraction = 0.8;    // share of visible bone kept
  double clutter_fraction = 0.5;     // share of the intraoperative cloud that is tissue
  double noise_sigma = 0.0005;       // meters
  std::size_t occlusion_patches = 2;
  double occlusion_radius = 0.008;   // meters
  double tissue_clearance = 0.005;   // meters between tissue and any bone
  double max_translation = 0.1;      // unit-sphere units
  double max_rotation_deg = 45.0;
  std::size_t max_retries = 8;
  std::uint64_t seed = 0;

  // Throws std::invalid_argument when a fraction leaves [0,1] or a count is below 100.
  void validate() const;
};

struct RegistrationSample {
  PointCloud preoperative;   // bone only, unit-sphere units, preoperative frame
  PointCloud intraoperative; // exposed bone + tissue with colors, intraoperative frame
  RigidTransform t_gt;       // preoperative -> intraoperative
  std::vector<Vec3> landmarks;  // preoperative frame, 3 per vertebra
  std::vector<int> gt_mask;     // 1 on intraoperative bone points
  Normalization normalization;  // meters <-> unit-sphere units
  std::uint64_t seed = 0;
  std::size_t attempt = 0;         // sub-seed index that produced the sample
  double occluded_fraction = 0.0;  // exposed bone removed by occlusion patches

  // Millimeters expressed in unit-sphere units.
  double mm(double millimeters) const { return millimeters * 1e-3 / normalization.scale; }
};

// Throws GeometryError when no attempt within max_retries satisfies the overlap
// guarantee and the occlusion budget.
RegistrationSample generate_phantom(const PhantomConfig& config);

// Fraction of T_gt-mapped preoperative points within radius of an
// intraoperative bone point.
double overlap_fraction(const RegistrationSample& sample, double radius = 0.05);

// 1 where the intraoperative point lies within threshold of the transformed
// preoperative bone.
std::vector<int> weak_labels(const PointCloud& intra, const PointCloud& pre_bone,
                             const RigidTransform& t_approx, double threshold);

// Scale used when external data carries no normalization metadata: a 0.4 m
// anatomy extent mapped to the unit sphere radius.
inline constexpr double kAssumedMetersPerUnit = 0.2;

}  // namespace end2reg

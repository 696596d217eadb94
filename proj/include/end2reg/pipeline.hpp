#pragma once

// Runs a registration method on a sample and scores it against ground truth.

#include "end2reg/baselines.hpp"
#include "end2reg/evaluation.hpp"
#include "end2reg/model.hpp"

#include <string>

namespace end2reg {

enum class Method { end2reg, end2reg_unmasked, icp, ransac_icp };

std::string to_string(Method m);
Method parse_method(const std::string& s);

struct MethodOutput {
  RigidTransform transform;    // pre -> intra
  std::vector<int> mask;       // predicted intraoperative mask, empty for baselines
  bool failed = false;
  std::string diagnostic;
  double seconds = 0.0;
};

// model is required for the end2reg methods. Baselines register the full
// intraoperative cloud (bone and tissue) starting from the identity.
MethodOutput run_method(Method method, const End2RegModel* model, const PointCloud& pre,
                        const PointCloud& intra, std::uint64_t seed);

// Per-landmark TRE and RMSE over the preoperative points, in unit-sphere units
// and millimeters through the sample's normalization scale.
EvalRecord score(const std::string& sample_id, const std::string& method, const RegistrationSample& sample,
                 const RigidTransform& predicted, double seconds = 0.0, bool failed = false);

// Intersection over union of the label-1 sets.
double mask_iou(const std::vector<int>& predicted, const std::vector<int>& truth);

}  // namespace end2reg

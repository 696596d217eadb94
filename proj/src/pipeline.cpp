#include "end2reg/pipeline.hpp"

#include <chrono>

namespace end2reg {

std::string to_string(Method m) {
  switch (m) {
    case Method::end2reg:
      return "end2reg";
    case Method::end2reg_unmasked:
      return "end2reg_unmasked";
    case Method::icp:
      return "icp";
    case Method::ransac_icp:
      return "ransac_icp";
  }
  return "?";
}

Method parse_method(const std::string& s) {
  for (Method m : {Method::end2reg, Method::end2reg_unmasked, Method::icp, Method::ransac_icp})
    if (to_string(m) == s) return m;
  throw std::invalid_argument("unknown method '" + s + "'");
}

MethodOutput run_method(Method method, const End2RegModel* model, const PointCloud& pre, const PointCloud& intra,
                        std::uint64_t seed) {
  MethodOutput out;
  const auto start = std::chrono::steady_clock::now();
  switch (method) {
    case Method::end2reg:
    case Method::end2reg_unmasked: {
      if (!model) throw std::invalid_argument("run_method: the learned methods need a model");
      const auto p = prepare_preoperative(pre, model->config());
      const auto i = prepare_intraoperative(intra, model->config());
      auto r = model->register_clouds(p, i, method == Method::end2reg);
      out.transform = r.transform;
      out.mask = std::move(r.mask);
      out.failed = r.failed;
      out.diagnostic = r.diagnostic;
      break;
    }
    case Method::icp: {
      const auto r = icp(pre, intra);
      out.transform = r.transform;
      break;
    }
    case Method::ransac_icp: {
      Rng rng(seed);
      const auto r = ransac_icp(pre, intra, rng);
      out.transform = r.icp.transform;
      break;
    }
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

EvalRecord score(const std::string& sample_id, const std::string& method, const RegistrationSample& sample,
                 const RigidTransform& predicted, double seconds, bool failed) {
  EvalRecord r;
  r.sample = sample_id;
  r.method = method;
  r.tre = tre(sample.landmarks, predicted, sample.t_gt);
  const double to_mm = sample.normalization.scale * 1000.0;
  for (double e : r.tre) r.tre_mm.push_back(e * to_mm);
  r.rmse = rmse(sample.preoperative.positions, predicted, sample.t_gt);
  r.rmse_mm = r.rmse * to_mm;
  r.rotation_deg = rotation_error_deg(predicted, sample.t_gt);
  r.translation = (predicted.translation - sample.t_gt.translation).norm();
  r.seconds = seconds;
  r.failed = failed;
  return r;
}

double mask_iou(const std::vector<int>& predicted, const std::vector<int>& truth) {
  if (predicted.size() != truth.size()) throw std::invalid_argument("mask_iou: length mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    inter += predicted[i] && truth[i];
    uni += predicted[i] || truth[i];
  }
  return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 1.0;
}

}  // namespace end2reg

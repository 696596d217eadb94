#include "end2reg/model.hpp"

#include <algorithm>
#include <numeric>

namespace end2reg {

using nlohmann::json;
using namespace ops;

json to_json(const ModelConfig& c) {
  return {{"seg", to_json(c.seg)},
          {"reg", to_json(c.reg)},
          {"coarse", {{"k_corr", c.coarse.k_corr}, {"temperature", c.coarse.temperature},
                      {"geometric_weight", c.coarse.geometric_weight}}},
          {"coarse_loss", {{"positive_margin", c.coarse_loss.positive_margin},
                           {"negative_margin", c.coarse_loss.negative_margin},
                           {"positive_threshold", c.coarse_loss.positive_threshold}}},
          {"patch_size", c.patch_size},
          {"sinkhorn_iters", c.sinkhorn_iters},
          {"slack_init", c.slack_init},
          {"hist_bins", c.hist_bins},
          {"hist_radius", c.hist_radius},
          {"overlap_radius", c.overlap_radius},
          {"fine_radius_mult", c.fine_radius_mult},
          {"inlier_radius_mult", c.inlier_radius_mult},
          {"refine_iters", c.refine_iters},
          {"fine_train_pairs", c.fine_train_pairs}};
}

void from_json(const json& j, ModelConfig& c) {
  from_json(j.at("seg"), c.seg);
  from_json(j.at("reg"), c.reg);
  const auto& m = j.at("coarse");
  m.at("k_corr").get_to(c.coarse.k_corr);
  m.at("temperature").get_to(c.coarse.temperature);
  m.at("geometric_weight").get_to(c.coarse.geometric_weight);
  const auto& l = j.at("coarse_loss");
  l.at("positive_margin").get_to(c.coarse_loss.positive_margin);
  l.at("negative_margin").get_to(c.coarse_loss.negative_margin);
  l.at("positive_threshold").get_to(c.coarse_loss.positive_threshold);
  j.at("patch_size").get_to(c.patch_size);
  j.at("sinkhorn_iters").get_to(c.sinkhorn_iters);
  j.at("slack_init").get_to(c.slack_init);
  j.at("hist_bins").get_to(c.hist_bins);
  j.at("hist_radius").get_to(c.hist_radius);
  j.at("overlap_radius").get_to(c.overlap_radius);
  j.at("fine_radius_mult").get_to(c.fine_radius_mult);
  j.at("inlier_radius_mult").get_to(c.inlier_radius_mult);
  j.at("refine_iters").get_to(c.refine_iters);
  j.at("fine_train_pairs").get_to(c.fine_train_pairs);
}

PreparedCloud prepare_preoperative(const PointCloud& pre, const ModelConfig& config) {
  PreparedCloud p;
  p.cloud = pre;
  p.reg = build_pyramid(pre, config.reg.pyramid);
  p.superpoints = superpoint_patches(p.reg, config.patch_size);
  return p;
}

PreparedCloud prepare_intraoperative(const PointCloud& intra, const ModelConfig& config) {
  if (!intra.colors) throw std::invalid_argument("intraoperative cloud needs colors");
  PreparedCloud p = prepare_preoperative(intra, config);
  p.seg = build_pyramid(intra, config.seg.pyramid);
  return p;
}

Supervision make_supervision(const PreparedCloud& pre, const PreparedCloud& intra,
                             const RigidTransform& t_gt, const ModelConfig& config) {
  Supervision s;
  s.t_gt = t_gt;
  s.overlap = superpoint_overlap_labels(pre.superpoints, intra.superpoints, t_gt, config.overlap_radius);
  // strongest overlaps first, row-major among equals
  std::vector<std::size_t> order;
  for (std::size_t k = 0; k < s.overlap.values.size(); ++k)
    if (s.overlap.values[k] > config.coarse_loss.positive_threshold) order.push_back(k);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return s.overlap.values[a] > s.overlap.values[b]; });
  if (order.size() > config.fine_train_pairs) order.resize(config.fine_train_pairs);
  const double radius = config.fine_radius_mult * config.reg.pyramid.initial_voxel;
  for (auto k : order) {
    const std::size_t a = k / s.overlap.cols, b = k % s.overlap.cols;
    std::vector<Vec3> pa, pb;
    for (auto i : pre.superpoints.patches[a]) pa.push_back(pre.superpoints.points[i]);
    for (auto i : intra.superpoints.patches[b]) pb.push_back(intra.superpoints.points[i]);
    s.fine_pairs.emplace_back(a, b);
    s.fine_truth.push_back(fine_ground_truth(pa, pb, t_gt, radius));
  }
  return s;
}

End2RegModel::End2RegModel(ModelConfig config)
    : config_(std::move(config)), seg_(config_.seg), reg_(config_.reg) {
  matcher_.add_constant("slack", {1, 1}, config_.slack_init);
}

std::vector<Tensor> End2RegModel::parameters(bool include_seg) const {
  std::vector<Tensor> out;
  if (include_seg)
    for (const auto& t : seg_.params().tensors()) out.push_back(t);
  for (const auto& t : reg_.params().tensors()) out.push_back(t);
  for (const auto& t : matcher_.tensors()) out.push_back(t);
  return out;
}

std::vector<NamedArray> End2RegModel::to_arrays() const {
  auto out = seg_.params().to_arrays("seg.");
  for (auto& a : reg_.params().to_arrays("reg.")) out.push_back(std::move(a));
  for (auto& a : matcher_.to_arrays("matcher.")) out.push_back(std::move(a));
  return out;
}

void End2RegModel::load_arrays(const std::vector<NamedArray>& arrays) {
  seg_.params().load_arrays(arrays, "seg.");
  reg_.params().load_arrays(arrays, "reg.");
  matcher_.load_arrays(arrays, "matcher.");
}

Tensor End2RegModel::seg_logits(const PreparedCloud& intra) const {
  if (!intra.seg) throw std::invalid_argument("seg_logits: cloud was not prepared as intraoperative");
  return seg_.forward(intra.cloud, *intra.seg);
}

BackboneOutput End2RegModel::embed(const PreparedCloud& c, const Tensor& point_features) const {
  auto out = reg_.forward(c.reg, point_features);
  out.superpoints = l2_normalize_rows(out.superpoints);
  return out;
}

namespace {

std::vector<double> level0_weights(const PointPyramid& pyr, const std::vector<int>& mask) {
  const auto& pool = pyr.levels[0].pool;
  std::vector<double> w(pyr.levels[0].points.size(), 0.0), n(w.size(), 0.0);
  for (std::size_t i = 0; i < pool.size(); ++i) {
    w[pool[i]] += mask.empty() ? 1.0 : mask[i];
    n[pool[i]] += 1.0;
  }
  for (std::size_t i = 0; i < w.size(); ++i) w[i] /= n[i];
  return w;
}

}  // namespace

LossOutput End2RegModel::loss(const PreparedCloud& pre, const PreparedCloud& intra, const Supervision& sup,
                              MaskMode mode, double tau, std::mt19937_64* rng) const {
  LossOutput out;
  const std::size_t n = intra.cloud.size();
  Tensor mask;
  if (mode == MaskMode::ones) {
    mask = Tensor::full({n, 1}, 1.0);
    out.mask.assign(n, 1);
  } else {
    out.seg_logits = seg_logits(intra);
    MaskSample s;
    if (mode == MaskMode::gumbel) {
      if (!rng) throw std::invalid_argument("loss: gumbel mask needs an rng");
      s = straight_through_mask(out.seg_logits, tau, *rng);
    } else {
      s = straight_through_mask(out.seg_logits, Tensor::zeros({n, 2}), tau);
    }
    mask = mode == MaskMode::frozen ? stop_gradient(s.mask) : s.mask;
    out.mask = s.hard;
  }
  const auto fp = embed(pre, Tensor::full({pre.cloud.size(), 1}, 1.0));
  const auto fi = embed(intra, mask);
  Tensor coarse = coarse_loss(fp.superpoints, fi.superpoints, sup.overlap, config_.coarse_loss);

  std::vector<Tensor> assignments;
  std::vector<std::vector<IndexPair>> truth;
  const Tensor& slack = matcher_.get("slack");
  for (std::size_t k = 0; k < sup.fine_pairs.size(); ++k) {
    const auto [a, b] = sup.fine_pairs[k];
    const auto& pa = pre.superpoints.patches[a];
    const auto& pb = intra.superpoints.patches[b];
    assignments.push_back(slack_log_assignment(gather_rows(fp.dense, pa), gather_rows(fi.dense, pb), slack,
                                               config_.sinkhorn_iters));
    truth.push_back(sup.fine_truth[k]);
  }
  Tensor fine;
  try {
    fine = fine_loss(assignments, truth);
  } catch (const std::domain_error&) {
    fine = Tensor::scalar(0.0);
  }
  out.loss = dual_loss(coarse, fine);
  return out;
}

RegistrationResult End2RegModel::register_clouds(const PreparedCloud& pre, const PreparedCloud& intra,
                                                 bool use_mask) const {
  RegistrationResult r;
  const std::size_t n = intra.cloud.size();
  if (use_mask) {
    const Tensor z = seg_logits(intra);
    r.mask = straight_through_mask(z, Tensor::zeros({n, 2}), 1.0).hard;
  } else {
    r.mask.assign(n, 1);
  }
  std::vector<double> mask_values(r.mask.begin(), r.mask.end());
  const auto fp = embed(pre, Tensor::full({pre.cloud.size(), 1}, 1.0));
  const auto fi = embed(intra, Tensor::from({n, 1}, mask_values));

  const auto& pp = pre.reg;
  const auto& ip = intra.reg;
  const auto hp = radial_histograms(pre.superpoints.centers, pp.levels[0].points, level0_weights(pp, {}),
                                    config_.hist_radius, config_.hist_bins);
  const auto hi = radial_histograms(intra.superpoints.centers, ip.levels[0].points,
                                    level0_weights(ip, r.mask), config_.hist_radius, config_.hist_bins);
  const auto coarse = coarse_match(fp.superpoints, fi.superpoints, config_.coarse, hp, hi, config_.hist_bins);
  r.coarse_pairs = coarse.pairs.size();
  const auto fine = fine_match(fp.dense, fi.dense, pre.superpoints, intra.superpoints, coarse.pairs,
                               matcher_.get("slack"), config_.sinkhorn_iters);
  r.fine_matches = fine.matches.size();
  r.coarse = coarse.pairs;
  r.correspondences = fine.matches;
  const auto& pre_pts = pre.superpoints.points;
  const auto& intra_pts = intra.superpoints.points;
  try {
    const auto t0 = weighted_procrustes(fine.matches, pre_pts, intra_pts);
    const auto refined = refine_transform(t0, fine.matches, pre_pts, intra_pts,
                                          config_.inlier_radius_mult * config_.reg.pyramid.initial_voxel,
                                          config_.refine_iters);
    r.transform = refined.transform;
    r.inliers = refined.inliers;
    if (refined.degenerate) r.diagnostic = "refinement pruned every match; using the unrefined fit";
  } catch (const GeometryError& e) {
    r.failed = true;
    r.diagnostic = e.what();
  }
  return r;
}

}  // namespace end2reg

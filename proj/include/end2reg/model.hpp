#pragma once

// The full pipeline: segmentation -> straight-through mask -> shared backbone
// on both clouds -> coarse/fine matching, with the dual loss for training and
// Procrustes + refinement for inference.

#include "end2reg/matcher.hpp"
#include "end2reg/networks.hpp"
#include "end2reg/phantom.hpp"
#include "end2reg/stgs.hpp"

#include <json.hpp>

#include <optional>
#include <random>

namespace end2reg {

struct ModelConfig {
  SegNetConfig seg;
  RegBackboneConfig reg;
  CoarseMatchConfig coarse;
  CoarseLossConfig coarse_loss;
  std::size_t patch_size = 32;
  std::size_t sinkhorn_iters = 5;
  double slack_init = 1.0;
  std::size_t hist_bins = 8;
  double hist_radius = 0.2;        // unit-sphere units
  double overlap_radius = 0.05;    // for superpoint overlap labels
  double fine_radius_mult = 1.0;   // fine gt radius, in initial voxels of the backbone
  double inlier_radius_mult = 2.5; // refinement inlier radius, in initial voxels
  std::size_t refine_iters = 5;
  std::size_t fine_train_pairs = 48;  // gt-positive superpoint pairs used by the fine loss
};

nlohmann::json to_json(const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Geometry that depends only on one cloud; reusable across iterations.
struct PreparedCloud {
  PointCloud cloud;
  PointPyramid reg;
  Superpoints superpoints;
  std::optional<PointPyramid> seg;  // intraoperative only
};

PreparedCloud prepare_preoperative(const PointCloud& pre, const ModelConfig& config);
PreparedCloud prepare_intraoperative(const PointCloud& intra, const ModelConfig& config);

// Supervision for one (pre, intra, T_gt) triple.
struct Supervision {
  RigidTransform t_gt;
  OverlapMatrix overlap;
  std::vector<IndexPair> fine_pairs;                 // gt-positive superpoint pairs
  std::vector<std::vector<IndexPair>> fine_truth;    // per fine pair
};

Supervision make_supervision(const PreparedCloud& pre, const PreparedCloud& intra,
                             const RigidTransform& t_gt, const ModelConfig& config);

enum class MaskMode {
  gumbel,  // straight-through Gumbel-Softmax sample, gradient into the segmenter
  argmax,  // deterministic hard mask, gradient into the segmenter via the relaxation
  frozen,  // hard argmax mask with no gradient path
  ones,    // every point kept (no segmentation)
};

struct LossOutput {
  DualLoss loss;
  Tensor seg_logits;         // N x 2 over the intraoperative input
  std::vector<int> mask;     // hard mask actually used
};

struct RegistrationResult {
  RigidTransform transform;   // pre -> intra
  std::vector<int> mask;
  std::size_t coarse_pairs = 0;
  std::size_t fine_matches = 0;
  std::size_t inliers = 0;
  std::vector<IndexPair> coarse;  // superpoint pairs
  MatchSet correspondences;       // into the level-0 points of each cloud
  bool failed = false;        // too few matches; transform is identity
  std::string diagnostic;
};

class End2RegModel {
 public:
  explicit End2RegModel(ModelConfig config = {});

  const ModelConfig& config() const { return config_; }
  SegNet& seg() { return seg_; }
  RegBackbone& backbone() { return reg_; }
  ParamSet& matcher_params() { return matcher_; }
  const SegNet& seg() const { return seg_; }
  const RegBackbone& backbone() const { return reg_; }
  const ParamSet& matcher_params() const { return matcher_; }

  // Every trainable tensor of the three parameter groups, in a fixed order.
  std::vector<Tensor> parameters(bool include_seg = true) const;
  // Flattened named arrays with "seg.", "reg." and "matcher." prefixes.
  std::vector<NamedArray> to_arrays() const;
  void load_arrays(const std::vector<NamedArray>& arrays);

  Tensor seg_logits(const PreparedCloud& intra) const;

  // Differentiable dual loss. rng is used only by MaskMode::gumbel.
  LossOutput loss(const PreparedCloud& pre, const PreparedCloud& intra, const Supervision& sup,
                  MaskMode mode, double tau, std::mt19937_64* rng) const;

  // Inference: argmax mask (or all ones), coarse/fine matching, Procrustes, refinement.
  RegistrationResult register_clouds(const PreparedCloud& pre, const PreparedCloud& intra,
                                     bool use_mask = true) const;

 private:
  BackboneOutput embed(const PreparedCloud& c, const Tensor& point_features) const;

  ModelConfig config_;
  SegNet seg_;
  RegBackbone reg_;
  ParamSet matcher_;
};

}  // namespace end2reg

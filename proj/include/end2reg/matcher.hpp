#pragma once

// Coarse superpoint matching, slack-normalized fine matching, weighted
// Procrustes, and the coarse/fine training losses.

#include "end2reg/geometry.hpp"
#include "end2reg/kpconv.hpp"
#include "end2reg/tensor.hpp"

#include <utility>
#include <vector>

namespace end2reg {

using IndexPair = std::pair<std::size_t, std::size_t>;

struct MatchSet {
  std::vector<IndexPair> pairs;  // (pre index, intra index)
  std::vector<double> weights;

  std::size_t size() const { return pairs.size(); }
  void add(std::size_t pre, std::size_t intra, double w) {
    pairs.emplace_back(pre, intra);
    weights.push_back(w);
  }
  // Throws GeometryError on out-of-range indices or negative/non-finite weights.
  void validate(std::size_t n_pre, std::size_t n_intra) const;
};

// Superpoints (the coarsest pyramid level) with their patches of level-0 points.
struct Superpoints {
  std::vector<Vec3> centers;
  std::vector<Vec3> points;                       // level-0 points
  std::vector<std::vector<std::size_t>> patches;  // level-0 indices per superpoint, nearest first
};

// Each level-0 point belongs to the superpoint it pools into; patches keep the
// patch_size members closest to their center.
Superpoints superpoint_patches(const PointPyramid& pyr, std::size_t patch_size);

struct OverlapMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> values;

  double at(std::size_t a, std::size_t b) const { return values[a * cols + b]; }
  std::size_t positives(double threshold = 0.1) const;
};

// Entry (a,b): fraction of pre patch a's points that, after T_gt, lie within
// patch_radius of some point of intra patch b.
OverlapMatrix superpoint_overlap_labels(const Superpoints& pre, const Superpoints& intra,
                                        const RigidTransform& t_gt, double patch_radius);

// Rotation-invariant radial histogram per center: weighted counts of points at
// distance d <= radius in `bins` equal bins, L2-normalized (zero rows stay zero).
std::vector<double> radial_histograms(std::span<const Vec3> centers, std::span<const Vec3> points,
                                      std::span<const double> weights, double radius,
                                      std::size_t bins);

struct CoarseMatchConfig {
  std::size_t k_corr = 48;
  double temperature = 0.1;
  double geometric_weight = 0.2;
};

struct CoarseMatches {
  std::vector<IndexPair> pairs;
  std::vector<double> scores;
};

// Similarity = F_pre F_intra^T + geometric_weight * H_pre H_intra^T (H optional,
// row-major M x bins), dual softmax at `temperature`, top k_corr by score with
// ties in row-major index order. Features are expected to be L2-normalized.
CoarseMatches coarse_match(const Tensor& pre_feats, const Tensor& intra_feats,
                           const CoarseMatchConfig& config,
                           std::span<const double> pre_hist = {},
                           std::span<const double> intra_hist = {}, std::size_t bins = 0);

// (n+1) x (m+1) log-assignment for one patch pair: scores F_a F_b^T / sqrt(C)
// bordered by a slack score, then `iterations` alternating row/column
// log-normalizations (real marginals 1, slack row m, slack column n), ending
// on columns.
Tensor slack_log_assignment(const Tensor& pre_patch_feats, const Tensor& intra_patch_feats,
                            const Tensor& slack_score, std::size_t iterations = 5);

struct FineMatchResult {
  MatchSet matches;                  // indices into the level-0 clouds
  std::vector<Tensor> assignments;   // one per processed coarse pair
  std::vector<IndexPair> processed;  // the coarse pairs that had non-empty patches
};

// Mutual top-1 non-slack entries of each patch assignment, weight exp(logP).
FineMatchResult fine_match(const Tensor& dense_pre, const Tensor& dense_intra,
                           const Superpoints& pre, const Superpoints& intra,
                           const std::vector<IndexPair>& coarse_pairs, const Tensor& slack_score,
                           std::size_t iterations = 5);

// Closed-form minimizer of sum w_i |R p_i + t - q_i|^2 with det R = +1.
// Throws GeometryError on fewer than 3 matches, non-positive total weight, or
// collinear support.
RigidTransform weighted_procrustes(const MatchSet& matches, std::span<const Vec3> pre,
                                   std::span<const Vec3> intra);

struct RefineResult {
  RigidTransform transform;
  std::size_t inliers = 0;
  bool degenerate = false;  // everything was pruned; transform is the initial guess
};

// Re-solves Procrustes on the matches with residual <= inlier_radius, keeping
// the iterate with most inliers (later iterates win ties).
RefineResult refine_transform(const RigidTransform& t0, const MatchSet& matches,
                              std::span<const Vec3> pre, std::span<const Vec3> intra,
                              double inlier_radius, std::size_t iterations = 5);

struct CoarseLossConfig {
  double positive_margin = 0.1;
  double negative_margin = 1.4;
  double positive_threshold = 0.1;
};

// Overlap-weighted squared hinge on feature distances: positives (overlap >
// threshold) pay o * relu(d - pos_margin)^2, negatives (overlap == 0) pay
// relu(neg_margin - d)^2; each group averaged over its own weight. Throws
// std::domain_error when there is no positive pair.
Tensor coarse_loss(const Tensor& pre_feats, const Tensor& intra_feats,
                   const OverlapMatrix& overlap, const CoarseLossConfig& config = {});

// Ground-truth entries of one patch assignment: each pre point to its nearest
// intra patch point within radius after T_gt, otherwise to slack (index m);
// intra points left unmatched go to the slack row (index n).
std::vector<IndexPair> fine_ground_truth(std::span<const Vec3> pre_points,
                                         std::span<const Vec3> intra_points,
                                         const RigidTransform& t_gt, double radius);

// Mean over patches of the mean negative log-likelihood of their ground-truth
// entries. Patches without any real (non-slack) entry are excluded. Throws
// std::domain_error if nothing remains.
Tensor fine_loss(const std::vector<Tensor>& log_assignments,
                 const std::vector<std::vector<IndexPair>>& ground_truth);

struct DualLoss {
  Tensor total, coarse, fine;
};

DualLoss dual_loss(const Tensor& coarse, const Tensor& fine);

}  // namespace end2reg

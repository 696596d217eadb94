#include "end2reg/matcher.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace end2reg {

void MatchSet::validate(std::size_t n_pre, std::size_t n_intra) const {
  if (weights.size() != pairs.size()) throw GeometryError("MatchSet: weights/pairs length mismatch");
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (pairs[i].first >= n_pre || pairs[i].second >= n_intra)
      throw GeometryError("MatchSet: match " + std::to_string(i) + " indexes outside its clouds");
    if (!std::isfinite(weights[i]) || weights[i] < 0.0)
      throw GeometryError("MatchSet: match " + std::to_string(i) + " has invalid weight");
  }
}

Superpoints superpoint_patches(const PointPyramid& pyr, std::size_t patch_size) {
  Superpoints sp;
  sp.centers = pyr.levels.back().points;
  sp.points = pyr.levels[0].points;
  sp.patches.resize(sp.centers.size());
  for (std::size_t i = 0; i < sp.points.size(); ++i) {
    std::size_t s = i;
    for (std::size_t l = 1; l < pyr.stages(); ++l) s = pyr.levels[l].pool[s];
    sp.patches[s].push_back(i);
  }
  for (std::size_t s = 0; s < sp.centers.size(); ++s) {
    auto& p = sp.patches[s];
    const Vec3 c = sp.centers[s];
    std::stable_sort(p.begin(), p.end(), [&](std::size_t a, std::size_t b) {
      return (sp.points[a] - c).squaredNorm() < (sp.points[b] - c).squaredNorm();
    });
    if (p.size() > patch_size) p.resize(patch_size);
  }
  return sp;
}

std::size_t OverlapMatrix::positives(double threshold) const {
  return static_cast<std::size_t>(
      std::count_if(values.begin(), values.end(), [&](double v) { return v > threshold; }));
}

OverlapMatrix superpoint_overlap_labels(const Superpoints& pre, const Superpoints& intra,
                                        const RigidTransform& t_gt, double patch_radius) {
  OverlapMatrix m;
  m.rows = pre.patches.size();
  m.cols = intra.patches.size();
  m.values.assign(m.rows * m.cols, 0.0);
  std::vector<Vec3> members;
  std::vector<std::size_t> member_owner;
  for (std::size_t b = 0; b < intra.patches.size(); ++b)
    for (auto i : intra.patches[b]) {
      members.push_back(intra.points[i]);
      member_owner.push_back(b);
    }
  if (members.empty()) return m;
  SpatialGrid grid(members, std::max(patch_radius, 1e-9));
  std::vector<char> hit(m.cols);
  for (std::size_t a = 0; a < pre.patches.size(); ++a) {
    const auto& patch = pre.patches[a];
    if (patch.empty()) continue;
    double* row = m.values.data() + a * m.cols;
    for (auto i : patch) {
      std::fill(hit.begin(), hit.end(), 0);
      for (auto j : grid.within(t_gt(pre.points[i]), patch_radius)) hit[member_owner[j]] = 1;
      for (std::size_t b = 0; b < m.cols; ++b) row[b] += hit[b];
    }
    for (std::size_t b = 0; b < m.cols; ++b) row[b] /= static_cast<double>(patch.size());
  }
  return m;
}

std::vector<double> radial_histograms(std::span<const Vec3> centers, std::span<const Vec3> points,
                                      std::span<const double> weights, double radius,
                                      std::size_t bins) {
  std::vector<double> out(centers.size() * bins, 0.0);
  SpatialGrid grid(points, radius);
  for (std::size_t c = 0; c < centers.size(); ++c) {
    double* h = out.data() + c * bins;
    for (auto j : grid.within(centers[c], radius)) {
      const double d = (points[j] - centers[c]).norm() / radius;
      const auto bin = std::min(bins - 1, static_cast<std::size_t>(d * static_cast<double>(bins)));
      h[bin] += weights.empty() ? 1.0 : weights[j];
    }
    double n = 0.0;
    for (std::size_t b = 0; b < bins; ++b) n += h[b] * h[b];
    if (n > 0.0)
      for (std::size_t b = 0; b < bins; ++b) h[b] /= std::sqrt(n);
  }
  return out;
}

CoarseMatches coarse_match(const Tensor& pre_feats, const Tensor& intra_feats,
                           const CoarseMatchConfig& config, std::span<const double> pre_hist,
                           std::span<const double> intra_hist, std::size_t bins) {
  const std::size_t mp = pre_feats.dim(0), mi = intra_feats.dim(0), c = pre_feats.dim(1);
  if (intra_feats.dim(1) != c) throw ShapeError("coarse_match: feature widths differ");
  const bool geometric = bins > 0 && !pre_hist.empty() && !intra_hist.empty();
  if (geometric && (pre_hist.size() != mp * bins || intra_hist.size() != mi * bins))
    throw ShapeError("coarse_match: histogram tables do not match superpoint counts");
  Eigen::MatrixXd s(mp, mi);
  auto pf = pre_feats.data(), ifv = intra_feats.data();
  for (std::size_t a = 0; a < mp; ++a)
    for (std::size_t b = 0; b < mi; ++b) {
      double v = 0.0;
      for (std::size_t k = 0; k < c; ++k) v += pf[a * c + k] * ifv[b * c + k];
      if (geometric) {
        double g = 0.0;
        for (std::size_t k = 0; k < bins; ++k) g += pre_hist[a * bins + k] * intra_hist[b * bins + k];
        v += config.geometric_weight * g;
      }
      s(a, b) = v / config.temperature;
    }
  // Dual softmax: row softmax times column softmax.
  Eigen::MatrixXd row = s, col = s;
  for (std::size_t a = 0; a < mp; ++a) {
    const double mx = row.row(a).maxCoeff();
    row.row(a) = (row.row(a).array() - mx).exp();
    row.row(a) /= row.row(a).sum();
  }
  for (std::size_t b = 0; b < mi; ++b) {
    const double mx = col.col(b).maxCoeff();
    col.col(b) = (col.col(b).array() - mx).exp();
    col.col(b) /= col.col(b).sum();
  }
  const Eigen::MatrixXd score = row.cwiseProduct(col);
  std::vector<std::size_t> order(mp * mi);
  std::iota(order.begin(), order.end(), 0);
  const std::size_t k = std::min(config.k_corr, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t x, std::size_t y) {
                      const double sx = score(x / mi, x % mi), sy = score(y / mi, y % mi);
                      return sx != sy ? sx > sy : x < y;
                    });
  CoarseMatches out;
  for (std::size_t i = 0; i < k; ++i) {
    out.pairs.emplace_back(order[i] / mi, order[i] % mi);
    out.scores.push_back(score(order[i] / mi, order[i] % mi));
  }
  return out;
}

Tensor slack_log_assignment(const Tensor& pre_patch_feats, const Tensor& intra_patch_feats,
                            const Tensor& slack_score, std::size_t iterations) {
  const std::size_t n = pre_patch_feats.dim(0), m = intra_patch_feats.dim(0);
  const double c = static_cast<double>(pre_patch_feats.dim(1));
  auto scores = ops::scale(ops::matmul(pre_patch_feats, ops::transpose(intra_patch_feats)),
                           1.0 / std::sqrt(c));
  auto border_col = ops::mul(Tensor::full({n, 1}, 1.0), slack_score);
  auto border_row = ops::mul(Tensor::full({1, m + 1}, 1.0), slack_score);
  auto x = ops::concat_rows(ops::concat_cols(scores, border_col), border_row);
  std::vector<double> row_targets(n + 1, 0.0), col_targets(m + 1, 0.0);
  row_targets[n] = std::log(static_cast<double>(m));
  col_targets[m] = std::log(static_cast<double>(n));
  for (std::size_t it = 0; it < iterations; ++it) {
    x = ops::log_normalize_rows(x, row_targets);
    x = ops::transpose(ops::log_normalize_rows(ops::transpose(x), col_targets));
  }
  return x;
}

FineMatchResult fine_match(const Tensor& dense_pre, const Tensor& dense_intra,
                           const Superpoints& pre, const Superpoints& intra,
                           const std::vector<IndexPair>& coarse_pairs, const Tensor& slack_score,
                           std::size_t iterations) {
  FineMatchResult out;
  for (const auto& [a, b] : coarse_pairs) {
    const auto& pa = pre.patches.at(a);
    const auto& pb = intra.patches.at(b);
    if (pa.empty() || pb.empty()) continue;
    auto logp = slack_log_assignment(ops::gather_rows(dense_pre, pa), ops::gather_rows(dense_intra, pb),
                                     slack_score, iterations);
    const std::size_t n = pa.size(), m = pb.size();
    std::vector<std::size_t> row_best(n + 1, 0), col_best(m + 1, 0);
    for (std::size_t i = 0; i <= n; ++i)
      for (std::size_t j = 0; j <= m; ++j) {
        if (logp.at(i, j) > logp.at(i, row_best[i])) row_best[i] = j;
        if (logp.at(i, j) > logp.at(col_best[j], j)) col_best[j] = i;
      }
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = row_best[i];
      if (j < m && col_best[j] == i) out.matches.add(pa[i], pb[j], std::exp(logp.at(i, j)));
    }
    out.assignments.push_back(std::move(logp));
    out.processed.emplace_back(a, b);
  }
  return out;
}

RigidTransform weighted_procrustes(const MatchSet& matches, std::span<const Vec3> pre,
                                   std::span<const Vec3> intra) {
  if (matches.size() < 3)
    throw GeometryError("weighted_procrustes: need at least 3 matches, got " +
                        std::to_string(matches.size()));
  matches.validate(pre.size(), intra.size());
  double wsum = 0.0;
  Vec3 cp = Vec3::Zero(), cq = Vec3::Zero();
  for (std::size_t i = 0; i < matches.size(); ++i) {
    const double w = matches.weights[i];
    wsum += w;
    cp += w * pre[matches.pairs[i].first];
    cq += w * intra[matches.pairs[i].second];
  }
  if (!(wsum > 0.0)) throw GeometryError("weighted_procrustes: total weight is not positive");
  cp /= wsum;
  cq /= wsum;
  Mat3 h = Mat3::Zero();
  for (std::size_t i = 0; i < matches.size(); ++i) {
    const double w = matches.weights[i];
    if (w == 0.0) continue;
    h += w * (pre[matches.pairs[i].first] - cp) * (intra[matches.pairs[i].second] - cq).transpose();
  }
  Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 sv = svd.singularValues();
  if (!(sv(1) > 1e-12 * std::max(sv(0), 1e-300)))
    throw GeometryError("weighted_procrustes: correspondences are collinear (cross-covariance rank " +
                        std::string(sv(0) > 0.0 ? "1" : "0") + ")");
  Mat3 d = Mat3::Identity();
  if ((svd.matrixV() * svd.matrixU().transpose()).determinant() < 0.0) d(2, 2) = -1.0;
  RigidTransform t;
  t.rotation = svd.matrixV() * d * svd.matrixU().transpose();
  t.translation = cq - t.rotation * cp;
  return t;
}

namespace {

std::size_t count_inliers(const RigidTransform& t, const MatchSet& m, std::span<const Vec3> pre,
                          std::span<const Vec3> intra, double radius, MatchSet* kept) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m.weights[i] <= 0.0) continue;
    if ((t(pre[m.pairs[i].first]) - intra[m.pairs[i].second]).norm() <= radius) {
      ++n;
      if (kept) kept->add(m.pairs[i].first, m.pairs[i].second, m.weights[i]);
    }
  }
  return n;
}

}  // namespace

RefineResult refine_transform(const RigidTransform& t0, const MatchSet& matches,
                              std::span<const Vec3> pre, std::span<const Vec3> intra,
                              double inlier_radius, std::size_t iterations) {
  RefineResult best{t0, 0, true};
  if (!(inlier_radius > 0.0)) return best;
  RigidTransform t = t0;
  for (std::size_t it = 0; it < iterations; ++it) {
    MatchSet kept;
    if (count_inliers(t, matches, pre, intra, inlier_radius, &kept) < 3) break;
    try {
      t = weighted_procrustes(kept, pre, intra);
    } catch (const GeometryError&) {
      break;
    }
    const std::size_t n = count_inliers(t, matches, pre, intra, inlier_radius, nullptr);
    if (best.degenerate || n >= best.inliers) best = {t, n, false};
  }
  return best;
}

Tensor coarse_loss(const Tensor& pre_feats, const Tensor& intra_feats,
                   const OverlapMatrix& overlap, const CoarseLossConfig& config) {
  const std::size_t mp = pre_feats.dim(0), mi = intra_feats.dim(0);
  if (overlap.rows != mp || overlap.cols != mi)
    throw ShapeError("coarse_loss: overlap matrix does not match superpoint counts");
  std::vector<double> wp(mp * mi, 0.0), wn(mp * mi, 0.0);
  double sp = 0.0, sn = 0.0;
  for (std::size_t i = 0; i < wp.size(); ++i) {
    const double o = overlap.values[i];
    if (o > config.positive_threshold) {
      wp[i] = o;
      sp += o;
    } else if (o == 0.0) {
      wn[i] = 1.0;
      sn += 1.0;
    }
  }
  if (sp == 0.0) throw std::domain_error("coarse_loss: no positive superpoint pair");
  for (auto& w : wp) w /= sp;
  if (sn > 0.0)
    for (auto& w : wn) w /= sn;
  auto d = ops::pairwise_distance(pre_feats, intra_feats);
  auto pos = ops::weighted_sum(ops::square(ops::relu(ops::add_scalar(d, -config.positive_margin))), wp);
  if (sn == 0.0) return pos;
  auto neg = ops::weighted_sum(
      ops::square(ops::relu(ops::add_scalar(ops::scale(d, -1.0), config.negative_margin))), wn);
  return ops::add(pos, neg);
}

std::vector<IndexPair> fine_ground_truth(std::span<const Vec3> pre_points,
                                         std::span<const Vec3> intra_points,
                                         const RigidTransform& t_gt, double radius) {
  const std::size_t n = pre_points.size(), m = intra_points.size();
  std::vector<IndexPair> gt;
  std::vector<char> matched(m, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 p = t_gt(pre_points[i]);
    std::size_t best = m;
    double bd = radius * radius;
    for (std::size_t j = 0; j < m; ++j) {
      const double d = (intra_points[j] - p).squaredNorm();
      if (d <= bd) {
        bd = d;
        best = j;
      }
    }
    gt.emplace_back(i, best);
    if (best < m) matched[best] = 1;
  }
  for (std::size_t j = 0; j < m; ++j)
    if (!matched[j]) gt.emplace_back(n, j);
  return gt;
}

Tensor fine_loss(const std::vector<Tensor>& log_assignments,
                 const std::vector<std::vector<IndexPair>>& ground_truth) {
  if (log_assignments.size() != ground_truth.size())
    throw std::invalid_argument("fine_loss: one ground-truth list per assignment required");
  Tensor total;
  std::size_t used = 0;
  for (std::size_t p = 0; p < log_assignments.size(); ++p) {
    const auto& x = log_assignments[p];
    const std::size_t n = x.dim(0) - 1, m = x.dim(1) - 1;
    const auto& gt = ground_truth[p];
    const bool any_real =
        std::any_of(gt.begin(), gt.end(), [&](const IndexPair& e) { return e.first < n && e.second < m; });
    if (!any_real) continue;
    std::vector<double> w(x.numel(), 0.0);
    for (const auto& [i, j] : gt) w[i * (m + 1) + j] -= 1.0 / static_cast<double>(gt.size());
    auto term = ops::weighted_sum(x, w);
    total = total.defined() ? ops::add(total, term) : term;
    ++used;
  }
  if (used == 0) throw std::domain_error("fine_loss: no patch pair has ground-truth matches");
  return ops::scale(total, 1.0 / static_cast<double>(used));
}

DualLoss dual_loss(const Tensor& coarse, const Tensor& fine) {
  return {ops::add(coarse, fine), coarse, fine};
}

}  // namespace end2reg

#include "end2reg/baselines.hpp"

#include "end2reg/matcher.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace end2reg {

ICPReport icp(const PointCloud& source, const PointCloud& target, const RigidTransform& init,
              const ICPConfig& config) {
  if (source.size() < 3 || target.size() < 3)
    throw GeometryError("icp: both clouds need at least 3 points");
  SpatialGrid grid(target.positions, suggest_cell_size(target.positions));
  ICPReport rep;
  rep.transform = init;
  const std::size_t n = source.size();
  const std::size_t keep = std::max<std::size_t>(
      3, n - static_cast<std::size_t>(std::floor(config.trim_fraction * static_cast<double>(n))));
  std::vector<std::pair<double, std::size_t>> residual(n);
  std::vector<std::size_t> nn(n);
  double prev = std::numeric_limits<double>::infinity();
  for (std::size_t it = 0; it < config.max_iter; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      const Vec3 p = rep.transform(source.positions[i]);
      nn[i] = grid.nearest(p, 1)[0];
      residual[i] = {(target.positions[nn[i]] - p).squaredNorm(), i};
    }
    std::nth_element(residual.begin(), residual.begin() + static_cast<std::ptrdiff_t>(keep - 1),
                     residual.end());
    double sse = 0.0;
    MatchSet m;
    for (std::size_t k = 0; k < keep; ++k) {
      sse += residual[k].first;
      m.add(residual[k].second, nn[residual[k].second], 1.0);
    }
    const double rms = std::sqrt(sse / static_cast<double>(keep));
    rep.rms_history.push_back(rms);
    rep.final_rms = rms;
    rep.iterations_used = it + 1;
    if (prev - rms < config.tol) {
      rep.converged = true;
      break;
    }
    prev = rms;
    try {
      // Procrustes maps the current source placement onto its matches; fold it
      // into the running transform.
      std::vector<Vec3> moved(n);
      for (std::size_t i = 0; i < n; ++i) moved[i] = rep.transform(source.positions[i]);
      rep.transform = compose(weighted_procrustes(m, moved, target.positions), rep.transform);
    } catch (const GeometryError&) {
      rep.converged = false;
      return rep;
    }
  }
  return rep;
}

namespace {

std::vector<Vec3> estimate_normals(std::span<const Vec3> pts, double radius) {
  SpatialGrid grid(pts, radius);
  std::vector<Vec3> normals(pts.size(), Vec3::UnitZ());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    auto nb = grid.within(pts[i], radius);
    if (nb.size() < 3) nb = grid.nearest(pts[i], std::min<std::size_t>(pts.size(), 6));
    Vec3 mean = Vec3::Zero();
    for (auto j : nb) mean += pts[j];
    mean /= static_cast<double>(nb.size());
    Mat3 cov = Mat3::Zero();
    for (auto j : nb) cov += (pts[j] - mean) * (pts[j] - mean).transpose();
    Eigen::SelfAdjointEigenSolver<Mat3> es(cov);
    normals[i] = es.eigenvectors().col(0);
  }
  return normals;
}

std::size_t bin_of(double v, std::size_t bins) {
  return std::min(bins - 1, static_cast<std::size_t>(std::max(0.0, v) * static_cast<double>(bins)));
}

}  // namespace

std::vector<double> pair_histogram_descriptors(std::span<const Vec3> points, double normal_radius,
                                               double feature_radius) {
  const auto normals = estimate_normals(points, normal_radius);
  SpatialGrid grid(points, feature_radius);
  std::vector<double> out(points.size() * kDescriptorBins, 0.0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    double* h = out.data() + i * kDescriptorBins;
    double total = 0.0;
    for (auto j : grid.within(points[i], feature_radius)) {
      if (j == i) continue;
      const Vec3 d = points[j] - points[i];
      const double len = d.norm();
      if (len == 0.0) continue;
      const std::size_t a = bin_of(std::abs(normals[i].dot(normals[j])), 4);
      const std::size_t b = bin_of(std::abs(normals[i].dot(d / len)), 4);
      const std::size_t c = bin_of(len / feature_radius, 2);
      h[(a * 4 + b) * 2 + c] += 1.0;
      total += 1.0;
    }
    if (total > 0.0)
      for (std::size_t k = 0; k < kDescriptorBins; ++k) h[k] /= total;
  }
  return out;
}

RansacReport ransac_icp(const PointCloud& source, const PointCloud& target, Rng& rng,
                        const RansacConfig& config) {
  if (source.size() < 10 || target.size() < 10)
    throw GeometryError("ransac_icp: both clouds need at least 10 points");
  const auto src = voxel_grid_subsample(source, config.voxel).cloud.positions;
  const auto tgt = voxel_grid_subsample(target, config.voxel).cloud.positions;
  const auto ds = pair_histogram_descriptors(src, config.normal_radius, config.feature_radius);
  const auto dt = pair_histogram_descriptors(tgt, config.normal_radius, config.feature_radius);
  constexpr std::size_t B = kDescriptorBins;
  auto nearest = [&](const std::vector<double>& from, std::size_t i, const std::vector<double>& to,
                     std::size_t count) {
    std::size_t best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < count; ++j) {
      double d = 0.0;
      for (std::size_t k = 0; k < B; ++k) {
        const double e = from[i * B + k] - to[j * B + k];
        d += e * e;
      }
      if (d < bd) {
        bd = d;
        best = j;
      }
    }
    return best;
  };
  std::vector<std::size_t> s2t(src.size()), t2s(tgt.size());
  for (std::size_t i = 0; i < src.size(); ++i) s2t[i] = nearest(ds, i, dt, tgt.size());
  for (std::size_t j = 0; j < tgt.size(); ++j) t2s[j] = nearest(dt, j, ds, src.size());
  MatchSet corr;
  for (std::size_t i = 0; i < src.size(); ++i)
    if (t2s[s2t[i]] == i) corr.add(i, s2t[i], 1.0);
  if (corr.size() < 3)
    throw GeometryError("ransac_icp: only " + std::to_string(corr.size()) +
                        " mutual descriptor matches; cannot form a hypothesis");

  RansacReport rep;
  rep.correspondences = corr.size();
  std::uniform_int_distribution<std::size_t> pick(0, corr.size() - 1);
  const SpatialGrid grid(tgt, config.inlier_radius);
  auto covered = [&](const RigidTransform& t) {
    std::size_t n = 0;
    for (const auto& p : src) n += !grid.within(t(p), config.inlier_radius).empty();
    return n;
  };
  auto inliers_of = [&](const RigidTransform& t) {
    std::size_t n = 0;
    for (const auto& [i, j] : corr.pairs) n += (t(src[i]) - tgt[j]).norm() <= config.inlier_radius;
    return n;
  };
  std::size_t best = 0;
  for (std::size_t it = 0; it < config.n_iter; ++it) {
    MatchSet sample;
    for (int k = 0; k < 3; ++k) {
      const auto c = pick(rng);
      sample.add(corr.pairs[c].first, corr.pairs[c].second, 1.0);
    }
    RigidTransform t;
    try {
      t = weighted_procrustes(sample, src, tgt);
    } catch (const GeometryError&) {
      continue;
    }
    // the cheap correspondence count gates the full overlap count
    const std::size_t n = inliers_of(t);
    if (n < 3) continue;
    const std::size_t score = config.overlap_scoring ? covered(t) : n;
    if (score > best) {
      best = score;
      rep.inliers = n;
      rep.hypothesis = t;
    }
  }
  MatchSet kept;
  for (const auto& [i, j] : corr.pairs)
    if ((rep.hypothesis(src[i]) - tgt[j]).norm() <= config.inlier_radius) kept.add(i, j, 1.0);
  if (kept.size() >= 3) {
    try {
      const auto refit = weighted_procrustes(kept, src, tgt);
      if (!config.overlap_scoring || covered(refit) >= covered(rep.hypothesis)) rep.hypothesis = refit;
    } catch (const GeometryError&) {
    }
  }
  rep.overlap = static_cast<double>(covered(rep.hypothesis)) / static_cast<double>(src.size());
  auto refine = config.refine;
  if (config.overlap_trim)
    refine.trim_fraction = std::clamp(1.0 - rep.overlap, config.refine.trim_fraction, config.max_trim);
  rep.icp = icp(source, target, rep.hypothesis, refine);
  return rep;
}

}  // namespace end2reg

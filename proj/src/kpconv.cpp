#include "end2reg/kpconv.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <random>
#include <tuple>

namespace end2reg {

namespace {

KernelDisposition repulse(std::size_t k, std::uint64_t seed) {
  KernelDisposition out;
  out.points.assign(k, Vec3::Zero());
  if (k == 1) return out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  std::uniform_real_distribution<double> u01;
  for (std::size_t i = 1; i < k; ++i) {
    Vec3 d(n01(rng), n01(rng), n01(rng));
    out.points[i] = d.normalized() * std::cbrt(u01(rng));
  }
  std::vector<Vec3> force(k);
  for (int it = 0; it < 1000; ++it) {
    double fmax = 0.0;
    for (std::size_t i = 1; i < k; ++i) {
      Vec3 f = Vec3::Zero();
      for (std::size_t j = 0; j < k; ++j) {
        if (j == i) continue;
        const Vec3 d = out.points[i] - out.points[j];
        const double r = std::max(d.norm(), 1e-6);
        f += d / (r * r * r);
      }
      force[i] = f;
      fmax = std::max(fmax, f.norm());
    }
    if (fmax == 0.0) break;
    const double step = 0.05 * std::pow(0.995, it);
    for (std::size_t i = 1; i < k; ++i) {
      Vec3 p = out.points[i] + step * force[i] / fmax;
      const double r = p.norm();
      if (r > 1.0) p /= r;
      out.points[i] = p;
    }
  }
  return out;
}

std::vector<std::size_t> pick_strided(const std::vector<std::size_t>& sorted, std::size_t cap) {
  if (sorted.size() <= cap) return sorted;
  std::vector<std::size_t> out(cap);
  if (cap == 1) {
    out[0] = sorted[0];
    return out;
  }
  const double span = static_cast<double>(sorted.size() - 1) / static_cast<double>(cap - 1);
  for (std::size_t i = 0; i < cap; ++i)
    out[i] = sorted[static_cast<std::size_t>(std::llround(static_cast<double>(i) * span))];
  return out;
}

}  // namespace

const KernelDisposition& kernel_disposition(std::size_t k, std::uint64_t seed) {
  if (k == 0) throw std::invalid_argument("kernel_disposition: K must be at least 1");
  static std::mutex mu;
  static std::map<std::pair<std::size_t, std::uint64_t>, KernelDisposition> cache;
  std::lock_guard lock(mu);
  auto it = cache.find({k, seed});
  if (it == cache.end()) it = cache.emplace(std::make_pair(k, seed), repulse(k, seed)).first;
  return it->second;
}

ConvGeometry conv_geometry(std::span<const Vec3> query, std::span<const Vec3> support,
                           double radius, std::size_t max_neighbors,
                           const KernelDisposition& kernel, NeighborSelection selection) {
  ConvGeometry g;
  g.radius = radius;
  g.kernel_size = kernel.size();
  g.neighbors.width = max_neighbors;
  g.neighbors.shadow = support.size();
  g.neighbors.indices.assign(query.size() * max_neighbors, support.size());
  SpatialGrid grid(support, radius);
  const double quantum = radius * 1e-9;
  for (std::size_t q = 0; q < query.size(); ++q) {
    // Order by distance, then by position, so truncation does not depend on
    // input order when distances tie (a centroid of two points is equidistant
    // from both).
    auto hits = grid.within(query[q], radius);
    std::vector<std::tuple<long long, double, double, double, std::size_t>> keyed;
    keyed.reserve(hits.size());
    for (auto s : hits) {
      const Vec3& p = support[s];
      keyed.emplace_back(std::llround((p - query[q]).norm() / quantum), p.x(), p.y(), p.z(), s);
    }
    std::sort(keyed.begin(), keyed.end());
    for (std::size_t i = 0; i < hits.size(); ++i) hits[i] = std::get<4>(keyed[i]);
    if (selection == NeighborSelection::nearest) {
      if (hits.size() > max_neighbors) hits.resize(max_neighbors);
    } else {
      hits = pick_strided(hits, max_neighbors);
    }
    std::copy(hits.begin(), hits.end(), g.neighbors.indices.begin() + q * max_neighbors);
  }
  g.query.assign(query.begin(), query.end());
  g.support.assign(support.begin(), support.end());
  g.kernel = &kernel;
  return g;
}

namespace {

template <class F>
void for_each_influence(const ConvGeometry& g, F&& f) {
  if (!g.kernel || g.kernel->size() != g.kernel_size || g.query.size() != g.queries() ||
      g.support.size() != g.neighbors.shadow)
    throw ShapeError("kpconv: geometry is incomplete");
  const double sigma = g.radius / 1.5, sigma2 = sigma * sigma;
  const std::size_t k = g.kernel_size, width = g.neighbors.width;
  std::vector<Vec3> scaled(k);
  for (std::size_t j = 0; j < k; ++j) scaled[j] = g.radius * g.kernel->points[j];
  for (std::size_t q = 0; q < g.query.size(); ++q)
    for (std::size_t h = 0; h < width; ++h) {
      const std::size_t s = g.neighbors.indices[q * width + h];
      if (s >= g.support.size()) continue;
      const Vec3 rel = g.support[s] - g.query[q];
      for (std::size_t j = 0; j < k; ++j) {
        const Vec3 d = rel - scaled[j];
        const double d2 = d.squaredNorm();
        if (d2 >= sigma2) continue;
        const double w = std::max(0.0, 1.0 - std::sqrt(d2) / sigma);
        if (w != 0.0) f(q, h, s, j, w);
      }
    }
}

}  // namespace

std::vector<double> dense_influence(const ConvGeometry& g) {
  std::vector<double> out(g.neighbors.indices.size() * g.kernel_size, 0.0);
  for_each_influence(g, [&](std::size_t q, std::size_t h, std::size_t, std::size_t j, double w) {
    out[(q * g.neighbors.width + h) * g.kernel_size + j] = w;
  });
  return out;
}

Tensor kpconv(const Tensor& feats, const ConvGeometry& geometry, const Tensor& weights) {
  if (weights.rank() != 3 || weights.dim(0) != geometry.kernel_size)
    throw ShapeError("kpconv: weights " + shape_str(weights.shape()) + " do not match kernel size " +
                     std::to_string(geometry.kernel_size));
  if (feats.rank() != 2 || feats.dim(1) != weights.dim(1))
    throw ShapeError("kpconv: features " + shape_str(feats.shape()) + " vs weights " +
                     shape_str(weights.shape()));
  if (feats.dim(0) != geometry.neighbors.shadow)
    throw ShapeError("kpconv: " + std::to_string(feats.dim(0)) + " feature rows for " +
                     std::to_string(geometry.neighbors.shadow) + " support points");
  const std::size_t k = weights.dim(0), cin = weights.dim(1), cout = weights.dim(2);
  std::vector<ops::KernelTerm> terms;
  terms.reserve(geometry.neighbors.indices.size() * k / 3);
  for_each_influence(geometry, [&](std::size_t q, std::size_t, std::size_t s, std::size_t j, double w) {
    terms.push_back({static_cast<std::uint32_t>(q), static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(j), w});
  });
  auto gathered = ops::kernel_aggregate(feats, std::move(terms), geometry.queries(), k);
  return ops::matmul(gathered, ops::reshape(weights, {k * cin, cout}));
}

Tensor kpconv(std::span<const Vec3> query, std::span<const Vec3> support, const Tensor& feats,
              const NeighborTable& neighbors, const KernelDisposition& kernel, double radius,
              const Tensor& weights) {
  if (neighbors.rows() != query.size() || neighbors.shadow != support.size())
    throw ShapeError("kpconv: neighbor table does not match query/support sizes");
  ConvGeometry g;
  g.neighbors = neighbors;
  g.radius = radius;
  g.kernel_size = kernel.size();
  g.kernel = &kernel;
  g.query.assign(query.begin(), query.end());
  g.support.assign(support.begin(), support.end());
  return kpconv(feats, g, weights);
}

PointPyramid build_pyramid(const PointCloud& cloud, const PyramidConfig& config) {
  if (config.stages < 2) throw std::invalid_argument("build_pyramid: need at least 2 stages");
  cloud.validate();
  const auto& kernel = kernel_disposition(config.kernel_size, config.kernel_seed);
  PointPyramid pyr;
  pyr.input = cloud.positions;
  PointCloud prev = cloud;
  prev.labels.reset();
  double voxel = config.initial_voxel;
  for (std::size_t l = 0; l < config.stages; ++l, voxel *= 2.0) {
    auto sub = voxel_grid_subsample(prev, voxel);
    if (sub.cloud.size() < 4)
      throw GeometryError("build_pyramid: level " + std::to_string(l) + " has " +
                          std::to_string(sub.cloud.size()) +
                          " points; the cloud is too sparse for this depth");
    PyramidLevel level;
    level.points = sub.cloud.positions;
    if (sub.cloud.colors) level.colors = *sub.cloud.colors;
    level.voxel = voxel;
    level.radius = config.radius_mult * voxel;
    level.pool = std::move(sub.provenance);
    level.upsample = knn(prev.positions, level.points, 1);
    level.conv = conv_geometry(level.points, level.points, level.radius, config.max_neighbors, kernel);
    const double strided_radius = l == 0 ? level.radius : pyr.levels.back().radius;
    level.strided =
        conv_geometry(level.points, prev.positions, strided_radius, config.max_neighbors, kernel);
    prev = std::move(sub.cloud);
    pyr.levels.push_back(std::move(level));
  }
  return pyr;
}

}  // namespace end2reg

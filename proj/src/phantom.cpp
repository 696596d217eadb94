#include "end2reg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <stdexcept>
#include <unordered_map>

namespace end2reg {

void PhantomConfig::validate() const {
  auto fraction = [](double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0))
      throw std::invalid_argument(std::string("PhantomConfig: ") + name + " must lie in [0,1]");
  };
  fraction(exposure_fraction, "exposure_fraction");
  fraction(clutter_fraction, "clutter_fraction");
  if (points_pre < 100 || points_intra < 100)
    throw std::invalid_argument("PhantomConfig: point counts must be at least 100");
  if (n_vertebrae < 1) throw std::invalid_argument("PhantomConfig: need at least one vertebra");
  if (noise_sigma < 0.0 || occlusion_radius < 0.0 || tissue_clearance < 0.0)
    throw std::invalid_argument("PhantomConfig: lengths must be non-negative");
}

namespace {

// Local vertebra frame: x lateral, y anterior, z cranial. The camera looks
// along +y from the posterior side.
const Vec3 kToCamera(0.0, -1.0, 0.0);

struct Surfel {
  Vec3 p, n;
};

struct Body {
  Vec3 center;
  Mat3 rot;
  Vec3 axes;
  double power = 4.0;

  double implicit(const Vec3& world) const {
    const Vec3 q = rot.transpose() * (world - center);
    return std::pow(std::abs(q.x() / axes.x()), power) + std::pow(std::abs(q.y() / axes.y()), power) +
           std::pow(std::abs(q.z() / axes.z()), power);
  }
};

struct Spike {
  Vec3 base, tip;
  double r0 = 0.0, r1 = 0.0;
};

struct Anatomy {
  std::vector<Body> bodies;
  std::vector<Spike> spikes;
  std::vector<Vec3> tips;  // 3 per vertebra: spinous, left, right
};

Anatomy build_anatomy(std::size_t n, Rng& rng) {
  std::uniform_real_distribution<double> jitter(0.95, 1.05);
  Anatomy a;
  const double denom = n > 1 ? static_cast<double>(n - 1) : 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double s = (1.0 + 0.04 * static_cast<double>(i)) * jitter(rng);
    const double u = static_cast<double>(i) / denom;
    const Vec3 center(0.0, 0.012 * std::sin(std::numbers::pi * u), 0.036 * static_cast<double>(i));
    const Mat3 rot =
        Eigen::AngleAxisd(0.15 * std::cos(std::numbers::pi * u), Vec3::UnitX()).toRotationMatrix();
    Body b{center, rot, Vec3(0.021 * s * jitter(rng), 0.015 * s * jitter(rng), 0.011 * s), 4.0};
    a.bodies.push_back(b);
    auto world = [&](const Vec3& local) -> Vec3 { return center + rot * local; };
    const double ax = b.axes.x(), ay = b.axes.y();
    Spike spinous{world({0.0, -0.8 * ay, 0.0}), world({0.0, -ay - 0.032 * s * jitter(rng), -0.008 * s}),
                  0.005 * s, 0.0025 * s};
    Spike left{world({-0.6 * ax, -0.6 * ay, 0.002}), world({-ax - 0.028 * s * jitter(rng), -ay - 0.004 * s, 0.002}),
               0.004 * s, 0.002 * s};
    Spike right{world({0.6 * ax, -0.6 * ay, 0.002}), world({ax + 0.028 * s * jitter(rng), -ay - 0.004 * s, 0.002}),
                0.004 * s, 0.002 * s};
    for (const auto& sp : {spinous, left, right}) {
      a.spikes.push_back(sp);
      a.tips.push_back(sp.tip);
    }
  }
  return a;
}

double body_area(const Body& b) {
  constexpr double p = 1.6075;
  const double x = std::pow(b.axes.x(), p), y = std::pow(b.axes.y(), p), z = std::pow(b.axes.z(), p);
  return 1.1 * 4.0 * std::numbers::pi * std::pow((x * y + x * z + y * z) / 3.0, 1.0 / p);
}

double spike_area(const Spike& s) { return std::numbers::pi * (s.r0 + s.r1) * (s.tip - s.base).norm(); }

bool inside_any_body(const Anatomy& a, const Vec3& p) {
  for (const auto& b : a.bodies)
    if (b.implicit(p) < 1.0) return true;
  return false;
}

// Area-uniform samples on a superellipsoid: radial projection of uniform
// directions, corrected by rejection on r^2 / (n . d).
void sample_body(const Body& b, std::size_t count, Rng& rng, std::vector<Surfel>& out) {
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> u01;
  auto candidate = [&](Surfel& s) {
    Vec3 d(g(rng), g(rng), g(rng));
    d.normalize();
    const double f = std::pow(std::abs(d.x() / b.axes.x()), b.power) +
                     std::pow(std::abs(d.y() / b.axes.y()), b.power) +
                     std::pow(std::abs(d.z() / b.axes.z()), b.power);
    const double r = std::pow(f, -1.0 / b.power);
    const Vec3 q = r * d;
    Vec3 n(std::copysign(std::pow(std::abs(q.x() / b.axes.x()), b.power - 1.0) / b.axes.x(), q.x()),
           std::copysign(std::pow(std::abs(q.y() / b.axes.y()), b.power - 1.0) / b.axes.y(), q.y()),
           std::copysign(std::pow(std::abs(q.z() / b.axes.z()), b.power - 1.0) / b.axes.z(), q.z()));
    n.normalize();
    s = {b.center + b.rot * q, b.rot * n};
    return r * r / std::max(n.dot(d), 1e-3);
  };
  double wmax = 0.0;
  Surfel s;
  for (int i = 0; i < 512; ++i) wmax = std::max(wmax, candidate(s));
  wmax *= 1.25;
  for (std::size_t got = 0; got < count;) {
    if (u01(rng) * wmax <= candidate(s)) {
      out.push_back(s);
      ++got;
    }
  }
}

void sample_spike(const Anatomy& a, const Spike& sp, std::size_t count, Rng& rng,
                  std::vector<Surfel>& out) {
  std::uniform_real_distribution<double> u01;
  const Vec3 axis = (sp.tip - sp.base).normalized();
  const Vec3 e1 = axis.unitOrthogonal();
  const Vec3 e2 = axis.cross(e1);
  const double len = (sp.tip - sp.base).norm();
  const double rmax = std::max(sp.r0, sp.r1);
  std::size_t got = 0;
  for (std::size_t tries = 0; got < count && tries < 200 * count + 1000; ++tries) {
    const double t = u01(rng);
    const double r = sp.r0 + (sp.r1 - sp.r0) * t;
    if (u01(rng) * rmax > r) continue;
    const double phi = 2.0 * std::numbers::pi * u01(rng);
    const Vec3 radial = std::cos(phi) * e1 + std::sin(phi) * e2;
    const Vec3 p = sp.base + t * len * axis + r * radial;
    if (inside_any_body(a, p)) continue;
    out.push_back({p, radial});
    ++got;
  }
}

std::vector<Surfel> sample_bone(const Anatomy& a, std::size_t count, Rng& rng) {
  std::vector<double> areas;
  for (const auto& b : a.bodies) areas.push_back(body_area(b));
  for (const auto& s : a.spikes) areas.push_back(spike_area(s));
  const double total = std::accumulate(areas.begin(), areas.end(), 0.0);
  // Largest-remainder allocation so the counts sum exactly.
  std::vector<std::size_t> alloc(areas.size());
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t used = 0;
  for (std::size_t i = 0; i < areas.size(); ++i) {
    const double exact = static_cast<double>(count) * areas[i] / total;
    alloc[i] = static_cast<std::size_t>(exact);
    used += alloc[i];
    rem.emplace_back(exact - static_cast<double>(alloc[i]), i);
  }
  std::sort(rem.begin(), rem.end(), [](const auto& x, const auto& y) {
    return x.first != y.first ? x.first > y.first : x.second < y.second;
  });
  for (std::size_t k = 0; used < count; ++k, ++used) ++alloc[rem[k % rem.size()].second];
  std::vector<Surfel> out;
  out.reserve(count);
  for (std::size_t i = 0; i < a.bodies.size(); ++i) sample_body(a.bodies[i], alloc[i], rng, out);
  for (std::size_t i = 0; i < a.spikes.size(); ++i)
    sample_spike(a, a.spikes[i], alloc[a.bodies.size() + i], rng, out);
  // Spike samples hidden inside bodies were dropped; top up from bodies.
  while (out.size() < count) sample_body(a.bodies[out.size() % a.bodies.size()], 1, rng, out);
  return out;
}

// Perturbed tissue sheet around the spine at the depth of the body centers,
// facing the camera.
std::vector<Surfel> sample_sheet(const Anatomy& a, std::size_t count, Rng& rng) {
  double zmin = 1e9, zmax = -1e9;
  for (const auto& b : a.bodies) {
    zmin = std::min(zmin, b.center.z());
    zmax = std::max(zmax, b.center.z());
  }
  std::uniform_real_distribution<double> ux(-0.075, 0.075), uz(zmin - 0.025, zmax + 0.025);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  const double p1 = phase(rng), p2 = phase(rng);
  std::vector<Surfel> out;
  for (std::size_t i = 0; i < count; ++i) {
    const double x = ux(rng), z = uz(rng);
    const double y = -0.002 + 0.004 * std::sin(40.0 * x + p1) * std::cos(30.0 * z + p2) + 60.0 * x * x * 0.02;
    const double dydx = 0.16 * std::cos(40.0 * x + p1) * std::cos(30.0 * z + p2) + 2.4 * x;
    const double dydz = -0.12 * std::sin(40.0 * x + p1) * std::sin(30.0 * z + p2);
    out.push_back({Vec3(x, y, z), Vec3(dydx, -1.0, dydz).normalized()});
  }
  return out;
}

// Normal test plus a coarse depth buffer over (x, z) cells.
std::vector<char> visible(const std::vector<Surfel>& scene) {
  constexpr double cell = 0.0015, slack = 0.002;
  std::unordered_map<GridKey, double, GridKeyHash> front;
  auto key = [&](const Vec3& p) {
    return GridKey{static_cast<std::int64_t>(std::floor(p.x() / cell)), 0,
                   static_cast<std::int64_t>(std::floor(p.z() / cell))};
  };
  for (const auto& s : scene) {
    auto [it, fresh] = front.try_emplace(key(s.p), s.p.y());
    if (!fresh) it->second = std::min(it->second, s.p.y());
  }
  std::vector<char> vis(scene.size());
  for (std::size_t i = 0; i < scene.size(); ++i)
    vis[i] = scene[i].n.dot(kToCamera) > 0.05 && scene[i].p.y() <= front.at(key(scene[i].p)) + slack;
  return vis;
}

// 8-bit channels, as a camera would deliver them
Vec3 jittered(const Vec3& base, double amount, Rng& rng) {
  std::uniform_real_distribution<double> u(-amount, amount);
  auto channel = [&](double c) { return std::round(std::clamp(c + u(rng), 0.0, 1.0) * 255.0) / 255.0; };
  const double r = channel(base.x()), g = channel(base.y());
  return Vec3(r, g, channel(base.z()));
}

template <class T>
void take_random(std::vector<T>& v, std::size_t keep, Rng& rng) {
  if (v.size() <= keep) return;
  std::shuffle(v.begin(), v.end(), rng);
  v.resize(keep);
}

struct Attempt {
  RegistrationSample sample;
  bool ok = false;
};

Attempt attempt(const PhantomConfig& cfg, std::size_t k) {
  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                    static_cast<std::uint32_t>(k)};
  Rng rng(seq);
  Attempt out;
  auto& s = out.sample;
  s.seed = cfg.seed;
  s.attempt = k;
  const Anatomy anatomy = build_anatomy(cfg.n_vertebrae, rng);

  PointCloud pre_world;
  for (const auto& sf : sample_bone(anatomy, cfg.points_pre, rng)) pre_world.positions.push_back(sf.p);

  // Intraoperative scene: independent bone resampling plus the tissue sheet.
  const std::size_t bone_target =
      static_cast<std::size_t>(std::lround(static_cast<double>(cfg.points_intra) * (1.0 - cfg.clutter_fraction)));
  auto bone = sample_bone(anatomy, 4 * cfg.points_intra, rng);
  std::vector<Surfel> sheet;
  if (cfg.clutter_fraction > 0.0) {
    std::vector<Vec3> all_bone;
    for (const auto& b : bone) all_bone.push_back(b.p);
    all_bone.insert(all_bone.end(), pre_world.positions.begin(), pre_world.positions.end());
    SpatialGrid grid(all_bone, std::max(cfg.tissue_clearance, 1e-4));
    for (const auto& t : sample_sheet(anatomy, 6 * cfg.points_intra, rng))
      if (grid.within(t.p, cfg.tissue_clearance).empty() && !inside_any_body(anatomy, t.p))
        sheet.push_back(t);
  }
  std::vector<Surfel> scene = bone;
  scene.insert(scene.end(), sheet.begin(), sheet.end());
  const auto vis = visible(scene);

  std::vector<Surfel> vis_bone, vis_tissue;
  for (std::size_t i = 0; i < scene.size(); ++i) {
    if (!vis[i]) continue;
    (i < bone.size() ? vis_bone : vis_tissue).push_back(scene[i]);
  }
  // Exposure keeps the most camera-facing share of the visible bone.
  std::stable_sort(vis_bone.begin(), vis_bone.end(), [](const Surfel& a, const Surfel& b) {
    return a.n.dot(kToCamera) > b.n.dot(kToCamera);
  });
  vis_bone.resize(static_cast<std::size_t>(
      std::lround(cfg.exposure_fraction * static_cast<double>(vis_bone.size()))));
  take_random(vis_bone, bone_target, rng);
  std::size_t tissue_target = 0;
  if (cfg.clutter_fraction >= 1.0) {
    vis_bone.clear();
    tissue_target = cfg.points_intra;
  } else if (cfg.clutter_fraction > 0.0) {
    tissue_target = static_cast<std::size_t>(std::lround(
        static_cast<double>(vis_bone.size()) * cfg.clutter_fraction / (1.0 - cfg.clutter_fraction)));
    tissue_target = std::min(tissue_target, cfg.points_intra - std::min(cfg.points_intra, vis_bone.size()));
  }
  take_random(vis_tissue, tissue_target, rng);

  struct IntraPoint {
    Vec3 p;
    int bone;
  };
  std::vector<IntraPoint> intra;
  for (const auto& b : vis_bone) intra.push_back({b.p, 1});
  for (const auto& t : vis_tissue) intra.push_back({t.p, 0});

  // Occlusions: spheres centered on exposed bone.
  const std::size_t exposed = vis_bone.size();
  if (cfg.occlusion_patches > 0 && exposed > 0) {
    std::uniform_int_distribution<std::size_t> pick(0, exposed - 1);
    std::vector<Vec3> centers;
    for (std::size_t c = 0; c < cfg.occlusion_patches; ++c) centers.push_back(vis_bone[pick(rng)].p);
    std::erase_if(intra, [&](const IntraPoint& q) {
      return std::any_of(centers.begin(), centers.end(),
                         [&](const Vec3& c) { return (q.p - c).norm() <= cfg.occlusion_radius; });
    });
  }
  std::size_t bone_left = 0;
  for (const auto& q : intra) bone_left += q.bone;
  s.occluded_fraction = exposed ? 1.0 - static_cast<double>(bone_left) / static_cast<double>(exposed) : 0.0;

  std::shuffle(intra.begin(), intra.end(), rng);
  std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
  const Vec3 bone_rgb(0.89, 0.86, 0.78), tissue_rgb(0.70, 0.22, 0.20);
  PointCloud intra_world;
  intra_world.colors.emplace();
  for (const auto& q : intra) {
    Vec3 p = q.p;
    if (cfg.noise_sigma > 0.0) p += Vec3(noise(rng), noise(rng), noise(rng));
    intra_world.positions.push_back(p);
    intra_world.colors->push_back(q.bone ? jittered(bone_rgb, 0.06, rng) : jittered(tissue_rgb, 0.08, rng));
    s.gt_mask.push_back(q.bone);
  }
  if (intra_world.size() < 10) return out;

  auto [pre_norm, norm] = normalize_unit_sphere(pre_world);
  s.normalization = norm;
  s.t_gt = random_rigid(cfg.max_translation, cfg.max_rotation_deg, rng);
  const RigidTransform back = invert(s.t_gt);
  s.preoperative = apply(back, pre_norm);
  for (const auto& tip : anatomy.tips) s.landmarks.push_back(back(norm.forward(tip)));
  s.intraoperative = apply_normalization(norm, intra_world);
  out.ok = s.occluded_fraction < 0.5 && overlap_fraction(s) >= 0.3;
  return out;
}

}  // namespace

RegistrationSample generate_phantom(const PhantomConfig& config) {
  config.validate();
  for (std::size_t k = 0; k < std::max<std::size_t>(1, config.max_retries); ++k) {
    auto a = attempt(config, k);
    if (a.ok) return std::move(a.sample);
  }
  throw GeometryError("generate_phantom: seed " + std::to_string(config.seed) + " failed the overlap/occlusion checks " +
                      std::to_string(config.max_retries) + " times");
}

double overlap_fraction(const RegistrationSample& sample, double radius) {
  std::vector<Vec3> bone;
  for (std::size_t i = 0; i < sample.intraoperative.size(); ++i)
    if (sample.gt_mask[i]) bone.push_back(sample.intraoperative.positions[i]);
  if (bone.empty()) return 0.0;
  SpatialGrid grid(bone, radius);
  std::size_t hit = 0;
  for (const auto& p : sample.preoperative.positions) hit += !grid.within(sample.t_gt(p), radius).empty();
  return static_cast<double>(hit) / static_cast<double>(sample.preoperative.size());
}

std::vector<int> weak_labels(const PointCloud& intra, const PointCloud& pre_bone,
                             const RigidTransform& t_approx, double threshold) {
  std::vector<Vec3> moved;
  for (const auto& p : pre_bone.positions) moved.push_back(t_approx(p));
  std::vector<int> out(intra.size(), 0);
  if (moved.empty()) return out;
  SpatialGrid grid(moved, std::max(threshold, suggest_cell_size(moved)));
  for (std::size_t i = 0; i < intra.size(); ++i) {
    const auto nn = grid.nearest(intra.positions[i], 1)[0];
    out[i] = (moved[nn] - intra.positions[i]).norm() <= threshold;
  }
  return out;
}

}  // namespace end2reg

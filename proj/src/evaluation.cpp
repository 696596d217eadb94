#include "end2reg/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace end2reg {

std::vector<double> tre(std::span<const Vec3> landmarks, const RigidTransform& t_pred,
                        const RigidTransform& t_gt) {
  std::vector<double> e;
  e.reserve(landmarks.size());
  for (const auto& p : landmarks) e.push_back((t_pred(p) - t_gt(p)).norm());
  return e;
}

double rmse(std::span<const Vec3> points, const RigidTransform& t_pred, const RigidTransform& t_gt) {
  if (points.empty()) throw std::invalid_argument("rmse: no points");
  double s = 0.0;
  for (const auto& p : points) s += (t_pred(p) - t_gt(p)).squaredNorm();
  return std::sqrt(s / static_cast<double>(points.size()));
}

double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw std::invalid_argument("quantile of an empty list");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

Summary summarize(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("summarize: empty list");
  std::sort(values.begin(), values.end());
  Summary s;
  s.n = values.size();
  s.median = quantile_sorted(values, 0.5);
  s.q1 = quantile_sorted(values, 0.25);
  s.q3 = quantile_sorted(values, 0.75);
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(s.n);
  double ss = 0.0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.sd = s.n > 1 ? std::sqrt(ss / static_cast<double>(s.n - 1)) : 0.0;
  const double fence = s.q3 + 1.5 * (s.q3 - s.q1);
  s.outlier_rate = static_cast<double>(std::count_if(values.begin(), values.end(),
                                                     [&](double v) { return v > fence; })) /
                   static_cast<double>(s.n);
  return s;
}

namespace {

struct SignedRanks {
  std::vector<double> ranks;
  std::vector<int> signs;
  double tie_term = 0.0;  // sum of t^3 - t over tie groups
};

SignedRanks signed_ranks(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("wilcoxon: paired lists differ in length");
  std::vector<double> d;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (b[i] - a[i] != 0.0) d.push_back(b[i] - a[i]);
  if (d.empty()) throw std::invalid_argument("wilcoxon: every paired difference is zero; the test is undefined");
  if (d.size() < 6)
    throw std::invalid_argument("wilcoxon: need at least 6 nonzero differences, got " + std::to_string(d.size()));
  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return std::abs(d[x]) < std::abs(d[y]); });
  SignedRanks r;
  r.ranks.resize(d.size());
  r.signs.resize(d.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && std::abs(d[order[j + 1]]) == std::abs(d[order[i]])) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r.ranks[order[k]] = avg;
    const double t = static_cast<double>(j - i + 1);
    r.tie_term += t * t * t - t;
    i = j + 1;
  }
  for (std::size_t i = 0; i < d.size(); ++i) r.signs[i] = d[i] > 0 ? 1 : -1;
  return r;
}

constexpr std::size_t kExactLimit = 50;

// Ranks are multiples of 1/2, so doubled ranks are integers and the null
// distribution of 2 W+ is a subset-sum count.
double exact_p(const SignedRanks& sr) {
  const std::size_t n = sr.ranks.size();
  if (n > kExactLimit) throw std::invalid_argument("wilcoxon_exact_p: too many pairs");
  std::vector<std::size_t> r2(n);
  std::size_t total = 0, observed = 0;
  for (std::size_t i = 0; i < n; ++i) {
    r2[i] = static_cast<std::size_t>(std::lround(2.0 * sr.ranks[i]));
    total += r2[i];
    if (sr.signs[i] > 0) observed += r2[i];
  }
  std::vector<double> count(total + 1, 0.0);
  count[0] = 1.0;
  for (auto r : r2)
    for (std::size_t s = total; s >= r; --s) {
      count[s] += count[s - r];
      if (s == r) break;
    }
  // |2W - total| >= |2W_obs - total|
  const auto dev = static_cast<long long>(2 * observed) - static_cast<long long>(total);
  double extreme = 0.0, all = 0.0;
  for (std::size_t s = 0; s <= total; ++s) {
    all += count[s];
    if (std::llabs(2 * static_cast<long long>(s) - static_cast<long long>(total)) >= std::llabs(dev)) extreme += count[s];
  }
  return extreme / all;
}

}  // namespace

WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b) {
  const auto sr = signed_ranks(a, b);
  WilcoxonResult w;
  w.n = sr.ranks.size();
  for (std::size_t i = 0; i < w.n; ++i) (sr.signs[i] > 0 ? w.w_plus : w.w_minus) += sr.ranks[i];
  const double n = static_cast<double>(w.n);
  const double mean = n * (n + 1.0) / 4.0;
  const double var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - sr.tie_term / 48.0;
  const double diff = w.w_plus - mean;
  const double corrected = std::max(0.0, std::abs(diff) - 0.5);
  w.z = var > 0.0 ? std::copysign(corrected / std::sqrt(var), diff) : 0.0;
  w.p_value = std::min(1.0, std::erfc(std::abs(w.z) / std::numbers::sqrt2));
  w.effect_r = std::abs(w.z) / std::sqrt(n);
  if (w.n <= kExactLimit) w.p_exact = exact_p(sr);
  return w;
}

double wilcoxon_exact_p(std::span<const double> a, std::span<const double> b) {
  const auto sr = signed_ranks(a, b);
  return exact_p(sr);
}

double rotation_error_deg(const RigidTransform& a, const RigidTransform& b) {
  return rotation_angle_between(a.rotation, b.rotation) * 180.0 / std::numbers::pi;
}

void write_records_csv(const std::filesystem::path& path, const std::vector<EvalRecord>& records) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.precision(10);
  os << "sample,method,landmark,tre,tre_mm,rmse,rmse_mm,rotation_deg,translation,seconds,failed\n";
  for (const auto& r : records)
    for (std::size_t i = 0; i < r.tre.size(); ++i)
      os << r.sample << ',' << r.method << ',' << i << ',' << r.tre[i] << ',' << r.tre_mm[i] << ',' << r.rmse
         << ',' << r.rmse_mm << ',' << r.rotation_deg << ',' << r.translation << ',' << r.seconds << ','
         << r.failed << '\n';
}

}  // namespace end2reg

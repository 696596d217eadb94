#pragma once

// Registration error metrics, robust summaries and the paired signed-rank test.

#include "end2reg/geometry.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace end2reg {

// e_i = |T_pred(p_i) - T_gt(p_i)| for landmarks p_i in the preoperative frame.
std::vector<double> tre(std::span<const Vec3> landmarks, const RigidTransform& t_pred,
                        const RigidTransform& t_gt);

// sqrt(mean |T_pred(p) - T_gt(p)|^2) over the preoperative points.
double rmse(std::span<const Vec3> points, const RigidTransform& t_pred, const RigidTransform& t_gt);

struct Summary {
  std::size_t n = 0;
  double median = 0, q1 = 0, q3 = 0, mean = 0, sd = 0;
  double outlier_rate = 0;  // share above Q3 + 1.5 IQR
};

// Quartiles by linear interpolation between order statistics; sample sd.
// Throws std::invalid_argument on an empty list.
Summary summarize(std::vector<double> values);
double quantile_sorted(std::span<const double> sorted, double q);

struct WilcoxonResult {
  std::size_t n = 0;      // pairs with a nonzero difference
  double w_plus = 0;      // rank sum of positive differences (b - a)
  double w_minus = 0;
  double z = 0;
  double p_value = 1;     // two-sided, normal approximation
  double p_exact = -1;    // two-sided exact null distribution; -1 when n > 50
  double effect_r = 0;    // |z| / sqrt(n)

  // Exact p when available, otherwise the normal approximation.
  double p_reported() const { return p_exact >= 0 ? p_exact : p_value; }
};

// Paired two-sided signed-rank test on b - a. Zero differences are dropped,
// tied |differences| get average ranks, the variance is tie-corrected and a
// 0.5 continuity correction is applied. Throws std::invalid_argument on
// unequal lengths, fewer than 6 nonzero differences, or all-zero differences.
WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b);

// Exact two-sided p-value under the signed-rank null (every sign pattern of
// the observed ranks equally likely), by dynamic programming over rank sums.
// Throws std::invalid_argument when n > 50 or as wilcoxon_signed_rank does.
double wilcoxon_exact_p(std::span<const double> a, std::span<const double> b);

struct EvalRecord {
  std::string sample;
  std::string method;
  std::vector<double> tre;      // unit-sphere units
  std::vector<double> tre_mm;
  double rmse = 0, rmse_mm = 0;
  double rotation_deg = 0, translation = 0;
  double seconds = 0;
  bool failed = false;
};

void write_records_csv(const std::filesystem::path& path, const std::vector<EvalRecord>& records);

// Rotation error in degrees between two rigid transforms.
double rotation_error_deg(const RigidTransform& a, const RigidTransform& b);

}  // namespace end2reg

#include "end2reg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace end2reg {

double relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double d = analytic[i] - numeric[i];
    diff += d * d;
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  const double denom = std::sqrt(std::max(na, nn));
  if (denom == 0.0) return 0.0;
  return std::sqrt(diff) / denom;
}

namespace {

std::vector<double> numeric_gradient(const std::function<double()>& f, Tensor& input, double h) {
  auto data = input.mutable_data();
  std::vector<double> out(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double saved = data[i];
    data[i] = saved + h;
    const double up = f();
    data[i] = saved - h;
    const double down = f();
    data[i] = saved;
    out[i] = (up - down) / (2.0 * h);
  }
  return out;
}

}  // namespace

GradCheckResult check_gradient(const std::string& name, const std::function<Tensor()>& loss,
                               std::vector<Tensor> inputs, double tolerance, double h) {
  GradCheckResult result{name, 0.0, tolerance, 0};
  for (auto& t : inputs) t.zero_grad();
  backward(loss());
  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) {
    analytic.emplace_back(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.back().begin());
  }
  auto value = [&] { return loss().item(); };
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const auto numeric = numeric_gradient(value, inputs[k], h);
    result.max_rel_error = std::max(result.max_rel_error, relative_error(analytic[k], numeric));
    result.coordinates += numeric.size();
  }
  return result;
}

GradCheckResult check_jacobian(const std::string& name, const std::function<Tensor()>& fn,
                               std::vector<Tensor> inputs, double tolerance, double h) {
  GradCheckResult result{name, 0.0, tolerance, 0};
  const std::size_t outputs = fn().numel();
  for (std::size_t o = 0; o < outputs; ++o) {
    std::vector<double> pick(outputs, 0.0);
    pick[o] = 1.0;
    auto component = [&] { return ops::weighted_sum(fn(), pick); };
    auto r = check_gradient(name, component, inputs, tolerance, h);
    result.max_rel_error = std::max(result.max_rel_error, r.max_rel_error);
    result.coordinates += r.coordinates;
  }
  return result;
}

Tensor random_tensor(Shape shape, unsigned long long seed, double lo, double hi,
                     bool requires_grad) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = u(rng);
  return Tensor::from(std::move(shape), std::move(data), requires_grad);
}

}  // namespace end2reg

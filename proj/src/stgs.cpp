#include "end2reg/stgs.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace end2reg {

Tensor sample_gumbel(std::size_t n, std::size_t c, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> g(n * c);
  for (auto& v : g) {
    const double x = std::clamp(u(rng), 1e-12, 1.0 - 1e-12);
    v = -std::log(-std::log(x));
  }
  return Tensor::from({n, c}, std::move(g));
}

Tensor gumbel_softmax(const Tensor& z, const Tensor& g, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("gumbel_softmax: tau must be positive");
  if (z.shape() != g.shape())
    throw ShapeError("gumbel_softmax: logits " + shape_str(z.shape()) + " vs noise " +
                     shape_str(g.shape()));
  return ops::softmax(ops::scale(ops::add(z, g), 1.0 / tau));
}

MaskSample straight_through_mask(const Tensor& z, const Tensor& g, double tau) {
  if (z.rank() != 2 || z.dim(1) != 2)
    throw ShapeError("straight_through_mask: expected N x 2 logits, got " + shape_str(z.shape()));
  MaskSample out;
  out.relaxed = gumbel_softmax(z, g, tau);
  const std::size_t n = z.dim(0);
  out.hard.resize(n);
  std::vector<double> hard(n);
  for (std::size_t j = 0; j < n; ++j) {
    // Ties go to class 0, matching argmax's first-index convention.
    const double s0 = z.at(j, 0) + g.at(j, 0);
    const double s1 = z.at(j, 1) + g.at(j, 1);
    out.hard[j] = s1 > s0 ? 1 : 0;
    hard[j] = out.hard[j];
  }
  out.mask = ops::straight_through(Tensor::from({n, 1}, std::move(hard)),
                                   ops::slice_cols(out.relaxed, 1, 2));
  return out;
}

MaskSample straight_through_mask(const Tensor& z, double tau, std::mt19937_64& rng) {
  return straight_through_mask(z, sample_gumbel(z.dim(0), 2, rng), tau);
}

double temperature_at(std::size_t step, std::size_t total_steps, double start, double end,
                      bool anneal) {
  if (!anneal || total_steps == 0) return start;
  const double half = 0.5 * static_cast<double>(total_steps);
  const double t = std::min(1.0, static_cast<double>(step) / half);
  return start + (end - start) * t;
}

}  // namespace end2reg

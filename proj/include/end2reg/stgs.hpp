#pragma once

// Straight-through Gumbel-Softmax for binary per-point masks.

#include "end2reg/tensor.hpp"

#include <random>
#include <vector>

namespace end2reg {

// Gumbel(0,1) noise, n x c. Uniform draws are clamped to [1e-12, 1 - 1e-12].
Tensor sample_gumbel(std::size_t n, std::size_t c, std::mt19937_64& rng);

// softmax((z + g) / tau) over the class axis. Differentiable w.r.t. z.
Tensor gumbel_softmax(const Tensor& z, const Tensor& g, double tau);

struct MaskSample {
  Tensor mask;             // N x 1, exactly 0/1 forward, d/dz of relaxed class-1 backward
  std::vector<int> hard;   // argmax(z + g) per row
  Tensor relaxed;          // N x 2 soft sample
};

// Draws fresh noise from rng.
MaskSample straight_through_mask(const Tensor& z, double tau, std::mt19937_64& rng);
// Uses the given noise (zeros gives the deterministic argmax(z) mask).
MaskSample straight_through_mask(const Tensor& z, const Tensor& g, double tau);

// Temperature at a training step: constant `start`, or linear start -> end over
// the first half of training when anneal is set.
double temperature_at(std::size_t step, std::size_t total_steps, double start, double end,
                      bool anneal);

}  // namespace end2reg

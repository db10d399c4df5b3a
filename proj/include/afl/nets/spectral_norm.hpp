#pragma once

#include <cstdint>
#include <vector>

#include "afl/tensor.hpp"

namespace afl::nets {

// Power-iteration estimate of the top singular pair of a weight viewed as a
// matrix of shape [dim 0, product of remaining dims].
struct SpectralNormState {
  std::vector<double> u;
  std::vector<double> v;
  int n_power_iters = 1;
  double sigma = 0.0;
};

SpectralNormState make_sn_state(const Shape& weight_shape, uint64_t seed, int n_power_iters);

// Runs state.n_power_iters iterations, updating u, v and sigma in place, and
// returns sigma. Throws Error on an all-zero weight.
double power_iterate(const Tensor& weight, SpectralNormState& state);

struct Normalized {
  Tensor weight;
  double sigma = 0.0;
};

// weight / sigma with sigma from power iteration.
Normalized spectral_normalize(const Tensor& weight, SpectralNormState& state);

// u v^T laid out like the weight, so that sum(weight * mask) = u^T W v.
Tensor sn_mask(const Shape& weight_shape, const SpectralNormState& state);

}  // namespace afl::nets

#pragma once

#include <cstdint>
#include <numbers>

#include "afl/rng.hpp"
#include "afl/tensor.hpp"
#include "afl/training/trainer.hpp"

namespace afl::eval {

struct SwissRollParams {
  double t_min = 1.5 * std::numbers::pi;
  double t_max = 4.5 * std::numbers::pi;
  double scale = 1.0 / (4.5 * std::numbers::pi);
  double noise_sigma = 0.03;

  void validate() const;
};

// Noise-free point at angle t: scale * (t cos t, t sin t).
Tensor swiss_roll_point(double t, const SwissRollParams& p = {});
// [n, 2], t ~ U[t_min, t_max] plus isotropic Gaussian noise.
Tensor sample_swiss_roll(int64_t n, const SwissRollParams& p, Rng& rng);
Tensor sample_swiss_roll(int64_t n, const SwissRollParams& p, uint64_t seed);
training::Sampler swiss_roll_sampler(SwissRollParams p = {});

// Synthetic RGB images in [-1, 1]: a filled disc or square of random colour,
// size and position on a dark background. [n, 3, size, size].
Tensor sample_shapes(int64_t n, int64_t size, Rng& rng);
training::Sampler shapes_sampler(int64_t size);

}  // namespace afl::eval

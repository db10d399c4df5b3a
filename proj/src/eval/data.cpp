#include "afl/eval/data.hpp"

#include <cmath>

#include "afl/error.hpp"

namespace afl::eval {

void SwissRollParams::validate() const {
  if (!(t_min < t_max)) throw ConfigError("swiss roll needs t_min < t_max");
  if (!(scale > 0.0)) throw ConfigError("swiss roll scale must be positive");
  if (!(noise_sigma >= 0.0)) throw ConfigError("swiss roll noise must be non-negative");
}

Tensor swiss_roll_point(double t, const SwissRollParams& p) {
  return Tensor({2}, {p.scale * t * std::cos(t), p.scale * t * std::sin(t)});
}

Tensor sample_swiss_roll(int64_t n, const SwissRollParams& p, Rng& rng) {
  p.validate();
  if (n <= 0) throw ShapeError("sample count must be positive");
  Tensor out({n, 2});
  for (int64_t i = 0; i < n; ++i) {
    const double t = rng.uniform(p.t_min, p.t_max);
    const double nx = rng.normal(), ny = rng.normal();
    out[2 * i] = p.scale * t * std::cos(t) + p.noise_sigma * nx;
    out[2 * i + 1] = p.scale * t * std::sin(t) + p.noise_sigma * ny;
  }
  return out;
}

Tensor sample_swiss_roll(int64_t n, const SwissRollParams& p, uint64_t seed) {
  Rng rng(seed, "swiss_roll");
  return sample_swiss_roll(n, p, rng);
}

training::Sampler swiss_roll_sampler(SwissRollParams p) {
  p.validate();
  return [p](Rng& rng, int64_t n) { return sample_swiss_roll(n, p, rng); };
}

Tensor sample_shapes(int64_t n, int64_t size, Rng& rng) {
  if (n <= 0 || size < 4) throw ShapeError("shapes need n > 0 and size >= 4");
  Tensor out({n, 3, size, size}, -0.8);
  const int64_t plane = size * size;
  for (int64_t i = 0; i < n; ++i) {
    const bool disc = rng.uniform() < 0.5;
    const double r = rng.uniform(0.15, 0.35) * size;
    const double cx = rng.uniform(r, size - r), cy = rng.uniform(r, size - r);
    double colour[3];
    for (double& c : colour) c = rng.uniform(-0.2, 1.0);
    for (int64_t y = 0; y < size; ++y)
      for (int64_t x = 0; x < size; ++x) {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        const bool inside = disc ? dx * dx + dy * dy <= r * r : std::abs(dx) <= r && std::abs(dy) <= r;
        if (!inside) continue;
        for (int c = 0; c < 3; ++c) out[(i * 3 + c) * plane + y * size + x] = colour[c];
      }
  }
  return out;
}

training::Sampler shapes_sampler(int64_t size) {
  return [size](Rng& rng, int64_t n) { return sample_shapes(n, size, rng); };
}

}  // namespace afl::eval

#include "afl/nets/spectral_norm.hpp"

#include <algorithm>
#include <cmath>

#include "afl/error.hpp"
#include "afl/rng.hpp"

namespace afl::nets {

namespace {

double normalize(std::vector<double>& x) {
  double s = 0.0;
  for (double e : x) s += e * e;
  const double n = std::sqrt(s);
  if (n == 0.0) return 0.0;
  for (double& e : x) e /= n;
  return n;
}

}  // namespace

SpectralNormState make_sn_state(const Shape& weight_shape, uint64_t seed, int n_power_iters) {
  if (weight_shape.size() < 2) throw ShapeError("spectral norm needs a weight of rank >= 2");
  if (n_power_iters < 1) throw ConfigError("spectral norm needs at least one power iteration");
  const int64_t rows = weight_shape[0];
  const int64_t cols = shape_numel(weight_shape) / rows;
  SpectralNormState st;
  st.n_power_iters = n_power_iters;
  Rng rng(seed, "spectral_norm");
  st.u.resize(static_cast<std::size_t>(rows));
  for (double& e : st.u) e = rng.normal();
  normalize(st.u);
  st.v.assign(static_cast<std::size_t>(cols), 0.0);
  return st;
}

double power_iterate(const Tensor& weight, SpectralNormState& st) {
  const int64_t rows = weight.dim(0);
  const int64_t cols = static_cast<int64_t>(weight.size()) / rows;
  if (static_cast<int64_t>(st.u.size()) != rows) throw ShapeError("spectral norm state does not match weight");
  st.v.assign(static_cast<std::size_t>(cols), 0.0);
  const double* w = weight.ptr();
  std::vector<double> wv(static_cast<std::size_t>(rows));
  for (int it = 0; it < st.n_power_iters; ++it) {
    std::fill(st.v.begin(), st.v.end(), 0.0);
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t c = 0; c < cols; ++c) st.v[c] += w[r * cols + c] * st.u[r];
    if (normalize(st.v) == 0.0) throw Error("spectral norm undefined for a zero weight");
    for (int64_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (int64_t c = 0; c < cols; ++c) s += w[r * cols + c] * st.v[c];
      wv[r] = s;
    }
    st.u = wv;
    normalize(st.u);
  }
  double sigma = 0.0;
  for (int64_t r = 0; r < rows; ++r) sigma += st.u[r] * wv[r];
  st.sigma = sigma;
  return sigma;
}

Normalized spectral_normalize(const Tensor& weight, SpectralNormState& state) {
  Normalized out;
  out.sigma = power_iterate(weight, state);
  out.weight = weight;
  for (double& e : out.weight.values()) e /= out.sigma;
  return out;
}

Tensor sn_mask(const Shape& weight_shape, const SpectralNormState& st) {
  Tensor m(weight_shape);
  const int64_t rows = weight_shape[0];
  const int64_t cols = static_cast<int64_t>(m.size()) / rows;
  if (static_cast<int64_t>(st.u.size()) != rows || static_cast<int64_t>(st.v.size()) != cols) {
    throw ShapeError("spectral norm state does not match weight " + shape_str(weight_shape));
  }
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) m[r * cols + c] = st.u[r] * st.v[c];
  return m;
}

}  // namespace afl::nets

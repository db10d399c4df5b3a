#include "afl/eval/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "afl/error.hpp"
#include "afl/rng.hpp"

namespace afl::eval {

namespace {

struct Cloud {
  const double* data;
  int64_t n;
  int64_t dim;
  const double* row(int64_t i) const { return data + i * dim; }
};

Cloud view(const Tensor& t) {
  if (t.shape().empty() || t.dim(0) < 1) throw ShapeError("point cloud must be non-empty");
  const int64_t n = t.dim(0);
  return {t.values().data(), n, static_cast<int64_t>(t.size()) / n};
}

void same_dim(const Cloud& a, const Cloud& b) {
  if (a.dim != b.dim) {
    throw ShapeError("point clouds differ in dimension: " + std::to_string(a.dim) + " vs " + std::to_string(b.dim));
  }
}

double sq_dist(const double* x, const double* y, int64_t d) {
  double s = 0.0;
  for (int64_t k = 0; k < d; ++k) {
    const double t = x[k] - y[k];
    s += t * t;
  }
  return s;
}

// Mean of |x - y| over all pairs.
double mean_distance(const Cloud& a, const Cloud& b) {
  double total = 0.0;
  if (a.dim == 2) {
    for (int64_t i = 0; i < a.n; ++i) {
      const double x0 = a.data[2 * i], x1 = a.data[2 * i + 1];
      double row = 0.0;
      for (int64_t j = 0; j < b.n; ++j) {
        const double d0 = x0 - b.data[2 * j], d1 = x1 - b.data[2 * j + 1];
        row += std::sqrt(d0 * d0 + d1 * d1);
      }
      total += row;
    }
  } else {
    for (int64_t i = 0; i < a.n; ++i) {
      double row = 0.0;
      for (int64_t j = 0; j < b.n; ++j) row += std::sqrt(sq_dist(a.row(i), b.row(j), a.dim));
      total += row;
    }
  }
  return total / (static_cast<double>(a.n) * static_cast<double>(b.n));
}

double mean_kernel(const Cloud& a, const Cloud& b, double inv2h2) {
  double total = 0.0;
  for (int64_t i = 0; i < a.n; ++i) {
    double row = 0.0;
    for (int64_t j = 0; j < b.n; ++j) row += std::exp(-sq_dist(a.row(i), b.row(j), a.dim) * inv2h2);
    total += row;
  }
  return total / (static_cast<double>(a.n) * static_cast<double>(b.n));
}

double finish_energy(double cross, double self_a, double self_b) {
  return std::sqrt(std::max(0.0, 2.0 * cross - self_a - self_b));
}

}  // namespace

double energy_distance(const Tensor& a, const Tensor& b) {
  const Cloud ca = view(a), cb = view(b);
  same_dim(ca, cb);
  return finish_energy(mean_distance(ca, cb), mean_distance(ca, ca), mean_distance(cb, cb));
}

EnergyReference::EnergyReference(Tensor reference) : ref_(std::move(reference)) {
  const Cloud c = view(ref_);
  self_ = mean_distance(c, c);
}

double EnergyReference::distance(const Tensor& a) const {
  const Cloud ca = view(a), cr = view(ref_);
  same_dim(ca, cr);
  return finish_energy(mean_distance(ca, cr), mean_distance(ca, ca), self_);
}

double mmd_rbf(const Tensor& a, const Tensor& b, double bandwidth) {
  if (!(bandwidth > 0.0)) throw ConfigError("mmd bandwidth must be positive");
  const Cloud ca = view(a), cb = view(b);
  same_dim(ca, cb);
  const double inv = 1.0 / (2.0 * bandwidth * bandwidth);
  const double v = mean_kernel(ca, ca, inv) + mean_kernel(cb, cb, inv) - 2.0 * mean_kernel(ca, cb, inv);
  return std::max(0.0, v);
}

double median_bandwidth(const Tensor& a, const Tensor& b) {
  const Cloud ca = view(a), cb = view(b);
  same_dim(ca, cb);
  std::vector<const double*> pts;
  for (const Cloud* c : {&ca, &cb}) {
    const int64_t stride = std::max<int64_t>(1, c->n / 1000);
    for (int64_t i = 0; i < c->n && (i / stride) < 1000; i += stride) pts.push_back(c->row(i));
  }
  std::vector<double> d;
  d.reserve(pts.size() * (pts.size() - 1) / 2);
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t j = i + 1; j < pts.size(); ++j) d.push_back(std::sqrt(sq_dist(pts[i], pts[j], ca.dim)));
  if (d.empty()) return 1.0;
  auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  return *mid > 0.0 ? *mid : 1.0;
}

double wasserstein_1d(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw ShapeError("wasserstein needs non-empty samples");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  if (a.size() == b.size()) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
    return s / static_cast<double>(a.size());
  }
  // integral of |F_a - F_b| over the merged support
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double total = 0.0, prev = std::min(a[0], b[0]);
  while (i < a.size() || j < b.size()) {
    const double x = (j >= b.size() || (i < a.size() && a[i] <= b[j])) ? a[i] : b[j];
    total += std::abs(i / na - j / nb) * (x - prev);
    prev = x;
    while (i < a.size() && a[i] == x) ++i;
    while (j < b.size() && b[j] == x) ++j;
  }
  return total;
}

double sliced_wasserstein(const Tensor& a, const Tensor& b, const Tensor& directions) {
  const Cloud ca = view(a), cb = view(b), cd = view(directions);
  same_dim(ca, cb);
  same_dim(ca, cd);
  double total = 0.0;
  std::vector<double> pa(ca.n), pb(cb.n);
  for (int64_t k = 0; k < cd.n; ++k) {
    const double* u = cd.row(k);
    for (int64_t i = 0; i < ca.n; ++i) {
      double s = 0.0;
      for (int64_t q = 0; q < ca.dim; ++q) s += ca.row(i)[q] * u[q];
      pa[i] = s;
    }
    for (int64_t i = 0; i < cb.n; ++i) {
      double s = 0.0;
      for (int64_t q = 0; q < cb.dim; ++q) s += cb.row(i)[q] * u[q];
      pb[i] = s;
    }
    total += wasserstein_1d(pa, pb);
  }
  return total / static_cast<double>(cd.n);
}

double sliced_wasserstein(const Tensor& a, const Tensor& b, int n_projections, uint64_t seed) {
  if (n_projections < 1) throw ConfigError("sliced wasserstein needs at least one projection");
  const Cloud ca = view(a);
  Rng rng(seed, "sliced_wasserstein");
  Tensor dirs({n_projections, ca.dim});
  for (int k = 0; k < n_projections; ++k) {
    double norm = 0.0;
    do {
      norm = 0.0;
      for (int64_t q = 0; q < ca.dim; ++q) {
        dirs[k * ca.dim + q] = rng.normal();
        norm += dirs[k * ca.dim + q] * dirs[k * ca.dim + q];
      }
    } while (norm == 0.0);
    norm = std::sqrt(norm);
    for (int64_t q = 0; q < ca.dim; ++q) dirs[k * ca.dim + q] /= norm;
  }
  return sliced_wasserstein(a, b, dirs);
}

double mean_paired_distance(const Tensor& a, const Tensor& b) {
  const Cloud ca = view(a), cb = view(b);
  same_dim(ca, cb);
  if (ca.n != cb.n) throw ShapeError("paired distance needs equally sized clouds");
  double s = 0.0;
  for (int64_t i = 0; i < ca.n; ++i) s += std::sqrt(sq_dist(ca.row(i), cb.row(i), ca.dim));
  return s / static_cast<double>(ca.n);
}

double mean_nearest_distance(const Tensor& a, const Tensor& ref) {
  const Cloud ca = view(a), cr = view(ref);
  same_dim(ca, cr);
  if (ca.n == 0 || cr.n == 0) throw ShapeError("nearest distance needs non-empty clouds");
  double s = 0.0;
  for (int64_t i = 0; i < ca.n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < cr.n; ++j) best = std::min(best, sq_dist(ca.row(i), cr.row(j), ca.dim));
    s += std::sqrt(best);
  }
  return s / static_cast<double>(ca.n);
}

Metrics compare(const Tensor& a, const EnergyReference& ref, uint64_t seed) {
  return {ref.distance(a), mmd_rbf(a, ref.reference(), median_bandwidth(a, ref.reference())),
          sliced_wasserstein(a, ref.reference(), kSlicedProjections, seed)};
}

}  // namespace afl::eval

#pragma once

#include <cstdint>
#include <vector>

#include "afl/tensor.hpp"

namespace afl::eval {

// Point clouds are [n, ...] tensors; trailing dims are flattened.

// sqrt(2 E|a-b| - E|a-a'| - E|b-b'|), all pairs including i = j.
double energy_distance(const Tensor& a, const Tensor& b);

// Energy distance against a fixed cloud whose within-cloud term is computed
// once.
class EnergyReference {
 public:
  explicit EnergyReference(Tensor reference);
  double distance(const Tensor& a) const;
  const Tensor& reference() const { return ref_; }

 private:
  Tensor ref_;
  double self_ = 0.0;
};

// Biased squared MMD with k(x, y) = exp(-|x-y|^2 / (2 h^2)), clipped at 0.
double mmd_rbf(const Tensor& a, const Tensor& b, double bandwidth);
// Median pairwise distance of the pooled clouds (at most 1000 points of each,
// taken at a fixed stride).
double median_bandwidth(const Tensor& a, const Tensor& b);

// Mean over directions of the 1-D Wasserstein-1 distance between projections.
double sliced_wasserstein(const Tensor& a, const Tensor& b, int n_projections, uint64_t seed);
// Same with explicit unit directions, [k, dim].
double sliced_wasserstein(const Tensor& a, const Tensor& b, const Tensor& directions);
// Wasserstein-1 between two 1-D empirical distributions.
double wasserstein_1d(std::vector<double> a, std::vector<double> b);

// mean_i |a_i - b_i| for equally sized clouds.
double mean_paired_distance(const Tensor& a, const Tensor& b);

// mean_i min_j |a_i - ref_j|: how far a cloud sits from a reference cloud.
double mean_nearest_distance(const Tensor& a, const Tensor& ref);

inline constexpr int kSlicedProjections = 64;

struct Metrics {
  double energy_distance = 0.0;
  double mmd_rbf = 0.0;
  double sliced_wasserstein = 0.0;
};

// All three metrics of `a` against the reference cloud; the MMD bandwidth is
// the median heuristic of the pair.
Metrics compare(const Tensor& a, const EnergyReference& ref, uint64_t seed);

}  // namespace afl::eval

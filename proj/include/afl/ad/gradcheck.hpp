#pragma once

#include <map>
#include <string>

#include "afl/ad/graph.hpp"

namespace afl::ad {

struct GradCheckReport {
  bool passed = false;
  double max_rel_error = 0.0;
  std::string worst_leaf;
  std::size_t worst_index = 0;
};

// Central differences of a one-element loss with respect to every bound leaf
// that requires grad.
std::map<std::string, Tensor> numeric_gradients(const Graph& graph, NodeId loss, const Bindings& point,
                                                double h = 1e-6);

// Relative error is |a - n| / max(|a|, |n|, floor).
GradCheckReport compare_gradients(const std::map<std::string, Tensor>& analytic,
                                  const std::map<std::string, Tensor>& numeric, double tol, double floor = 1e-5);

// backward() against central differences (h = 1e-6) at `point`.
GradCheckReport finite_diff_check(const Graph& graph, NodeId loss, const Bindings& point, double tol);

}  // namespace afl::ad

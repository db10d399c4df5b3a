#include "afl/ad/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "afl/error.hpp"

namespace afl::ad {

std::map<std::string, Tensor> numeric_gradients(const Graph& graph, NodeId loss, const Bindings& point, double h) {
  std::map<std::string, Tensor> out;
  Bindings work = point;
  for (const auto& node : graph.nodes()) {
    if (!is_leaf(node.op) || !node.requires_grad) continue;
    auto it = work.find(node.name);
    if (it == work.end()) continue;
    Tensor& x = it->second;
    Tensor grad(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double saved = x[i];
      x[i] = saved + h;
      const double up = forward(graph, work, {loss}).value(loss).item();
      x[i] = saved - h;
      const double down = forward(graph, work, {loss}).value(loss).item();
      x[i] = saved;
      grad[i] = (up - down) / (2.0 * h);
    }
    out.emplace(node.name, std::move(grad));
  }
  return out;
}

GradCheckReport compare_gradients(const std::map<std::string, Tensor>& analytic,
                                  const std::map<std::string, Tensor>& numeric, double tol, double floor) {
  GradCheckReport r;
  for (const auto& [name, n] : numeric) {
    auto it = analytic.find(name);
    if (it == analytic.end() || !it->second.same_shape(n)) {
      r.max_rel_error = INFINITY;
      r.worst_leaf = name;
      continue;
    }
    const Tensor& a = it->second;
    for (std::size_t i = 0; i < n.size(); ++i) {
      const double err = std::abs(a[i] - n[i]) / std::max({std::abs(a[i]), std::abs(n[i]), floor});
      if (!(err <= r.max_rel_error)) {
        r.max_rel_error = err;
        r.worst_leaf = name;
        r.worst_index = i;
      }
    }
  }
  r.passed = r.max_rel_error < tol;
  return r;
}

GradCheckReport finite_diff_check(const Graph& graph, NodeId loss, const Bindings& point, double tol) {
  if (!(tol > 0)) throw Error("finite_diff_check: tolerance must be positive");
  auto ev = forward(graph, point, {loss});
  auto analytic = backward(ev, loss);
  auto numeric = numeric_gradients(graph, loss, point);
  return compare_gradients(analytic.by_name(), numeric, tol);
}

}  // namespace afl::ad

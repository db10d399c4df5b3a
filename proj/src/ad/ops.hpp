#pragma once

#include <span>
#include <string>
#include <vector>

#include "afl/ad/graph.hpp"

namespace afl::ad::detail {

std::string node_label(const Graph& graph, NodeId id);

// Forward kernel of one non-leaf node. Throws ShapeError mentioning `label`.
Tensor evaluate(const Node& node, std::span<const Tensor* const> inputs, NodeAux& aux, const std::string& label);

// Gradient contributions of one node to its parents. `wanted[i]` says whether
// parent i needs a gradient; results for other parents are left empty.
std::vector<Tensor> vjp(const Node& node, std::span<const Tensor* const> inputs, const Tensor& output,
                        const NodeAux& aux, const Tensor& grad, const std::vector<bool>& wanted);

bool is_scalar_like(const Tensor& t);

}  // namespace afl::ad::detail

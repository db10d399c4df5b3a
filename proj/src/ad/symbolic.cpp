#include <optional>

#include "afl/ad/graph.hpp"
#include "afl/error.hpp"
#include "ops.hpp"

namespace afl::ad {

namespace {

// Builds the gradient contribution of `self` to parent `k` as graph nodes.
std::optional<NodeId> symbolic_vjp(Graph& g, NodeId self, std::size_t k, NodeId gy) {
  const Node node = g.node(self);  // copy: the node vector grows below
  const NodeId a = node.parents.size() > 0 ? node.parents[0] : NodeId{};
  const NodeId b = node.parents.size() > 1 ? node.parents[1] : NodeId{};
  switch (node.op) {
    case Op::kMatMul:
      return k == 0 ? g.matmul(gy, g.transpose(b)) : g.matmul(g.transpose(a), gy);
    case Op::kAdd:
      return g.sum_like(gy, k == 0 ? a : b);
    case Op::kSub:
      return k == 0 ? g.sum_like(gy, a) : g.sum_like(g.scale(gy, -1.0), b);
    case Op::kMul:
      return k == 0 ? g.sum_like(g.mul(gy, b), a) : g.sum_like(g.mul(gy, a), b);
    case Op::kDiv:
      if (k == 0) return g.sum_like(g.div(gy, b), a);
      return g.sum_like(g.scale(g.div(g.mul(gy, self), b), -1.0), b);
    case Op::kAffine:
      return g.scale(gy, node.attrs.a);
    case Op::kAddRow:
      return k == 0 ? gy : g.sum_rows(gy);
    case Op::kSumRows:
      return g.broadcast_rows(gy, a);
    case Op::kBroadcastRows:
      if (k == 0) return g.sum_rows(gy);
      return std::nullopt;
    case Op::kConcat:
      return k == 0 ? g.slice_like(gy, a, false) : g.slice_like(gy, b, true);
    case Op::kSliceLike:
      if (k == 0) return g.pad_like(gy, a, node.attrs.flag);
      return std::nullopt;
    case Op::kPadLike:
      if (k == 0) return g.slice_like(gy, a, node.attrs.flag);
      return std::nullopt;
    case Op::kSumLike:
      if (k == 0) return g.broadcast(gy, a);
      return std::nullopt;
    case Op::kTanh:
      return g.mul(gy, g.affine(g.square(self), -1.0, 1.0));
    case Op::kSigmoid:
      return g.mul(gy, g.mul(self, g.affine(self, -1.0, 1.0)));
    case Op::kSoftplus:
      return g.mul(gy, g.sigmoid(a));
    case Op::kRelu:
      return g.relu_mask(gy, a);
    case Op::kLeakyRelu:
      return g.leaky_mask(gy, a, node.attrs.a);
    case Op::kReluMask:
      if (k == 0) return g.relu_mask(gy, b);
      return std::nullopt;
    case Op::kLeakyMask:
      if (k == 0) return g.leaky_mask(gy, b, node.attrs.a);
      return std::nullopt;
    case Op::kSquare:
      return g.mul(gy, g.scale(a, 2.0));
    case Op::kInvOrZero:
      return g.mul(gy, g.scale(g.square(self), -1.0));
    case Op::kMean:
      return g.broadcast_mean(gy, a);
    case Op::kSum:
      return g.broadcast(gy, a);
    case Op::kNorm2:
      return g.mul(a, g.broadcast(g.mul(gy, g.inv_or_zero(self)), a));
    case Op::kRowNorm:
      return g.mul(a, g.expand_rows(g.mul(gy, g.inv_or_zero(self)), a));
    case Op::kRowSum:
      return g.expand_rows(gy, a);
    case Op::kExpandRows:
      if (k == 0) return g.row_sum(gy);
      return std::nullopt;
    case Op::kBroadcast:
      if (k == 0) return g.sum_like(gy, a);
      return std::nullopt;
    case Op::kBroadcastMean:
      if (k == 0) return g.mean(gy);
      return std::nullopt;
    case Op::kTranspose:
      return g.transpose(gy);
    case Op::kReshape:
    case Op::kReshapeLike:
      if (k == 0) return g.reshape_like(gy, a);
      return std::nullopt;
    default:
      throw UnsupportedError("op '" + std::string(op_name(node.op)) + "' at node '" +
                             detail::node_label(g, self) + "' is not supported for double backprop");
  }
}

}  // namespace

NodeId gradient_graph(Graph& graph, NodeId y, NodeId x) {
  const std::size_t n = graph.size();
  if (!y.valid() || !x.valid() || static_cast<std::size_t>(y.index) >= n || x.index > y.index) {
    if (x.valid() && y.valid() && x.index > y.index) {
      return graph.broadcast(graph.constant(Tensor::scalar(0.0)), x);
    }
    throw Error("gradient_graph: invalid node ids");
  }
  std::vector<bool> from_x(n, false), to_y(n, false);
  from_x[static_cast<std::size_t>(x.index)] = true;
  for (std::size_t i = static_cast<std::size_t>(x.index) + 1; i < n; ++i) {
    for (auto p : graph.node(NodeId{static_cast<int32_t>(i)}).parents) {
      if (from_x[static_cast<std::size_t>(p.index)]) {
        from_x[i] = true;
        break;
      }
    }
  }
  to_y[static_cast<std::size_t>(y.index)] = true;
  for (std::size_t i = static_cast<std::size_t>(y.index) + 1; i-- > 0;) {
    if (!to_y[i]) continue;
    for (auto p : graph.node(NodeId{static_cast<int32_t>(i)}).parents) to_y[static_cast<std::size_t>(p.index)] = true;
  }
  auto relevant = [&](NodeId id) {
    const auto i = static_cast<std::size_t>(id.index);
    return from_x[i] && to_y[i];
  };
  if (!relevant(y)) return graph.broadcast(graph.constant(Tensor::scalar(0.0)), x);

  std::vector<std::optional<NodeId>> grads(n);
  grads[static_cast<std::size_t>(y.index)] = graph.broadcast(graph.constant(Tensor::scalar(1.0)), y);
  for (int32_t i = y.index; i > x.index; --i) {
    const NodeId self{i};
    auto gy = grads[static_cast<std::size_t>(i)];
    if (!gy || !relevant(self)) continue;
    const std::vector<NodeId> parents = graph.node(self).parents;
    for (std::size_t k = 0; k < parents.size(); ++k) {
      if (!relevant(parents[k])) continue;
      auto contribution = symbolic_vjp(graph, self, k, *gy);
      if (!contribution) continue;
      auto& slot = grads[static_cast<std::size_t>(parents[k].index)];
      slot = slot ? graph.add(*slot, *contribution) : *contribution;
    }
  }
  auto gx = grads[static_cast<std::size_t>(x.index)];
  return gx ? *gx : graph.broadcast(graph.constant(Tensor::scalar(0.0)), x);
}

}  // namespace afl::ad

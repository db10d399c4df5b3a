#include "afl/ad/graph.hpp"

#include <algorithm>

#include "afl/error.hpp"
#include "ops.hpp"

namespace afl::ad {

std::string_view op_name(Op op) {
  switch (op) {
    case Op::kInput: return "input";
    case Op::kParam: return "param";
    case Op::kConstant: return "constant";
    case Op::kMatMul: return "matmul";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kAffine: return "affine";
    case Op::kAddRow: return "add_row";
    case Op::kSumRows: return "sum_rows";
    case Op::kBroadcastRows: return "broadcast_rows";
    case Op::kConcat: return "concat";
    case Op::kSliceLike: return "slice_like";
    case Op::kPadLike: return "pad_like";
    case Op::kSumLike: return "sum_like";
    case Op::kTanh: return "tanh";
    case Op::kSigmoid: return "sigmoid";
    case Op::kSoftplus: return "softplus";
    case Op::kRelu: return "relu";
    case Op::kLeakyRelu: return "leaky_relu";
    case Op::kReluMask: return "relu_mask";
    case Op::kLeakyMask: return "leaky_mask";
    case Op::kSquare: return "square";
    case Op::kInvOrZero: return "inv_or_zero";
    case Op::kMean: return "mean";
    case Op::kSum: return "sum";
    case Op::kNorm2: return "norm2";
    case Op::kRowNorm: return "row_norm";
    case Op::kRowSum: return "row_sum";
    case Op::kExpandRows: return "expand_rows";
    case Op::kBroadcast: return "broadcast";
    case Op::kBroadcastMean: return "broadcast_mean";
    case Op::kTranspose: return "transpose";
    case Op::kReshape: return "reshape";
    case Op::kReshapeLike: return "reshape_like";
    case Op::kConv2d: return "conv2d";
    case Op::kConv2dTranspose: return "conv2d_transpose";
    case Op::kAddChannelBias: return "add_channel_bias";
    case Op::kBatchNorm: return "batch_norm";
    case Op::kUpsampleNearest: return "upsample_nearest";
  }
  return "unknown";
}

bool is_leaf(Op op) { return op == Op::kInput || op == Op::kParam || op == Op::kConstant; }

bool is_double_differentiable(Op op) {
  switch (op) {
    case Op::kConv2d:
    case Op::kConv2dTranspose:
    case Op::kAddChannelBias:
    case Op::kBatchNorm:
    case Op::kUpsampleNearest:
      return false;
    default:
      return true;
  }
}

void Graph::check(NodeId id) const {
  if (!id.valid() || static_cast<std::size_t>(id.index) >= nodes_.size()) {
    throw Error("node id " + std::to_string(id.index) + " does not belong to this graph");
  }
}

NodeId Graph::push(Op op, std::vector<NodeId> parents, Attrs attrs) {
  Node n;
  n.op = op;
  n.attrs = std::move(attrs);
  for (auto p : parents) {
    check(p);
    n.needs_grad = n.needs_grad || node(p).needs_grad;
  }
  n.parents = std::move(parents);
  nodes_.push_back(std::move(n));
  return NodeId{static_cast<int32_t>(nodes_.size() - 1)};
}

NodeId Graph::input(const std::string& name, bool requires_grad) {
  if (by_name_.count(name)) throw Error("duplicate graph node name '" + name + "'");
  auto id = push(Op::kInput, {});
  auto& n = nodes_.back();
  n.name = name;
  n.requires_grad = requires_grad;
  n.needs_grad = requires_grad;
  by_name_[name] = id;
  return id;
}

NodeId Graph::param(const std::string& name) {
  if (auto it = by_name_.find(name); it != by_name_.end()) {
    if (node(it->second).op != Op::kParam) throw Error("node '" + name + "' exists and is not a parameter");
    return it->second;
  }
  auto id = push(Op::kParam, {});
  auto& n = nodes_.back();
  n.name = name;
  n.requires_grad = true;
  n.needs_grad = true;
  by_name_[name] = id;
  return id;
}

NodeId Graph::constant(Tensor value, const std::string& name) {
  auto id = push(Op::kConstant, {});
  nodes_.back().constant = std::move(value);
  if (!name.empty()) set_name(id, name);
  return id;
}

NodeId Graph::matmul(NodeId a, NodeId b) { return push(Op::kMatMul, {a, b}); }
NodeId Graph::add(NodeId a, NodeId b) { return push(Op::kAdd, {a, b}); }
NodeId Graph::sub(NodeId a, NodeId b) { return push(Op::kSub, {a, b}); }
NodeId Graph::mul(NodeId a, NodeId b) { return push(Op::kMul, {a, b}); }
NodeId Graph::div(NodeId a, NodeId b) { return push(Op::kDiv, {a, b}); }
NodeId Graph::affine(NodeId x, double a, double b) {
  Attrs at;
  at.a = a;
  at.b = b;
  return push(Op::kAffine, {x}, at);
}
NodeId Graph::add_row(NodeId x, NodeId v) { return push(Op::kAddRow, {x, v}); }
NodeId Graph::sum_rows(NodeId x) { return push(Op::kSumRows, {x}); }
NodeId Graph::broadcast_rows(NodeId v, NodeId like) { return push(Op::kBroadcastRows, {v, like}); }
NodeId Graph::concat(NodeId a, NodeId b) { return push(Op::kConcat, {a, b}); }
NodeId Graph::slice_like(NodeId x, NodeId like, bool from_end) {
  Attrs at;
  at.flag = from_end;
  return push(Op::kSliceLike, {x, like}, at);
}
NodeId Graph::pad_like(NodeId x, NodeId like, bool from_end) {
  Attrs at;
  at.flag = from_end;
  return push(Op::kPadLike, {x, like}, at);
}
NodeId Graph::sum_like(NodeId x, NodeId like) { return push(Op::kSumLike, {x, like}); }
NodeId Graph::tanh(NodeId x) { return push(Op::kTanh, {x}); }
NodeId Graph::sigmoid(NodeId x) { return push(Op::kSigmoid, {x}); }
NodeId Graph::softplus(NodeId x) { return push(Op::kSoftplus, {x}); }
NodeId Graph::relu(NodeId x) { return push(Op::kRelu, {x}); }
NodeId Graph::leaky_relu(NodeId x, double slope) {
  Attrs at;
  at.a = slope;
  return push(Op::kLeakyRelu, {x}, at);
}
NodeId Graph::relu_mask(NodeId g, NodeId x) { return push(Op::kReluMask, {g, x}); }
NodeId Graph::leaky_mask(NodeId g, NodeId x, double slope) {
  Attrs at;
  at.a = slope;
  return push(Op::kLeakyMask, {g, x}, at);
}
NodeId Graph::square(NodeId x) { return push(Op::kSquare, {x}); }
NodeId Graph::inv_or_zero(NodeId x) { return push(Op::kInvOrZero, {x}); }
NodeId Graph::mean(NodeId x) { return push(Op::kMean, {x}); }
NodeId Graph::sum(NodeId x) { return push(Op::kSum, {x}); }
NodeId Graph::norm2(NodeId x) { return push(Op::kNorm2, {x}); }
NodeId Graph::row_norm(NodeId x) { return push(Op::kRowNorm, {x}); }
NodeId Graph::row_sum(NodeId x) { return push(Op::kRowSum, {x}); }
NodeId Graph::expand_rows(NodeId r, NodeId like) { return push(Op::kExpandRows, {r, like}); }
NodeId Graph::broadcast(NodeId s, NodeId like) { return push(Op::kBroadcast, {s, like}); }
NodeId Graph::broadcast_mean(NodeId s, NodeId like) { return push(Op::kBroadcastMean, {s, like}); }
NodeId Graph::transpose(NodeId x) { return push(Op::kTranspose, {x}); }
NodeId Graph::reshape(NodeId x, Shape shape) {
  Attrs at;
  at.shape = std::move(shape);
  return push(Op::kReshape, {x}, at);
}
NodeId Graph::reshape_like(NodeId x, NodeId like) { return push(Op::kReshapeLike, {x, like}); }
NodeId Graph::conv2d(NodeId x, NodeId w, int64_t stride, int64_t padding) {
  Attrs at;
  at.i0 = stride;
  at.i1 = padding;
  return push(Op::kConv2d, {x, w}, at);
}
NodeId Graph::conv2d_transpose(NodeId x, NodeId w, int64_t stride, int64_t padding) {
  Attrs at;
  at.i0 = stride;
  at.i1 = padding;
  return push(Op::kConv2dTranspose, {x, w}, at);
}
NodeId Graph::add_channel_bias(NodeId x, NodeId b) { return push(Op::kAddChannelBias, {x, b}); }
NodeId Graph::batch_norm_train(NodeId x, NodeId gamma, NodeId beta, double eps) {
  Attrs at;
  at.a = eps;
  at.flag = true;
  return push(Op::kBatchNorm, {x, gamma, beta}, at);
}
NodeId Graph::batch_norm_eval(NodeId x, NodeId gamma, NodeId beta, NodeId running_mean, NodeId running_var,
                              double eps) {
  Attrs at;
  at.a = eps;
  at.flag = false;
  return push(Op::kBatchNorm, {x, gamma, beta, running_mean, running_var}, at);
}
NodeId Graph::upsample_nearest(NodeId x, int64_t factor) {
  Attrs at;
  at.i0 = factor;
  return push(Op::kUpsampleNearest, {x}, at);
}

void Graph::set_name(NodeId id, std::string name) {
  check(id);
  if (by_name_.count(name)) throw Error("duplicate graph node name '" + name + "'");
  auto& n = nodes_[static_cast<std::size_t>(id.index)];
  if (!n.name.empty()) by_name_.erase(n.name);
  by_name_[name] = id;
  n.name = std::move(name);
}

std::optional<NodeId> Graph::find(std::string_view name) const {
  auto it = by_name_.find(std::string(name));
  if (it == by_name_.end()) return std::nullopt;
  return it->second;
}

const Tensor& Evaluation::value(NodeId id) const {
  if (!id.valid() || static_cast<std::size_t>(id.index) >= values_.size() || !computed_[id.index]) {
    throw Error("node " + std::to_string(id.index) + " was not evaluated");
  }
  return values_[static_cast<std::size_t>(id.index)];
}

const Tensor& Evaluation::value(std::string_view name) const {
  auto id = graph_->find(name);
  if (!id) throw Error("no node named '" + std::string(name) + "'");
  return value(*id);
}

std::map<std::string, Tensor> Evaluation::named_values() const {
  std::map<std::string, Tensor> out;
  for (std::size_t i = 0; i < values_.size(); ++i) {
    const auto& n = graph_->nodes()[i];
    if (computed_[i] && !n.name.empty()) out.emplace(n.name, values_[i]);
  }
  return out;
}

Evaluation forward(const Graph& graph, const Bindings& bindings, std::span<const NodeId> targets) {
  const auto& nodes = graph.nodes();
  const std::size_t n = nodes.size();
  std::vector<bool> needed(n, targets.empty());
  if (!targets.empty()) {
    for (auto t : targets) needed.at(static_cast<std::size_t>(t.index)) = true;
    for (std::size_t i = n; i-- > 0;) {
      if (!needed[i]) continue;
      for (auto p : nodes[i].parents) needed[static_cast<std::size_t>(p.index)] = true;
    }
  }

  Evaluation ev;
  ev.graph_ = &graph;
  ev.values_.resize(n);
  ev.aux_.resize(n);
  ev.computed_.assign(n, false);
  std::vector<const Tensor*> inputs;
  for (std::size_t i = 0; i < n; ++i) {
    if (!needed[i]) continue;
    const Node& node = nodes[i];
    const NodeId id{static_cast<int32_t>(i)};
    switch (node.op) {
      case Op::kInput:
      case Op::kParam: {
        auto it = bindings.find(node.name);
        if (it == bindings.end()) throw UnboundInputError(node.name);
        ev.values_[i] = it->second;
        break;
      }
      case Op::kConstant:
        ev.values_[i] = node.constant;
        break;
      default: {
        inputs.clear();
        for (auto p : node.parents) inputs.push_back(&ev.values_[static_cast<std::size_t>(p.index)]);
        ev.values_[i] = detail::evaluate(node, inputs, ev.aux_[i], detail::node_label(graph, id));
      }
    }
    if (!ev.values_[i].all_finite()) {
      throw NumericError(detail::node_label(graph, id), "non-finite value in forward pass");
    }
    ev.computed_[i] = true;
  }
  return ev;
}

const Tensor& Gradients::get(std::string_view name) const {
  auto it = by_name_.find(std::string(name));
  if (it == by_name_.end()) throw Error("no gradient for '" + std::string(name) + "'");
  return it->second;
}

Gradients backward(const Evaluation& eval, NodeId loss) {
  const Graph& graph = eval.graph();
  const auto& nodes = graph.nodes();
  const Tensor& loss_value = eval.value(loss);
  if (loss_value.size() != 1) {
    throw ShapeError("backward requires a one-element loss, node '" + detail::node_label(graph, loss) +
                     "' has shape " + shape_str(loss_value.shape()));
  }
  Gradients out;
  out.per_node_.resize(nodes.size());
  out.per_node_[static_cast<std::size_t>(loss.index)] = Tensor::scalar(1.0).reshaped(loss_value.shape());

  std::vector<const Tensor*> inputs;
  std::vector<bool> wanted;
  for (int32_t i = loss.index; i >= 0; --i) {
    auto& g = out.per_node_[static_cast<std::size_t>(i)];
    if (g.empty()) continue;
    const Node& node = nodes[static_cast<std::size_t>(i)];
    const NodeId id{i};
    if (!g.all_finite()) throw NumericError(detail::node_label(graph, id), "non-finite gradient");
    if (is_leaf(node.op) || !node.needs_grad) continue;
    inputs.clear();
    wanted.clear();
    bool any = false;
    for (auto p : node.parents) {
      inputs.push_back(&eval.value(p));
      wanted.push_back(nodes[static_cast<std::size_t>(p.index)].needs_grad);
      any = any || wanted.back();
    }
    if (!any) continue;
    auto contributions = detail::vjp(node, inputs, eval.value(id), eval.aux(id), g, wanted);
    for (std::size_t k = 0; k < node.parents.size(); ++k) {
      if (!wanted[k] || contributions[k].empty()) continue;
      auto& pg = out.per_node_[static_cast<std::size_t>(node.parents[k].index)];
      if (pg.empty()) {
        pg = std::move(contributions[k]);
      } else {
        auto& dst = pg.values();
        const auto& src = contributions[k].values();
        for (std::size_t e = 0; e < dst.size(); ++e) dst[e] += src[e];
      }
    }
  }
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const Node& node = nodes[i];
    if (!is_leaf(node.op) || !node.requires_grad || !eval.computed(NodeId{static_cast<int32_t>(i)})) continue;
    if (out.per_node_[i].empty()) out.per_node_[i] = Tensor(eval.value(NodeId{static_cast<int32_t>(i)}).shape());
    out.by_name_.emplace(node.name, out.per_node_[i]);
  }
  return out;
}

}  // namespace afl::ad

#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "afl/tensor.hpp"

namespace afl::ad {

enum class Op : uint8_t {
  // leaves
  kInput,
  kParam,
  kConstant,
  // dense subset: every op here has a symbolic gradient built from ops in
  // this subset, so graphs made of them can be differentiated twice
  kMatMul,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kAffine,
  kAddRow,
  kSumRows,
  kBroadcastRows,
  kConcat,
  kSliceLike,
  kPadLike,
  kSumLike,
  kTanh,
  kSigmoid,
  kSoftplus,
  kRelu,
  kLeakyRelu,
  kReluMask,
  kLeakyMask,
  kSquare,
  kInvOrZero,
  kMean,
  kSum,
  kNorm2,
  kRowNorm,
  kRowSum,
  kExpandRows,
  kBroadcast,
  kBroadcastMean,
  kTranspose,
  kReshape,
  kReshapeLike,
  // first-order only
  kConv2d,
  kConv2dTranspose,
  kAddChannelBias,
  kBatchNorm,
  kUpsampleNearest,
};

std::string_view op_name(Op op);
bool is_double_differentiable(Op op);
bool is_leaf(Op op);

struct NodeId {
  int32_t index = -1;
  bool valid() const { return index >= 0; }
  auto operator<=>(const NodeId&) const = default;
};

struct Attrs {
  double a = 0.0;
  double b = 0.0;
  int64_t i0 = 0;
  int64_t i1 = 0;
  bool flag = false;
  Shape shape;
};

struct Node {
  Op op = Op::kInput;
  std::vector<NodeId> parents;
  std::string name;
  Attrs attrs;
  bool requires_grad = false;  // leaves only
  bool needs_grad = false;     // some ancestor requires grad
  Tensor constant;             // kConstant only
};

// Static computation graph. Nodes are appended in evaluation order, so the
// graph is acyclic by construction and node index is a topological order.
// Shapes are checked at evaluation time; the leading dimension of inputs may
// vary between evaluations.
class Graph {
 public:
  NodeId input(const std::string& name, bool requires_grad = false);
  // Trainable leaf; repeated calls with the same name return the same node.
  NodeId param(const std::string& name);
  NodeId constant(Tensor value, const std::string& name = {});

  NodeId matmul(NodeId a, NodeId b);
  // add/sub/mul/div accept equal shapes or a one-element right/left operand.
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId div(NodeId a, NodeId b);
  // a*x + b
  NodeId affine(NodeId x, double a, double b);
  NodeId scale(NodeId x, double s) { return affine(x, s, 0.0); }
  // [n, k] + [k]
  NodeId add_row(NodeId x, NodeId v);
  // [n, k] -> [k]
  NodeId sum_rows(NodeId x);
  // [k] tiled to the shape of `like` ([n, k])
  NodeId broadcast_rows(NodeId v, NodeId like);
  // concatenation along dimension 1
  NodeId concat(NodeId a, NodeId b);
  // leading or trailing part of x along dim 1, as wide as `like`
  NodeId slice_like(NodeId x, NodeId like, bool from_end);
  // x zero-padded along dim 1 to the shape of `like`, placed first or last
  NodeId pad_like(NodeId x, NodeId like, bool from_end);
  // x itself when shapes match, else the total of x shaped like `like` (one element)
  NodeId sum_like(NodeId x, NodeId like);
  NodeId tanh(NodeId x);
  NodeId sigmoid(NodeId x);
  NodeId softplus(NodeId x);
  NodeId relu(NodeId x);
  NodeId leaky_relu(NodeId x, double slope);
  // g * relu'(x), with relu'(0) = 0
  NodeId relu_mask(NodeId g, NodeId x);
  NodeId leaky_mask(NodeId g, NodeId x, double slope);
  NodeId square(NodeId x);
  // 1/x, or 0 where x == 0
  NodeId inv_or_zero(NodeId x);
  NodeId mean(NodeId x);
  NodeId sum(NodeId x);
  NodeId norm2(NodeId x);
  // per-sample L2 norm over all non-leading dims -> [n]
  NodeId row_norm(NodeId x);
  NodeId row_sum(NodeId x);
  // [n] expanded to the shape of `like`
  NodeId expand_rows(NodeId r, NodeId like);
  // one-element tensor filled to the shape of `like` (identity on equal shapes)
  NodeId broadcast(NodeId s, NodeId like);
  // same as broadcast, divided by the element count of `like`
  NodeId broadcast_mean(NodeId s, NodeId like);
  NodeId transpose(NodeId x);
  // -1 in the target shape stands for the leading dimension of x
  NodeId reshape(NodeId x, Shape shape);
  NodeId reshape_like(NodeId x, NodeId like);

  NodeId conv2d(NodeId x, NodeId w, int64_t stride, int64_t padding);
  // w has shape [in, out, k, k]
  NodeId conv2d_transpose(NodeId x, NodeId w, int64_t stride, int64_t padding);
  NodeId add_channel_bias(NodeId x, NodeId b);
  NodeId batch_norm_train(NodeId x, NodeId gamma, NodeId beta, double eps);
  NodeId batch_norm_eval(NodeId x, NodeId gamma, NodeId beta, NodeId running_mean, NodeId running_var,
                         double eps);
  NodeId upsample_nearest(NodeId x, int64_t factor);

  void set_name(NodeId id, std::string name);
  std::optional<NodeId> find(std::string_view name) const;

  const Node& node(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id.index)); }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

 private:
  NodeId push(Op op, std::vector<NodeId> parents, Attrs attrs = {});
  void check(NodeId id) const;

  std::vector<Node> nodes_;
  std::unordered_map<std::string, NodeId> by_name_;
};

using Bindings = std::unordered_map<std::string, Tensor>;

// Per-node side results of an evaluation (batch-norm batch statistics).
struct NodeAux {
  std::vector<double> mean;
  std::vector<double> inv_std;
  std::vector<double> var;
};

class Evaluation {
 public:
  const Tensor& value(NodeId id) const;
  const Tensor& value(std::string_view name) const;
  bool computed(NodeId id) const { return computed_.at(static_cast<std::size_t>(id.index)); }
  const NodeAux& aux(NodeId id) const { return aux_.at(static_cast<std::size_t>(id.index)); }
  // All computed nodes keyed by name.
  std::map<std::string, Tensor> named_values() const;
  const Graph& graph() const { return *graph_; }

 private:
  friend Evaluation forward(const Graph&, const Bindings&, std::span<const NodeId>);
  const Graph* graph_ = nullptr;
  std::vector<Tensor> values_;
  std::vector<NodeAux> aux_;
  std::vector<bool> computed_;
};

// Evaluate the ancestors of `targets` (all nodes when empty). Throws
// UnboundInputError, ShapeError naming the node, or NumericError on NaN/Inf.
Evaluation forward(const Graph& graph, const Bindings& bindings, std::span<const NodeId> targets = {});
inline Evaluation forward(const Graph& graph, const Bindings& bindings, std::initializer_list<NodeId> targets) {
  return forward(graph, bindings, std::span<const NodeId>(targets.begin(), targets.size()));
}

class Gradients {
 public:
  bool contains(std::string_view name) const { return by_name_.find(std::string(name)) != by_name_.end(); }
  const Tensor& get(std::string_view name) const;
  // gradient with respect to any node (zero tensor if the loss does not depend on it)
  const Tensor& node(NodeId id) const { return per_node_.at(static_cast<std::size_t>(id.index)); }
  const std::map<std::string, Tensor>& by_name() const { return by_name_; }

 private:
  friend Gradients backward(const Evaluation&, NodeId);
  std::vector<Tensor> per_node_;
  std::map<std::string, Tensor> by_name_;
};

// Reverse sweep from a one-element loss. Returns gradients for every leaf that
// requires grad (keyed by leaf name). Accumulation order is fixed by node index.
Gradients backward(const Evaluation& eval, NodeId loss);

// Appends nodes computing d(sum of y)/dx to the graph. Every op on a path from
// x to y must be in the dense subset; otherwise throws UnsupportedError.
NodeId gradient_graph(Graph& graph, NodeId y, NodeId x);

}  // namespace afl::ad

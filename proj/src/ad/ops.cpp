#include "ops.hpp"

#include <cmath>

#include "afl/error.hpp"
#include "kernels.hpp"

namespace afl::ad::detail {

std::string node_label(const Graph& graph, NodeId id) {
  const auto& n = graph.node(id);
  if (!n.name.empty()) return n.name;
  return std::string(op_name(n.op)) + "#" + std::to_string(id.index);
}

bool is_scalar_like(const Tensor& t) { return t.size() == 1; }

namespace {

[[noreturn]] void shape_fail(const std::string& label, const Node& node, const std::string& why) {
  throw ShapeError("shape mismatch at node '" + label + "' (" + std::string(op_name(node.op)) + "): " + why);
}

void require_rank(const Tensor& t, int rank, const std::string& label, const Node& node) {
  if (t.rank() != rank) {
    shape_fail(label, node, "expected rank " + std::to_string(rank) + ", got " + shape_str(t.shape()));
  }
}

// Binary elementwise with one-element broadcasting on either side.
template <class F>
Tensor binary(const Tensor& a, const Tensor& b, const std::string& label, const Node& node, F f) {
  if (a.same_shape(b)) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
    return out;
  }
  if (is_scalar_like(b)) {
    Tensor out(a.shape());
    const double s = b[0];
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], s);
    return out;
  }
  if (is_scalar_like(a)) {
    Tensor out(b.shape());
    const double s = a[0];
    for (std::size_t i = 0; i < b.size(); ++i) out[i] = f(s, b[i]);
    return out;
  }
  shape_fail(label, node, shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class F>
Tensor unary(const Tensor& x, F f) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return out;
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double sum_all(const Tensor& t) {
  double s = 0.0;
  for (double v : t.values()) s += v;
  return s;
}

Shape with_dim1(Shape s, int64_t d1) {
  s[1] = d1;
  return s;
}

// Geometry helpers for dim-1 slicing over arbitrary trailing dims.
struct Dim1Layout {
  int64_t outer, dim1, inner;
};

Dim1Layout dim1_layout(const Tensor& t) {
  int64_t inner = 1;
  for (int i = 2; i < t.rank(); ++i) inner *= t.dim(i);
  return {t.dim(0), t.dim(1), inner};
}

void copy_dim1(const Tensor& src, int64_t src_begin, Tensor& dst, int64_t dst_begin, int64_t length,
               bool accumulate) {
  auto s = dim1_layout(src);
  auto d = dim1_layout(dst);
  for (int64_t o = 0; o < s.outer; ++o) {
    const double* sp = src.ptr() + (o * s.dim1 + src_begin) * s.inner;
    double* dp = dst.ptr() + (o * d.dim1 + dst_begin) * d.inner;
    for (int64_t k = 0; k < length * s.inner; ++k) dp[k] = accumulate ? dp[k] + sp[k] : sp[k];
  }
}

kernels::ConvGeometry conv_geometry(const Tensor& x, const Tensor& w, int64_t stride, int64_t padding,
                                    const std::string& label, const Node& node) {
  require_rank(x, 4, label, node);
  require_rank(w, 4, label, node);
  if (w.dim(2) != w.dim(3)) shape_fail(label, node, "kernel must be square");
  if (x.dim(1) != w.dim(1)) {
    shape_fail(label, node, "input channels " + std::to_string(x.dim(1)) + " vs weight " + shape_str(w.shape()));
  }
  kernels::ConvGeometry g{x.dim(1), x.dim(2), x.dim(3), w.dim(2), stride, padding, 0, 0};
  g.out_height = (g.height + 2 * padding - g.kernel) / stride + 1;
  g.out_width = (g.width + 2 * padding - g.kernel) / stride + 1;
  if (g.out_height <= 0 || g.out_width <= 0) shape_fail(label, node, "empty convolution output");
  return g;
}

// Geometry of the *output* image of a transposed convolution, seen as the input
// of the matching forward convolution.
kernels::ConvGeometry conv_t_geometry(const Tensor& x, const Tensor& w, int64_t stride, int64_t padding,
                                      const std::string& label, const Node& node) {
  require_rank(x, 4, label, node);
  require_rank(w, 4, label, node);
  if (w.dim(2) != w.dim(3)) shape_fail(label, node, "kernel must be square");
  if (x.dim(1) != w.dim(0)) {
    shape_fail(label, node, "input channels " + std::to_string(x.dim(1)) + " vs weight " + shape_str(w.shape()));
  }
  const int64_t k = w.dim(2);
  kernels::ConvGeometry g{w.dim(1), (x.dim(2) - 1) * stride - 2 * padding + k,
                          (x.dim(3) - 1) * stride - 2 * padding + k, k, stride, padding, x.dim(2), x.dim(3)};
  if (g.height <= 0 || g.width <= 0) shape_fail(label, node, "empty transposed-convolution output");
  return g;
}

struct ChannelLayout {
  int64_t batch, channels, spatial;
};

ChannelLayout channel_layout(const Tensor& x) {
  int64_t spatial = 1;
  for (int i = 2; i < x.rank(); ++i) spatial *= x.dim(i);
  return {x.dim(0), x.dim(1), spatial};
}

}  // namespace

Tensor evaluate(const Node& node, std::span<const Tensor* const> in, NodeAux& aux, const std::string& label) {
  switch (node.op) {
    case Op::kMatMul: {
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      require_rank(a, 2, label, node);
      require_rank(b, 2, label, node);
      if (a.dim(1) != b.dim(0)) shape_fail(label, node, shape_str(a.shape()) + " x " + shape_str(b.shape()));
      Tensor out({a.dim(0), b.dim(1)});
      kernels::gemm(a.ptr(), false, b.ptr(), false, out.ptr(), a.dim(0), a.dim(1), b.dim(1), false);
      return out;
    }
    case Op::kAdd: return binary(*in[0], *in[1], label, node, [](double x, double y) { return x + y; });
    case Op::kSub: return binary(*in[0], *in[1], label, node, [](double x, double y) { return x - y; });
    case Op::kMul: return binary(*in[0], *in[1], label, node, [](double x, double y) { return x * y; });
    case Op::kDiv: return binary(*in[0], *in[1], label, node, [](double x, double y) { return x / y; });
    case Op::kAffine: {
      const double a = node.attrs.a, b = node.attrs.b;
      return unary(*in[0], [a, b](double x) { return a * x + b; });
    }
    case Op::kAddRow: {
      const Tensor& x = *in[0];
      const Tensor& v = *in[1];
      require_rank(x, 2, label, node);
      if (v.rank() != 1 || v.dim(0) != x.dim(1)) {
        shape_fail(label, node, shape_str(x.shape()) + " + row " + shape_str(v.shape()));
      }
      Tensor out(x.shape());
      const int64_t k = x.dim(1);
      for (int64_t r = 0; r < x.dim(0); ++r)
        for (int64_t c = 0; c < k; ++c) out[r * k + c] = x[r * k + c] + v[c];
      return out;
    }
    case Op::kSumRows: {
      const Tensor& x = *in[0];
      require_rank(x, 2, label, node);
      Tensor out({x.dim(1)});
      for (int64_t r = 0; r < x.dim(0); ++r)
        for (int64_t c = 0; c < x.dim(1); ++c) out[c] += x[r * x.dim(1) + c];
      return out;
    }
    case Op::kBroadcastRows: {
      const Tensor& v = *in[0];
      const Tensor& like = *in[1];
      require_rank(like, 2, label, node);
      if (v.rank() != 1 || v.dim(0) != like.dim(1)) shape_fail(label, node, "row length mismatch");
      Tensor out(like.shape());
      for (int64_t r = 0; r < like.dim(0); ++r)
        for (int64_t c = 0; c < like.dim(1); ++c) out[r * like.dim(1) + c] = v[c];
      return out;
    }
    case Op::kConcat: {
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      if (a.rank() < 2 || a.rank() != b.rank()) shape_fail(label, node, "concat needs equal ranks >= 2");
      for (int i = 0; i < a.rank(); ++i) {
        if (i != 1 && a.dim(i) != b.dim(i)) {
          shape_fail(label, node, shape_str(a.shape()) + " vs " + shape_str(b.shape()));
        }
      }
      Tensor out(with_dim1(a.shape(), a.dim(1) + b.dim(1)));
      copy_dim1(a, 0, out, 0, a.dim(1), false);
      copy_dim1(b, 0, out, a.dim(1), b.dim(1), false);
      return out;
    }
    case Op::kSliceLike: {
      const Tensor& x = *in[0];
      const Tensor& like = *in[1];
      if (x.rank() < 2 || like.rank() != x.rank() || like.dim(1) > x.dim(1)) shape_fail(label, node, "bad slice");
      const int64_t len = like.dim(1), begin = node.attrs.flag ? x.dim(1) - len : 0;
      Tensor out(with_dim1(x.shape(), len));
      copy_dim1(x, begin, out, 0, len, false);
      return out;
    }
    case Op::kPadLike: {
      const Tensor& x = *in[0];
      const Tensor& like = *in[1];
      if (x.rank() < 2 || like.rank() != x.rank() || like.dim(1) < x.dim(1)) shape_fail(label, node, "bad pad");
      const int64_t offset = node.attrs.flag ? like.dim(1) - x.dim(1) : 0;
      Tensor out(with_dim1(x.shape(), like.dim(1)));
      copy_dim1(x, 0, out, offset, x.dim(1), false);
      return out;
    }
    case Op::kSumLike: {
      const Tensor& x = *in[0];
      const Tensor& like = *in[1];
      if (x.same_shape(like)) return x;
      if (!is_scalar_like(like)) shape_fail(label, node, "sum_like target must match or have one element");
      return Tensor(like.shape(), sum_all(x));
    }
    case Op::kTanh: return unary(*in[0], [](double x) { return std::tanh(x); });
    case Op::kSigmoid: return unary(*in[0], sigmoid);
    case Op::kSoftplus: return unary(*in[0], softplus);
    case Op::kRelu: return unary(*in[0], [](double x) { return x > 0 ? x : 0.0; });
    case Op::kLeakyRelu: {
      const double s = node.attrs.a;
      return unary(*in[0], [s](double x) { return x > 0 ? x : s * x; });
    }
    case Op::kReluMask: {
      if (!in[0]->same_shape(*in[1])) shape_fail(label, node, "mask shape");
      return binary(*in[0], *in[1], label, node, [](double g, double x) { return x > 0 ? g : 0.0; });
    }
    case Op::kLeakyMask: {
      if (!in[0]->same_shape(*in[1])) shape_fail(label, node, "mask shape");
      const double s = node.attrs.a;
      return binary(*in[0], *in[1], label, node, [s](double g, double x) { return x > 0 ? g : s * g; });
    }
    case Op::kSquare: return unary(*in[0], [](double x) { return x * x; });
    case Op::kInvOrZero: return unary(*in[0], [](double x) { return x == 0.0 ? 0.0 : 1.0 / x; });
    case Op::kMean: return Tensor::scalar(sum_all(*in[0]) / static_cast<double>(in[0]->size()));
    case Op::kSum: return Tensor::scalar(sum_all(*in[0]));
    case Op::kNorm2: {
      double s = 0.0;
      for (double v : in[0]->values()) s += v * v;
      return Tensor::scalar(std::sqrt(s));
    }
    case Op::kRowNorm:
    case Op::kRowSum: {
      const Tensor& x = *in[0];
      if (x.rank() < 2) shape_fail(label, node, "needs a leading batch dimension");
      const int64_t n = x.dim(0), k = x.row_size();
      Tensor out({n});
      for (int64_t r = 0; r < n; ++r) {
        double s = 0.0;
        for (int64_t c = 0; c < k; ++c) {
          const double v = x[r * k + c];
          s += node.op == Op::kRowNorm ? v * v : v;
        }
        out[r] = node.op == Op::kRowNorm ? std::sqrt(s) : s;
      }
      return out;
    }
    case Op::kExpandRows: {
      const Tensor& r = *in[0];
      const Tensor& like = *in[1];
      if (r.rank() != 1 || r.dim(0) != like.dim(0)) shape_fail(label, node, "row count mismatch");
      Tensor out(like.shape());
      const int64_t k = like.row_size();
      for (int64_t i = 0; i < like.dim(0); ++i)
        for (int64_t c = 0; c < k; ++c) out[i * k + c] = r[i];
      return out;
    }
    case Op::kBroadcast:
      if (in[0]->same_shape(*in[1])) return *in[0];
      [[fallthrough]];
    case Op::kBroadcastMean: {
      if (!is_scalar_like(*in[0])) shape_fail(label, node, "broadcast source must have one element");
      double v = (*in[0])[0];
      if (node.op == Op::kBroadcastMean) v /= static_cast<double>(in[1]->size());
      return Tensor(in[1]->shape(), v);
    }
    case Op::kTranspose: {
      const Tensor& x = *in[0];
      require_rank(x, 2, label, node);
      Tensor out({x.dim(1), x.dim(0)});
      for (int64_t r = 0; r < x.dim(0); ++r)
        for (int64_t c = 0; c < x.dim(1); ++c) out[c * x.dim(0) + r] = x[r * x.dim(1) + c];
      return out;
    }
    case Op::kReshape: {
      Shape s = node.attrs.shape;
      for (auto& d : s)
        if (d == -1) d = in[0]->dim(0);
      if (shape_numel(s) != static_cast<int64_t>(in[0]->size())) {
        shape_fail(label, node, "cannot reshape " + shape_str(in[0]->shape()) + " to " + shape_str(s));
      }
      return in[0]->reshaped(std::move(s));
    }
    case Op::kReshapeLike: {
      if (in[0]->size() != in[1]->size()) shape_fail(label, node, "element count mismatch");
      return in[0]->reshaped(in[1]->shape());
    }
    case Op::kConv2d: {
      const Tensor& x = *in[0];
      const Tensor& w = *in[1];
      auto g = conv_geometry(x, w, node.attrs.i0, node.attrs.i1, label, node);
      const int64_t out_c = w.dim(0), ckk = g.channels * g.kernel * g.kernel, plane = g.out_height * g.out_width;
      Tensor out({x.dim(0), out_c, g.out_height, g.out_width});
      std::vector<double> cols(static_cast<std::size_t>(ckk * plane));
      const int64_t in_size = g.channels * g.height * g.width;
      for (int64_t n = 0; n < x.dim(0); ++n) {
        kernels::im2col(x.ptr() + n * in_size, g, cols.data());
        kernels::gemm(w.ptr(), false, cols.data(), false, out.ptr() + n * out_c * plane, out_c, ckk, plane, false);
      }
      return out;
    }
    case Op::kConv2dTranspose: {
      const Tensor& x = *in[0];
      const Tensor& w = *in[1];
      auto g = conv_t_geometry(x, w, node.attrs.i0, node.attrs.i1, label, node);
      const int64_t in_c = w.dim(0), ckk = g.channels * g.kernel * g.kernel, plane = g.out_height * g.out_width;
      Tensor out({x.dim(0), g.channels, g.height, g.width});
      std::vector<double> cols(static_cast<std::size_t>(ckk * plane));
      const int64_t out_size = g.channels * g.height * g.width;
      for (int64_t n = 0; n < x.dim(0); ++n) {
        kernels::gemm(w.ptr(), true, x.ptr() + n * in_c * plane, false, cols.data(), ckk, in_c, plane, false);
        kernels::col2im(cols.data(), g, out.ptr() + n * out_size);
      }
      return out;
    }
    case Op::kAddChannelBias: {
      const Tensor& x = *in[0];
      const Tensor& b = *in[1];
      if (x.rank() < 2 || b.rank() != 1 || b.dim(0) != x.dim(1)) shape_fail(label, node, "channel bias");
      auto l = channel_layout(x);
      Tensor out(x.shape());
      for (int64_t n = 0; n < l.batch; ++n)
        for (int64_t c = 0; c < l.channels; ++c)
          for (int64_t s = 0; s < l.spatial; ++s) {
            const auto i = (n * l.channels + c) * l.spatial + s;
            out[i] = x[i] + b[c];
          }
      return out;
    }
    case Op::kBatchNorm: {
      const Tensor& x = *in[0];
      const Tensor& gamma = *in[1];
      const Tensor& beta = *in[2];
      if (x.rank() < 2 || gamma.size() != static_cast<std::size_t>(x.dim(1)) || !gamma.same_shape(beta)) {
        shape_fail(label, node, "batch_norm parameters vs input " + shape_str(x.shape()));
      }
      auto l = channel_layout(x);
      const double eps = node.attrs.a;
      aux.mean.assign(static_cast<std::size_t>(l.channels), 0.0);
      aux.var.assign(static_cast<std::size_t>(l.channels), 0.0);
      aux.inv_std.assign(static_cast<std::size_t>(l.channels), 0.0);
      if (node.attrs.flag) {
        const double m = static_cast<double>(l.batch * l.spatial);
        for (int64_t c = 0; c < l.channels; ++c) {
          double s = 0.0;
          for (int64_t n = 0; n < l.batch; ++n)
            for (int64_t k = 0; k < l.spatial; ++k) s += x[(n * l.channels + c) * l.spatial + k];
          const double mu = s / m;
          double v = 0.0;
          for (int64_t n = 0; n < l.batch; ++n)
            for (int64_t k = 0; k < l.spatial; ++k) {
              const double d = x[(n * l.channels + c) * l.spatial + k] - mu;
              v += d * d;
            }
          aux.mean[c] = mu;
          aux.var[c] = v / m;
        }
      } else {
        const Tensor& rm = *in[3];
        const Tensor& rv = *in[4];
        if (rm.size() != gamma.size() || rv.size() != gamma.size()) shape_fail(label, node, "running stats size");
        for (int64_t c = 0; c < l.channels; ++c) {
          aux.mean[c] = rm[c];
          aux.var[c] = rv[c];
        }
      }
      for (int64_t c = 0; c < l.channels; ++c) aux.inv_std[c] = 1.0 / std::sqrt(aux.var[c] + eps);
      Tensor out(x.shape());
      for (int64_t n = 0; n < l.batch; ++n)
        for (int64_t c = 0; c < l.channels; ++c)
          for (int64_t k = 0; k < l.spatial; ++k) {
            const auto i = (n * l.channels + c) * l.spatial + k;
            out[i] = gamma[c] * (x[i] - aux.mean[c]) * aux.inv_std[c] + beta[c];
          }
      return out;
    }
    case Op::kUpsampleNearest: {
      const Tensor& x = *in[0];
      require_rank(x, 4, label, node);
      const int64_t f = node.attrs.i0;
      if (f < 1) shape_fail(label, node, "upsample factor must be positive");
      const int64_t h = x.dim(2), w = x.dim(3);
      Tensor out({x.dim(0), x.dim(1), h * f, w * f});
      for (int64_t p = 0; p < x.dim(0) * x.dim(1); ++p)
        for (int64_t y = 0; y < h * f; ++y)
          for (int64_t xx = 0; xx < w * f; ++xx) out[(p * h * f + y) * w * f + xx] = x[(p * h + y / f) * w + xx / f];
      return out;
    }
    default:
      throw Error("evaluate called on leaf node '" + label + "'");
  }
}

namespace {

// Reduce a gradient to the shape of an operand that may have been broadcast.
Tensor reduce_to(const Tensor& operand, Tensor grad) {
  if (operand.same_shape(grad)) return grad;
  return Tensor(operand.shape(), sum_all(grad));
}

}  // namespace

std::vector<Tensor> vjp(const Node& node, std::span<const Tensor* const> in, const Tensor& y, const NodeAux& aux,
                        const Tensor& g, const std::vector<bool>& wanted) {
  std::vector<Tensor> out(in.size());
  auto want = [&](std::size_t i) { return wanted[i]; };
  switch (node.op) {
    case Op::kMatMul: {
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
      if (want(0)) {
        out[0] = Tensor(a.shape());
        kernels::gemm(g.ptr(), false, b.ptr(), true, out[0].ptr(), m, n, k, false);
      }
      if (want(1)) {
        out[1] = Tensor(b.shape());
        kernels::gemm(a.ptr(), true, g.ptr(), false, out[1].ptr(), k, m, n, false);
      }
      break;
    }
    case Op::kAdd:
    case Op::kSub: {
      if (want(0)) out[0] = reduce_to(*in[0], g);
      if (want(1)) {
        Tensor t = g;
        if (node.op == Op::kSub)
          for (auto& v : t.values()) v = -v;
        out[1] = reduce_to(*in[1], std::move(t));
      }
      break;
    }
    case Op::kMul: {
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      auto other = [&](const Tensor& o) {
        Tensor t(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) t[i] = g[i] * (is_scalar_like(o) && o.size() != g.size() ? o[0] : o[i]);
        return t;
      };
      if (want(0)) out[0] = reduce_to(a, other(b));
      if (want(1)) out[1] = reduce_to(b, other(a));
      break;
    }
    case Op::kDiv: {
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      const bool b_bcast = b.size() != g.size();
      if (want(0)) {
        Tensor t(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) t[i] = g[i] / (b_bcast ? b[0] : b[i]);
        out[0] = reduce_to(a, std::move(t));
      }
      if (want(1)) {
        // d(a/b)/db = -y/b
        Tensor t(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) t[i] = -g[i] * y[i] / (b_bcast ? b[0] : b[i]);
        out[1] = reduce_to(b, std::move(t));
      }
      break;
    }
    case Op::kAffine: {
      const double a = node.attrs.a;
      out[0] = unary(g, [a](double v) { return a * v; });
      break;
    }
    case Op::kAddRow: {
      if (want(0)) out[0] = g;
      if (want(1)) {
        const int64_t k = g.dim(1);
        out[1] = Tensor({k});
        for (int64_t r = 0; r < g.dim(0); ++r)
          for (int64_t c = 0; c < k; ++c) out[1][c] += g[r * k + c];
      }
      break;
    }
    case Op::kSumRows: {
      const Tensor& x = *in[0];
      out[0] = Tensor(x.shape());
      for (int64_t r = 0; r < x.dim(0); ++r)
        for (int64_t c = 0; c < x.dim(1); ++c) out[0][r * x.dim(1) + c] = g[c];
      break;
    }
    case Op::kBroadcastRows: {
      if (want(0)) {
        const int64_t k = g.dim(1);
        out[0] = Tensor({k});
        for (int64_t r = 0; r < g.dim(0); ++r)
          for (int64_t c = 0; c < k; ++c) out[0][c] += g[r * k + c];
      }
      break;
    }
    case Op::kConcat: {
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      if (want(0)) {
        out[0] = Tensor(a.shape());
        copy_dim1(g, 0, out[0], 0, a.dim(1), false);
      }
      if (want(1)) {
        out[1] = Tensor(b.shape());
        copy_dim1(g, a.dim(1), out[1], 0, b.dim(1), false);
      }
      break;
    }
    case Op::kSliceLike: {
      if (want(0)) {
        const Tensor& x = *in[0];
        out[0] = Tensor(x.shape());
        copy_dim1(g, 0, out[0], node.attrs.flag ? x.dim(1) - g.dim(1) : 0, g.dim(1), false);
      }
      break;
    }
    case Op::kPadLike: {
      if (want(0)) {
        const Tensor& x = *in[0];
        out[0] = Tensor(x.shape());
        copy_dim1(g, node.attrs.flag ? g.dim(1) - x.dim(1) : 0, out[0], 0, x.dim(1), false);
      }
      break;
    }
    case Op::kSumLike: {
      if (want(0)) out[0] = in[0]->same_shape(g) ? g : Tensor(in[0]->shape(), g[0]);
      break;
    }
    case Op::kTanh: {
      out[0] = Tensor(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) out[0][i] = g[i] * (1.0 - y[i] * y[i]);
      break;
    }
    case Op::kSigmoid: {
      out[0] = Tensor(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) out[0][i] = g[i] * y[i] * (1.0 - y[i]);
      break;
    }
    case Op::kSoftplus: {
      out[0] = Tensor(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) out[0][i] = g[i] * sigmoid((*in[0])[i]);
      break;
    }
    case Op::kRelu: {
      out[0] = Tensor(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) out[0][i] = (*in[0])[i] > 0 ? g[i] : 0.0;
      break;
    }
    case Op::kLeakyRelu: {
      const double s = node.attrs.a;
      out[0] = Tensor(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) out[0][i] = (*in[0])[i] > 0 ? g[i] : s * g[i];
      break;
    }
    case Op::kReluMask: {
      if (want(0)) {
        out[0] = Tensor(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) out[0][i] = (*in[1])[i] > 0 ? g[i] : 0.0;
      }
      break;
    }
    case Op::kLeakyMask: {
      const double s = node.attrs.a;
      if (want(0)) {
        out[0] = Tensor(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) out[0][i] = (*in[1])[i] > 0 ? g[i] : s * g[i];
      }
      break;
    }
    case Op::kSquare: {
      out[0] = Tensor(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) out[0][i] = 2.0 * (*in[0])[i] * g[i];
      break;
    }
    case Op::kInvOrZero: {
      out[0] = Tensor(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) out[0][i] = -g[i] * y[i] * y[i];
      break;
    }
    case Op::kMean: out[0] = Tensor(in[0]->shape(), g[0] / static_cast<double>(in[0]->size())); break;
    case Op::kSum: out[0] = Tensor(in[0]->shape(), g[0]); break;
    case Op::kNorm2: {
      const double scale = y[0] == 0.0 ? 0.0 : g[0] / y[0];
      out[0] = unary(*in[0], [scale](double v) { return v * scale; });
      break;
    }
    case Op::kRowNorm:
    case Op::kRowSum: {
      const Tensor& x = *in[0];
      const int64_t k = x.row_size();
      out[0] = Tensor(x.shape());
      for (int64_t r = 0; r < x.dim(0); ++r) {
        if (node.op == Op::kRowSum) {
          for (int64_t c = 0; c < k; ++c) out[0][r * k + c] = g[r];
        } else {
          const double scale = y[r] == 0.0 ? 0.0 : g[r] / y[r];
          for (int64_t c = 0; c < k; ++c) out[0][r * k + c] = x[r * k + c] * scale;
        }
      }
      break;
    }
    case Op::kExpandRows: {
      if (want(0)) {
        const int64_t k = g.row_size();
        out[0] = Tensor({g.dim(0)});
        for (int64_t r = 0; r < g.dim(0); ++r) {
          double s = 0.0;
          for (int64_t c = 0; c < k; ++c) s += g[r * k + c];
          out[0][r] = s;
        }
      }
      break;
    }
    case Op::kBroadcast:
    case Op::kBroadcastMean: {
      if (want(0) && in[0]->same_shape(g)) {
        out[0] = g;
      } else if (want(0)) {
        double s = sum_all(g);
        if (node.op == Op::kBroadcastMean) s /= static_cast<double>(g.size());
        out[0] = Tensor(in[0]->shape(), s);
      }
      break;
    }
    case Op::kTranspose: {
      out[0] = Tensor(in[0]->shape());
      const int64_t r0 = g.dim(0), c0 = g.dim(1);
      for (int64_t r = 0; r < r0; ++r)
        for (int64_t c = 0; c < c0; ++c) out[0][c * r0 + r] = g[r * c0 + c];
      break;
    }
    case Op::kReshape:
    case Op::kReshapeLike: {
      if (want(0)) out[0] = g.reshaped(in[0]->shape());
      break;
    }
    case Op::kConv2d: {
      const Tensor& x = *in[0];
      const Tensor& w = *in[1];
      static const std::string label = "conv2d";
      auto geo = conv_geometry(x, w, node.attrs.i0, node.attrs.i1, label, node);
      const int64_t out_c = w.dim(0), ckk = geo.channels * geo.kernel * geo.kernel;
      const int64_t plane = geo.out_height * geo.out_width, in_size = geo.channels * geo.height * geo.width;
      std::vector<double> cols(static_cast<std::size_t>(ckk * plane));
      if (want(0)) out[0] = Tensor(x.shape());
      if (want(1)) out[1] = Tensor(w.shape());
      for (int64_t n = 0; n < x.dim(0); ++n) {
        const double* gn = g.ptr() + n * out_c * plane;
        if (want(1)) {
          kernels::im2col(x.ptr() + n * in_size, geo, cols.data());
          kernels::gemm(gn, false, cols.data(), true, out[1].ptr(), out_c, plane, ckk, true);
        }
        if (want(0)) {
          kernels::gemm(w.ptr(), true, gn, false, cols.data(), ckk, out_c, plane, false);
          kernels::col2im(cols.data(), geo, out[0].ptr() + n * in_size);
        }
      }
      break;
    }
    case Op::kConv2dTranspose: {
      const Tensor& x = *in[0];
      const Tensor& w = *in[1];
      static const std::string label = "conv2d_transpose";
      auto geo = conv_t_geometry(x, w, node.attrs.i0, node.attrs.i1, label, node);
      const int64_t in_c = w.dim(0), ckk = geo.channels * geo.kernel * geo.kernel;
      const int64_t plane = geo.out_height * geo.out_width, out_size = geo.channels * geo.height * geo.width;
      std::vector<double> cols(static_cast<std::size_t>(ckk * plane));
      if (want(0)) out[0] = Tensor(x.shape());
      if (want(1)) out[1] = Tensor(w.shape());
      for (int64_t n = 0; n < x.dim(0); ++n) {
        kernels::im2col(g.ptr() + n * out_size, geo, cols.data());
        if (want(0)) kernels::gemm(w.ptr(), false, cols.data(), false, out[0].ptr() + n * in_c * plane, in_c, ckk, plane, false);
        if (want(1)) kernels::gemm(x.ptr() + n * in_c * plane, false, cols.data(), true, out[1].ptr(), in_c, plane, ckk, true);
      }
      break;
    }
    case Op::kAddChannelBias: {
      if (want(0)) out[0] = g;
      if (want(1)) {
        auto l = channel_layout(g);
        out[1] = Tensor({l.channels});
        for (int64_t n = 0; n < l.batch; ++n)
          for (int64_t c = 0; c < l.channels; ++c)
            for (int64_t s = 0; s < l.spatial; ++s) out[1][c] += g[(n * l.channels + c) * l.spatial + s];
      }
      break;
    }
    case Op::kBatchNorm: {
      const Tensor& x = *in[0];
      const Tensor& gamma = *in[1];
      auto l = channel_layout(x);
      const double m = static_cast<double>(l.batch * l.spatial);
      std::vector<double> sum_g(static_cast<std::size_t>(l.channels), 0.0), sum_gx(static_cast<std::size_t>(l.channels), 0.0);
      for (int64_t n = 0; n < l.batch; ++n)
        for (int64_t c = 0; c < l.channels; ++c)
          for (int64_t k = 0; k < l.spatial; ++k) {
            const auto i = (n * l.channels + c) * l.spatial + k;
            const double xhat = (x[i] - aux.mean[c]) * aux.inv_std[c];
            sum_g[c] += g[i];
            sum_gx[c] += g[i] * xhat;
          }
      if (want(1)) out[1] = Tensor(gamma.shape(), sum_gx);
      if (want(2)) out[2] = Tensor(gamma.shape(), sum_g);
      if (want(0)) {
        out[0] = Tensor(x.shape());
        for (int64_t n = 0; n < l.batch; ++n)
          for (int64_t c = 0; c < l.channels; ++c)
            for (int64_t k = 0; k < l.spatial; ++k) {
              const auto i = (n * l.channels + c) * l.spatial + k;
              if (node.attrs.flag) {
                const double xhat = (x[i] - aux.mean[c]) * aux.inv_std[c];
                out[0][i] = gamma[c] * aux.inv_std[c] / m * (m * g[i] - sum_g[c] - xhat * sum_gx[c]);
              } else {
                out[0][i] = g[i] * gamma[c] * aux.inv_std[c];
              }
            }
      }
      break;
    }
    case Op::kUpsampleNearest: {
      const Tensor& x = *in[0];
      const int64_t f = node.attrs.i0, h = x.dim(2), w = x.dim(3);
      out[0] = Tensor(x.shape());
      for (int64_t p = 0; p < x.dim(0) * x.dim(1); ++p)
        for (int64_t yy = 0; yy < h * f; ++yy)
          for (int64_t xx = 0; xx < w * f; ++xx) out[0][(p * h + yy / f) * w + xx / f] += g[(p * h * f + yy) * w * f + xx];
      break;
    }
    default:
      break;
  }
  return out;
}

}  // namespace afl::ad::detail

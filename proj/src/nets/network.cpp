#include "afl/nets/network.hpp"

#include <set>

#include "afl/error.hpp"
#include "afl/rng.hpp"

namespace afl::nets {

namespace {

constexpr std::pair<LayerKind, std::string_view> kKindNames[] = {
    {LayerKind::kDense, "dense"},
    {LayerKind::kConv2d, "conv2d"},
    {LayerKind::kConv2dTranspose, "conv2d_transpose"},
    {LayerKind::kBatchNorm, "batch_norm"},
    {LayerKind::kRelu, "relu"},
    {LayerKind::kLeakyRelu, "leaky_relu"},
    {LayerKind::kTanh, "tanh"},
    {LayerKind::kSigmoid, "sigmoid"},
    {LayerKind::kReshape, "reshape"},
    {LayerKind::kConcatChannels, "concat_channels"},
    {LayerKind::kUpsampleNearest, "upsample_nearest"},
};

[[noreturn]] void bad_layer(const std::string& net, const LayerSpec& l, const std::string& what) {
  throw ShapeError("network '" + net + "', layer '" + l.name + "': " + what);
}

int64_t conv_out(int64_t in, int64_t k, int64_t s, int64_t p, bool* exact) {
  const int64_t span = in + 2 * p - k;
  *exact = span >= 0 && span % s == 0;
  return span / s + 1;
}

Shape infer(const std::string& net, const LayerSpec& l, const Shape& in) {
  switch (l.kind) {
    case LayerKind::kDense:
      if (in.size() != 1 || in[0] != l.in) bad_layer(net, l, "expects [" + std::to_string(l.in) + "], got " + shape_str(in));
      if (l.out < 1) bad_layer(net, l, "needs positive width");
      return {l.out};
    case LayerKind::kConv2d:
    case LayerKind::kConv2dTranspose: {
      if (in.size() != 3 || in[0] != l.in) bad_layer(net, l, "expects " + std::to_string(l.in) + " channels, got " + shape_str(in));
      if (l.kernel < 1 || l.stride < 1 || l.padding < 0 || l.out < 1) bad_layer(net, l, "bad geometry");
      Shape o{l.out, 0, 0};
      for (int d = 1; d <= 2; ++d) {
        if (l.kind == LayerKind::kConv2d) {
          bool exact = false;
          o[d] = conv_out(in[d], l.kernel, l.stride, l.padding, &exact);
          if (!exact) bad_layer(net, l, "padding does not tile input " + shape_str(in));
        } else {
          o[d] = (in[d] - 1) * l.stride - 2 * l.padding + l.kernel;
        }
        if (o[d] < 1) bad_layer(net, l, "output collapses");
      }
      return o;
    }
    case LayerKind::kBatchNorm:
      if (in.empty() || in[0] != l.out) bad_layer(net, l, "expects " + std::to_string(l.out) + " channels, got " + shape_str(in));
      return in;
    case LayerKind::kRelu:
    case LayerKind::kLeakyRelu:
    case LayerKind::kTanh:
    case LayerKind::kSigmoid:
      return in;
    case LayerKind::kReshape:
      if (l.shape.empty() || shape_numel(l.shape) != shape_numel(in)) {
        bad_layer(net, l, "cannot reshape " + shape_str(in) + " to " + shape_str(l.shape));
      }
      return l.shape;
    case LayerKind::kConcatChannels: {
      if (in.empty() || l.out < 1) bad_layer(net, l, "bad concat");
      Shape o = in;
      o[0] += l.out;
      return o;
    }
    case LayerKind::kUpsampleNearest:
      if (in.size() != 3 || l.stride < 1) bad_layer(net, l, "upsampling needs [c, h, w]");
      return {in[0], in[1] * l.stride, in[2] * l.stride};
  }
  bad_layer(net, l, "unknown kind");
}

bool has_weight(LayerKind k) {
  return k == LayerKind::kDense || k == LayerKind::kConv2d || k == LayerKind::kConv2dTranspose;
}

Shape weight_shape(const LayerSpec& l) {
  switch (l.kind) {
    case LayerKind::kDense: return {l.in, l.out};
    case LayerKind::kConv2d: return {l.out, l.in, l.kernel, l.kernel};
    case LayerKind::kConv2dTranspose: return {l.in, l.out, l.kernel, l.kernel};
    default: return {};
  }
}

ad::NodeId leaf(ad::Graph& g, const std::string& name, bool trainable) {
  if (auto found = g.find(name)) {
    const bool is_param = g.node(*found).op == ad::Op::kParam;
    if (is_param != trainable) throw Error("leaf '" + name + "' built both as trainable and frozen");
    return *found;
  }
  return trainable ? g.param(name) : g.input(name);
}

ad::NodeId fixed(ad::Graph& g, const std::string& name) {
  if (auto found = g.find(name)) return *found;
  return g.input(name);
}

}  // namespace

std::string_view layer_kind_name(LayerKind kind) {
  for (const auto& [k, n] : kKindNames)
    if (k == kind) return n;
  return "unknown";
}

LayerKind parse_layer_kind(std::string_view name) {
  for (const auto& [k, n] : kKindNames)
    if (n == name) return k;
  throw ConfigError("unknown layer kind '" + std::string(name) + "'");
}

LayerSpec dense(std::string name, int64_t in, int64_t out, bool bias) {
  LayerSpec l;
  l.kind = LayerKind::kDense;
  l.name = std::move(name);
  l.in = in;
  l.out = out;
  l.bias = bias;
  return l;
}

LayerSpec conv2d(std::string name, int64_t in, int64_t out, int64_t kernel, int64_t stride, int64_t padding,
                 bool bias) {
  LayerSpec l = dense(std::move(name), in, out, bias);
  l.kind = LayerKind::kConv2d;
  l.kernel = kernel;
  l.stride = stride;
  l.padding = padding;
  return l;
}

LayerSpec conv2d_transpose(std::string name, int64_t in, int64_t out, int64_t kernel, int64_t stride,
                           int64_t padding, bool bias) {
  LayerSpec l = conv2d(std::move(name), in, out, kernel, stride, padding, bias);
  l.kind = LayerKind::kConv2dTranspose;
  return l;
}

LayerSpec batch_norm(std::string name, int64_t channels) {
  LayerSpec l;
  l.kind = LayerKind::kBatchNorm;
  l.name = std::move(name);
  l.out = channels;
  return l;
}

LayerSpec relu(std::string name, bool tap) {
  LayerSpec l;
  l.kind = LayerKind::kRelu;
  l.name = std::move(name);
  l.tap = tap;
  return l;
}

LayerSpec leaky_relu(std::string name, double slope, bool tap) {
  LayerSpec l;
  l.kind = LayerKind::kLeakyRelu;
  l.name = std::move(name);
  l.slope = slope;
  l.tap = tap;
  return l;
}

LayerSpec tanh_layer(std::string name) {
  LayerSpec l;
  l.kind = LayerKind::kTanh;
  l.name = std::move(name);
  return l;
}

LayerSpec sigmoid_layer(std::string name) {
  LayerSpec l;
  l.kind = LayerKind::kSigmoid;
  l.name = std::move(name);
  return l;
}

LayerSpec reshape(std::string name, Shape shape) {
  LayerSpec l;
  l.kind = LayerKind::kReshape;
  l.name = std::move(name);
  l.shape = std::move(shape);
  return l;
}

LayerSpec concat_channels(std::string name, int64_t extra_channels) {
  LayerSpec l;
  l.kind = LayerKind::kConcatChannels;
  l.name = std::move(name);
  l.out = extra_channels;
  return l;
}

LayerSpec upsample_nearest(std::string name, int64_t factor) {
  LayerSpec l;
  l.kind = LayerKind::kUpsampleNearest;
  l.name = std::move(name);
  l.stride = factor;
  return l;
}

Network::Network(std::string name, Shape sample_shape, std::vector<LayerSpec> layers)
    : name_(std::move(name)), sample_shape_(std::move(sample_shape)), layers_(std::move(layers)) {
  if (layers_.empty()) throw ConfigError("network '" + name_ + "' has no layers");
  if (sample_shape_.empty() || sample_shape_.size() > 3) throw ShapeError("network '" + name_ + "' needs a per-sample shape of rank 1 to 3");
  std::set<std::string> seen;
  Shape cur = sample_shape_;
  for (const auto& l : layers_) {
    if (l.name.empty() || l.name.find('.') != std::string::npos) {
      throw ConfigError("network '" + name_ + "': layer names must be non-empty and dot-free");
    }
    if (!seen.insert(l.name).second) throw ConfigError("network '" + name_ + "': duplicate layer name '" + l.name + "'");
    if (l.kind == LayerKind::kConv2d || l.kind == LayerKind::kConv2dTranspose) {
      if (l.kernel != 3 && l.kernel != 4) bad_layer(name_, l, "kernels are 3x3 or 4x4");
    }
    cur = infer(name_, l, cur);
    shapes_.push_back(cur);
  }
}

const LayerSpec& Network::layer(const std::string& name) const {
  for (const auto& l : layers_)
    if (l.name == name) return l;
  throw NotFoundError("network '" + name_ + "' has no layer '" + name + "'");
}

std::vector<std::string> Network::tap_names() const {
  std::vector<std::string> out;
  for (const auto& l : layers_)
    if (l.tap) out.push_back(l.name);
  return out;
}

const Shape& Network::tap_shape(const std::string& tap) const {
  for (std::size_t i = 0; i < layers_.size(); ++i)
    if (layers_[i].tap && layers_[i].name == tap) return shapes_[i];
  throw NotFoundError("network '" + name_ + "' has no tap '" + tap + "'");
}

void Network::init(uint64_t seed) {
  params_.clear();
  stats_.clear();
  Rng base(seed, "init:" + name_);
  for (const auto& l : layers_) {
    const std::string p = name_ + "." + l.name;
    if (has_weight(l.kind)) {
      Rng r = base.split(p + ".w");
      params_[p + ".w"] = r.normal_tensor(weight_shape(l), kInitStd);
      if (l.bias) params_[p + ".b"] = Tensor({l.out});
    } else if (l.kind == LayerKind::kBatchNorm) {
      params_[p + ".gamma"] = Tensor({l.out}, 1.0);
      params_[p + ".beta"] = Tensor({l.out});
      stats_[l.name] = RunningStats{Tensor({l.out}), Tensor({l.out}, 1.0)};
    }
  }
  if (sn_enabled_) enable_spectral_norm(seed, sn_iters_);
}

int64_t Network::param_count() const {
  int64_t n = 0;
  for (const auto& [_, t] : params_) n += static_cast<int64_t>(t.size());
  return n;
}

void Network::enable_spectral_norm(uint64_t seed, int n_power_iters) {
  sn_enabled_ = true;
  sn_iters_ = n_power_iters;
  sn_.clear();
  for (const auto& l : layers_) {
    if (!has_weight(l.kind)) continue;
    const std::string w = name_ + "." + l.name + ".w";
    sn_[w] = make_sn_state(weight_shape(l), mix64(seed ^ stream_id(w)), n_power_iters);
  }
  // v and sigma must be valid before the first build
  if (!params_.empty()) sn_update();
}

void Network::sn_update() {
  for (auto& [w, st] : sn_) power_iterate(params_.at(w), st);
}

Built Network::build(ad::Graph& g, ad::NodeId x, const BuildOptions& opt) const {
  const std::string inst = opt.instance.empty() ? name_ : opt.instance;
  const Mode mode = opt.mode.value_or(mode_);
  for (const auto& [tap, _] : opt.inject) tap_shape(tap);
  Built b;
  ad::NodeId cur = x;
  for (const auto& l : layers_) {
    const std::string p = name_ + "." + l.name;
    auto weight = [&]() {
      ad::NodeId w = leaf(g, p + ".w", opt.trainable);
      if (!sn_enabled_) return w;
      ad::NodeId mask = fixed(g, p + ".w.sn");
      ad::NodeId sigma = g.sum(g.mul(w, mask));
      return g.div(w, sigma);
    };
    switch (l.kind) {
      case LayerKind::kDense:
        cur = g.matmul(cur, weight());
        if (l.bias) cur = g.add_row(cur, leaf(g, p + ".b", opt.trainable));
        break;
      case LayerKind::kConv2d:
      case LayerKind::kConv2dTranspose:
        cur = l.kind == LayerKind::kConv2d ? g.conv2d(cur, weight(), l.stride, l.padding)
                                           : g.conv2d_transpose(cur, weight(), l.stride, l.padding);
        if (l.bias) cur = g.add_channel_bias(cur, leaf(g, p + ".b", opt.trainable));
        break;
      case LayerKind::kBatchNorm: {
        ad::NodeId gamma = leaf(g, p + ".gamma", opt.trainable);
        ad::NodeId beta = leaf(g, p + ".beta", opt.trainable);
        if (mode == Mode::kTrain) {
          cur = g.batch_norm_train(cur, gamma, beta, kBatchNormEps);
        } else {
          cur = g.batch_norm_eval(cur, gamma, beta, fixed(g, p + ".running_mean"), fixed(g, p + ".running_var"),
                                  kBatchNormEps);
        }
        b.batch_norms[l.name] = cur;
        break;
      }
      case LayerKind::kRelu: cur = g.relu(cur); break;
      case LayerKind::kLeakyRelu: cur = g.leaky_relu(cur, l.slope); break;
      case LayerKind::kTanh: cur = g.tanh(cur); break;
      case LayerKind::kSigmoid: cur = g.sigmoid(cur); break;
      case LayerKind::kReshape: {
        Shape s{-1};
        s.insert(s.end(), l.shape.begin(), l.shape.end());
        cur = g.reshape(cur, s);
        break;
      }
      case LayerKind::kConcatChannels: {
        auto it = opt.extra.find(l.name);
        if (it == opt.extra.end()) throw Error("network '" + name_ + "': no extra input for '" + l.name + "'");
        cur = g.concat(cur, it->second);
        break;
      }
      case LayerKind::kUpsampleNearest: cur = g.upsample_nearest(cur, l.stride); break;
    }
    g.set_name(cur, inst + "." + l.name);
    if (l.tap) {
      b.taps[l.name] = cur;
      if (auto it = opt.inject.find(l.name); it != opt.inject.end()) {
        cur = g.add(cur, it->second);
        g.set_name(cur, inst + "." + l.name + "+");
      }
    }
    if (l.name == opt.stop_after) break;
  }
  b.output = cur;
  return b;
}

void Network::bind(ad::Bindings& bindings) const {
  for (const auto& [k, t] : params_) bindings[k] = t;
  for (const auto& [layer, s] : stats_) {
    bindings[name_ + "." + layer + ".running_mean"] = s.mean;
    bindings[name_ + "." + layer + ".running_var"] = s.var;
  }
  for (const auto& [w, st] : sn_) bindings[w + ".sn"] = sn_mask(params_.at(w).shape(), st);
}

void Network::update_running_stats(const ad::Evaluation& eval, const Built& built, double momentum) {
  for (const auto& [layer, id] : built.batch_norms) {
    if (!eval.computed(id)) continue;
    const auto& aux = eval.aux(id);
    if (aux.mean.empty()) continue;  // eval-mode node
    auto& s = stats_.at(layer);
    const double count = static_cast<double>(eval.value(id).size()) / static_cast<double>(s.mean.size());
    const double unbias = count > 1.0 ? count / (count - 1.0) : 1.0;
    for (std::size_t c = 0; c < s.mean.size(); ++c) {
      s.mean[c] = (1.0 - momentum) * s.mean[c] + momentum * aux.mean[c];
      s.var[c] = (1.0 - momentum) * s.var[c] + momentum * aux.var[c] * unbias;
    }
  }
}

nlohmann::json Network::descriptor() const {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : layers_) {
    nlohmann::json j{{"kind", layer_kind_name(l.kind)}, {"name", l.name}};
    switch (l.kind) {
      case LayerKind::kDense:
        j["in"] = l.in;
        j["out"] = l.out;
        j["bias"] = l.bias;
        break;
      case LayerKind::kConv2d:
      case LayerKind::kConv2dTranspose:
        j["in"] = l.in;
        j["out"] = l.out;
        j["kernel"] = l.kernel;
        j["stride"] = l.stride;
        j["padding"] = l.padding;
        j["bias"] = l.bias;
        break;
      case LayerKind::kBatchNorm:
      case LayerKind::kConcatChannels: j["out"] = l.out; break;
      case LayerKind::kLeakyRelu: j["slope"] = l.slope; break;
      case LayerKind::kReshape: j["shape"] = l.shape; break;
      case LayerKind::kUpsampleNearest: j["stride"] = l.stride; break;
      default: break;
    }
    if (l.tap) j["tap"] = true;
    layers.push_back(std::move(j));
  }
  nlohmann::json out{{"name", name_}, {"input_shape", sample_shape_}, {"layers", std::move(layers)}};
  if (sn_enabled_) out["spectral_norm_iters"] = sn_iters_;
  return out;
}

Network Network::from_descriptor(const nlohmann::json& j) {
  try {
    std::vector<LayerSpec> layers;
    for (const auto& lj : j.at("layers")) {
      LayerSpec l;
      l.kind = parse_layer_kind(lj.at("kind").get<std::string>());
      l.name = lj.at("name").get<std::string>();
      l.in = lj.value("in", int64_t{0});
      l.out = lj.value("out", int64_t{0});
      l.kernel = lj.value("kernel", int64_t{0});
      l.stride = lj.value("stride", int64_t{1});
      l.padding = lj.value("padding", int64_t{0});
      l.slope = lj.value("slope", 0.2);
      l.bias = lj.value("bias", true);
      l.shape = lj.value("shape", Shape{});
      l.tap = lj.value("tap", false);
      layers.push_back(std::move(l));
    }
    Network net(j.at("name").get<std::string>(), j.at("input_shape").get<Shape>(), std::move(layers));
    if (j.contains("spectral_norm_iters")) {
      net.sn_enabled_ = true;
      net.sn_iters_ = j.at("spectral_norm_iters").get<int>();
    }
    return net;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed network descriptor: ") + e.what());
  }
}

RunResult run(const Network& net, const Tensor& batch) {
  ad::Graph g;
  ad::NodeId x = g.input("x");
  Built b = net.build(g, x, {.trainable = false});
  ad::Bindings bind;
  net.bind(bind);
  bind["x"] = batch;
  std::vector<ad::NodeId> targets{b.output};
  for (const auto& [_, id] : b.taps) targets.push_back(id);
  auto ev = ad::forward(g, bind, targets);
  RunResult r;
  r.output = ev.value(b.output);
  for (const auto& [name, id] : b.taps) r.taps[name] = ev.value(id);
  return r;
}

Tensor tap(const Network& net, const std::string& name, const Tensor& batch) {
  net.tap_shape(name);
  return run(net, batch).taps.at(name);
}

}  // namespace afl::nets

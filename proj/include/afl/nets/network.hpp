#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "afl/ad/adam.hpp"
#include "afl/ad/graph.hpp"
#include "afl/nets/spectral_norm.hpp"
#include "afl/tensor.hpp"
#include "json.hpp"

namespace afl::nets {

enum class LayerKind {
  kDense,
  kConv2d,
  kConv2dTranspose,
  kBatchNorm,
  kRelu,
  kLeakyRelu,
  kTanh,
  kSigmoid,
  kReshape,
  kConcatChannels,
  kUpsampleNearest,
};

std::string_view layer_kind_name(LayerKind kind);
LayerKind parse_layer_kind(std::string_view name);

// One layer of a sequential network. Field meaning depends on the kind:
//   dense            in/out features
//   conv2d           in/out channels, kernel, stride, padding
//   conv2d_transpose same as conv2d
//   batch_norm       out = channels
//   leaky_relu       slope
//   reshape          shape (per sample, no batch dimension)
//   concat_channels  out = channels of the extra input appended along dim 1
//   upsample_nearest stride = factor
struct LayerSpec {
  LayerKind kind = LayerKind::kRelu;
  std::string name;
  int64_t in = 0;
  int64_t out = 0;
  int64_t kernel = 0;
  int64_t stride = 1;
  int64_t padding = 0;
  double slope = 0.2;
  bool bias = true;
  Shape shape;
  bool tap = false;
};

LayerSpec dense(std::string name, int64_t in, int64_t out, bool bias = true);
LayerSpec conv2d(std::string name, int64_t in, int64_t out, int64_t kernel, int64_t stride, int64_t padding,
                 bool bias = true);
LayerSpec conv2d_transpose(std::string name, int64_t in, int64_t out, int64_t kernel, int64_t stride,
                           int64_t padding, bool bias = true);
LayerSpec batch_norm(std::string name, int64_t channels);
LayerSpec relu(std::string name, bool tap = false);
LayerSpec leaky_relu(std::string name, double slope = 0.2, bool tap = false);
LayerSpec tanh_layer(std::string name);
LayerSpec sigmoid_layer(std::string name);
LayerSpec reshape(std::string name, Shape shape);
LayerSpec concat_channels(std::string name, int64_t extra_channels);
LayerSpec upsample_nearest(std::string name, int64_t factor);

enum class Mode { kTrain, kEval };

struct RunningStats {
  Tensor mean;
  Tensor var;
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;
inline constexpr double kInitStd = 0.02;

struct BuildOptions {
  // Prefix for the names of intermediate nodes; defaults to the network name.
  // Building the same network twice into one graph needs distinct instances.
  std::string instance;
  // Parameters become trainable leaves, or plain inputs when false.
  bool trainable = true;
  // Overrides the network's own mode for this build.
  std::optional<Mode> mode;
  // tap layer name -> node added to that layer's output before the next layer
  std::map<std::string, ad::NodeId> inject;
  // concat_channels layer name -> node appended along dim 1
  std::map<std::string, ad::NodeId> extra;
  // Stop after this layer (its output becomes `output`).
  std::string stop_after;
};

struct Built {
  ad::NodeId output;
  // tap layer name -> activation before any injection
  std::map<std::string, ad::NodeId> taps;
  // batch_norm layer name -> node, for running-stat updates
  std::map<std::string, ad::NodeId> batch_norms;
};

// Sequential network with named tap layers. Parameter leaves are named
// "<network>.<layer>.<w|b|gamma|beta>", so several builds of one network in a
// single graph share their parameters.
class Network {
 public:
  Network() = default;
  Network(std::string name, Shape sample_shape, std::vector<LayerSpec> layers);

  const std::string& name() const { return name_; }
  const Shape& sample_shape() const { return sample_shape_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  const LayerSpec& layer(const std::string& name) const;
  // Per-sample output shape of layer i.
  const Shape& layer_shape(std::size_t i) const { return shapes_.at(i); }
  const Shape& output_shape() const { return shapes_.back(); }

  std::vector<std::string> tap_names() const;
  // Per-sample shape of a tap; throws NotFoundError for unknown names.
  const Shape& tap_shape(const std::string& tap) const;

  // Weights ~ N(0, 0.02^2), biases 0, batch-norm scale 1 and offset 0.
  void init(uint64_t seed);
  ad::ParamMap& params() { return params_; }
  const ad::ParamMap& params() const { return params_; }
  int64_t param_count() const;
  std::map<std::string, RunningStats>& running_stats() { return stats_; }
  const std::map<std::string, RunningStats>& running_stats() const { return stats_; }

  Mode mode() const { return mode_; }
  void set_mode(Mode mode) { mode_ = mode; }

  // Wraps every dense/conv weight; the state vectors are seeded.
  void enable_spectral_norm(uint64_t seed, int n_power_iters = 1);
  bool spectral_norm() const { return sn_enabled_; }
  std::map<std::string, SpectralNormState>& sn_states() { return sn_; }
  const std::map<std::string, SpectralNormState>& sn_states() const { return sn_; }
  // Runs the configured number of power iterations on every wrapped weight.
  void sn_update();

  Built build(ad::Graph& graph, ad::NodeId x, const BuildOptions& options = {}) const;
  // Adds parameter, running-stat and spectral-norm leaves to `bindings`.
  void bind(ad::Bindings& bindings) const;
  // Momentum update of running stats from a train-mode evaluation.
  void update_running_stats(const ad::Evaluation& eval, const Built& built,
                            double momentum = kBatchNormMomentum);

  nlohmann::json descriptor() const;
  static Network from_descriptor(const nlohmann::json& j);

 private:
  std::string name_;
  Shape sample_shape_;
  std::vector<LayerSpec> layers_;
  std::vector<Shape> shapes_;
  ad::ParamMap params_;
  std::map<std::string, RunningStats> stats_;
  Mode mode_ = Mode::kTrain;
  bool sn_enabled_ = false;
  int sn_iters_ = 1;
  std::map<std::string, SpectralNormState> sn_;
};

// Output and taps of a single forward pass of `net` on a batch.
struct RunResult {
  Tensor output;
  std::map<std::string, Tensor> taps;
};
RunResult run(const Network& net, const Tensor& batch);

// Activation of one tap for a batch. Throws NotFoundError for unknown taps.
Tensor tap(const Network& net, const std::string& name, const Tensor& batch);

}  // namespace afl::nets
